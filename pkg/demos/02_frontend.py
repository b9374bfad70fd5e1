"""From waveform to the 98 x 64 log-mel model input.

Run: python3 demos/02_frontend.py [--plot out.png]
"""

import sys

import numpy as np

from bnnspeech import frontend as F

t = np.arange(16000) / F.SAMPLE_RATE
# a rising chirp plus a steady 1 kHz tone
sweep = np.sin(2 * np.pi * (300 * t + 3000 * t ** 2))
wave = F.Waveform(0.4 * sweep + 0.2 * np.sin(2 * np.pi * 1000 * t))

spec = F.model_input(wave)      # first 980 ms -> 98 frames
print("model input:", spec.shape, spec.dtype)
print("log floor:", np.log(F.LOG_FLOOR), " min value:", spec.min())

fb = F.mel_filterbank()
centres = F.mel_band_edges()[1:-1]
print("filterbank", fb.shape, "first centres (Hz):", np.round(centres[:4], 1))

# the 1 kHz tone lives in one mel band all the way through
band = int(np.argmin(np.abs(centres - 1000)))
print("band nearest 1 kHz:", band, " mean energy there:", spec[:, band].mean().round(2))

if "--plot" in sys.argv:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    plt.imshow(spec.T, origin="lower", aspect="auto")
    plt.xlabel("frame (10 ms)")
    plt.ylabel("mel band")
    plt.savefig(sys.argv[sys.argv.index("--plot") + 1])
