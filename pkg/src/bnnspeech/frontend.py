"""Log-magnitude Mel spectrogram frontend (16 kHz, 25 ms / 10 ms, 64 bins)."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000
WIN_LENGTH = 400
HOP_LENGTH = 160
N_FFT = 512
N_MELS = 64
F_LO = 60.0
F_HI = 7800.0
LOG_FLOOR = 1e-6
# 98 frames == 980 ms, the model's input window
MODEL_SAMPLES = 15680
MODEL_FRAMES = 98


class UnsupportedRateError(ValueError):
    pass


class WavFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float32).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


def _as_waveform(w) -> Waveform:
    return w if isinstance(w, Waveform) else Waveform(np.asarray(w))


def hann_window(n: int = WIN_LENGTH) -> np.ndarray:
    """Periodic Hann window."""
    k = np.arange(n)
    return (0.5 - 0.5 * np.cos(2.0 * np.pi * k / n)).astype(np.float64)


def n_frames(n_samples: int) -> int:
    return -(-n_samples // HOP_LENGTH)


def frame_signal(samples: np.ndarray) -> np.ndarray:
    """Reflect-pad by half a window and cut ``ceil(len / hop)`` frames.

    Frame ``t`` is centred on sample ``t * hop``.
    """
    half = WIN_LENGTH // 2
    padded = np.pad(samples.astype(np.float64), (half, half), mode="reflect")
    count = n_frames(samples.shape[0])
    idx = np.arange(count)[:, None] * HOP_LENGTH + np.arange(WIN_LENGTH)[None, :]
    return padded[idx]


def stft_magnitude(w) -> np.ndarray:
    """Magnitude STFT, shape ``(frames, 257)``."""
    w = _as_waveform(w)
    if w.sample_rate != SAMPLE_RATE:
        raise UnsupportedRateError(
            f"expected {SAMPLE_RATE} Hz audio, got {w.sample_rate} Hz; resample first")
    if len(w) < 1:
        raise ValueError("waveform is empty")
    frames = frame_signal(w.samples) * hann_window()
    spec = np.fft.rfft(frames, n=N_FFT, axis=-1)
    return np.abs(spec).astype(np.float32)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(n_mels=N_MELS, f_lo=F_LO, f_hi=F_HI) -> np.ndarray:
    """``n_mels + 2`` frequencies (Hz): lower edge, centres, upper edge."""
    return mel_to_hz(np.linspace(hz_to_mel(f_lo), hz_to_mel(f_hi), n_mels + 2))


def mel_filterbank(sr=SAMPLE_RATE, n_fft=N_FFT, n_mels=N_MELS, f_lo=F_LO, f_hi=F_HI) -> np.ndarray:
    """Triangular HTK-mel filters as a ``(n_fft // 2 + 1, n_mels)`` matrix."""
    if not (0 <= f_lo < f_hi <= sr / 2):
        raise ValueError(f"invalid frequency range [{f_lo}, {f_hi}] for sr={sr}")
    if n_mels < 1 or n_fft < 2:
        raise ValueError("n_mels and n_fft must be positive")
    edges = mel_band_edges(n_mels, f_lo, f_hi)
    freqs = np.arange(n_fft // 2 + 1) * sr / n_fft
    lower, centre, upper = edges[:-2], edges[1:-1], edges[2:]
    f = freqs[:, None]
    rising = (f - lower) / (centre - lower)
    falling = (upper - f) / (upper - centre)
    return np.maximum(0.0, np.minimum(rising, falling)).astype(np.float32)


_FILTERBANK = mel_filterbank()


def log_mel(w) -> np.ndarray:
    """Natural-log Mel magnitudes, shape ``(frames, 64)``, floored at 1e-6."""
    mag = stft_magnitude(w)
    mel = mag @ _FILTERBANK
    return np.log(np.maximum(mel, LOG_FLOOR)).astype(np.float32)


def model_input(segment) -> np.ndarray:
    """98 x 64 log-mel features from the first 980 ms of a segment.

    Shorter segments are zero-padded.
    """
    w = _as_waveform(segment)
    samples = w.samples[:MODEL_SAMPLES]
    if samples.shape[0] < MODEL_SAMPLES:
        samples = np.pad(samples, (0, MODEL_SAMPLES - samples.shape[0]))
    return log_mel(Waveform(samples, w.sample_rate))


def resample_linear(w: Waveform, target: int) -> Waveform:
    if target <= 0:
        raise ValueError("target rate must be positive")
    if target == w.sample_rate:
        return Waveform(w.samples.copy(), target)
    n_out = int(round(len(w) * target / w.sample_rate))
    pos = np.arange(n_out) * (w.sample_rate / target)
    out = np.interp(pos, np.arange(len(w)), w.samples.astype(np.float64))
    return Waveform(out.astype(np.float32), target)


def read_wav(path) -> Waveform:
    """Read PCM-16 or float32 WAV; stereo is averaged to mono."""
    path = Path(path)
    try:
        rate, data = wavfile.read(path)
    except (ValueError, OSError) as exc:
        raise WavFormatError(f"{path}: {exc}") from exc
    if data.dtype == np.int16:
        samples = data.astype(np.float32) / 32768.0
    elif data.dtype == np.float32:
        samples = data
    else:
        raise WavFormatError(f"{path}: unsupported sample encoding {data.dtype} "
                             "(need 16-bit PCM or 32-bit float)")
    if samples.ndim == 2:
        if samples.shape[1] > 2:
            raise WavFormatError(f"{path}: {samples.shape[1]} channels (need mono or stereo)")
        samples = samples.mean(axis=1)
    return Waveform(samples.astype(np.float32), int(rate))


def write_wav(path, w: Waveform, pcm16: bool = True) -> None:
    if pcm16:
        data = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype(np.int16)
    else:
        data = w.samples.astype(np.float32)
    wavfile.write(Path(path), w.sample_rate, data)


def load_audio(path) -> Waveform:
    """Read a WAV and bring it to 16 kHz."""
    w = read_wav(path)
    if w.sample_rate != SAMPLE_RATE:
        log.debug("resampling %s from %d Hz", path, w.sample_rate)
        w = resample_linear(w, SAMPLE_RATE)
    return w
