"""Manifests, one-second segment indexing and synthetic audio corpora."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .frontend import SAMPLE_RATE, Waveform, load_audio, write_wav

log = logging.getLogger(__name__)

SEGMENT_SAMPLES = SAMPLE_RATE
SPLITS = ("train", "test")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class Clip:
    path: str
    label: str | None = None
    split: str = "train"


@dataclass
class Manifest:
    clips: list
    root: Path = Path(".")

    def resolve(self, clip: Clip) -> Path:
        p = Path(clip.path)
        return p if p.is_absolute() else self.root / p

    def split(self, name) -> "Manifest":
        return Manifest([c for c in self.clips if c.split == name], self.root)

    @property
    def labels(self):
        return sorted({c.label for c in self.clips if c.label is not None})

    def __len__(self):
        return len(self.clips)

    def __iter__(self):
        return iter(self.clips)


def read_manifest(path) -> Manifest:
    """JSON-lines manifest; relative clip paths resolve against its folder."""
    path = Path(path)
    clips = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from exc
            if "path" not in rec:
                raise ManifestError(f"{path}:{lineno}: missing 'path'")
            split = rec.get("split", "train")
            if split not in SPLITS:
                raise ManifestError(f"{path}:{lineno}: split must be train or test, got {split!r}")
            clips.append(Clip(rec["path"], rec.get("label"), split))
    return Manifest(clips, path.parent)


def write_manifest(path, clips) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for c in clips:
            rec = {"path": c.path, "split": c.split}
            if c.label is not None:
                rec["label"] = c.label
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


# ------------------------------------------------------------- segments

@dataclass
class SegmentIndex:
    """Non-overlapping one-second windows: ``(clip index, start sample)``."""

    manifest: Manifest
    segments: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    def __len__(self):
        return len(self.segments)

    def clip_path(self, i) -> str:
        return self.manifest.clips[self.segments[i][0]].path


def segment_starts(n_samples: int, seg=SEGMENT_SAMPLES):
    """Offsets of floor(duration) whole segments; one for clips under a second."""
    return [k * seg for k in range(max(1, n_samples // seg))]


def build_segment_index(m: Manifest, loader=load_audio) -> SegmentIndex:
    idx = SegmentIndex(m)
    for ci, clip in enumerate(m.clips):
        try:
            w = loader(m.resolve(clip))
        except Exception as exc:  # any unreadable clip is skipped, not fatal
            log.warning("skipping unreadable clip %s: %s", clip.path, exc)
            idx.skipped.append((clip.path, str(exc)))
            continue
        idx.segments.extend((ci, s) for s in segment_starts(len(w)))
    return idx


def cut_segment(samples: np.ndarray, start: int, length=SEGMENT_SAMPLES) -> np.ndarray:
    seg = samples[start:start + length]
    if seg.shape[0] < length:
        seg = np.pad(seg, (0, length - seg.shape[0]))
    return seg.astype(np.float32)


def clip_segments(samples: np.ndarray, length=SEGMENT_SAMPLES):
    """Split a clip into non-overlapping segments, zero-padding the tail."""
    n = samples.shape[0]
    count = max(1, -(-n // length))
    return [cut_segment(samples, k * length, length) for k in range(count)]


# ------------------------------------------------------------ synthetic

CLASSES = ("tone", "noise", "chirp")


def _tone(rng, n, sr):
    t = np.arange(n) / sr
    f0 = rng.uniform(200.0, 3000.0)
    sig = np.zeros(n)
    for h in range(1, rng.integers(1, 4) + 1):
        sig += rng.uniform(0.3, 1.0) / h * np.sin(2 * np.pi * f0 * h * t + rng.uniform(0, 2 * np.pi))
    return sig


def _noise(rng, n, sr):
    white = rng.standard_normal(n)
    # random one-pole colouring
    a = rng.uniform(0.0, 0.9)
    return lfilter([1.0], [1.0, -a], white)


def _chirp(rng, n, sr):
    t = np.arange(n) / sr
    f0, f1 = rng.uniform(150.0, 1500.0), rng.uniform(2500.0, 7000.0)
    if rng.random() < 0.5:
        f0, f1 = f1, f0
    # repeating sweep every `period` seconds
    period = rng.uniform(0.3, 0.8)
    tau = np.mod(t, period)
    phase = 2 * np.pi * (f0 * tau + 0.5 * (f1 - f0) / period * tau ** 2)
    return np.sin(phase)


_GENERATORS = {"tone": _tone, "noise": _noise, "chirp": _chirp}


def synth_clip(kind: str, duration: float, rng, sr=SAMPLE_RATE) -> Waveform:
    n = int(round(duration * sr))
    sig = _GENERATORS[kind](rng, n, sr)
    sig = sig / (np.max(np.abs(sig)) + 1e-9)
    sig = sig * rng.uniform(0.1, 0.8) + rng.standard_normal(n) * 0.003
    return Waveform(np.clip(sig, -1.0, 1.0).astype(np.float32), sr)


def make_synthetic_task(out_dir, n_clips=150, seed=0, test_fraction=0.2,
                        min_duration=1.2, max_duration=3.5) -> Path:
    """Write a balanced tone/noise/chirp task as WAVs plus ``manifest.jsonl``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    clips = []
    per_class = n_clips // len(CLASSES)
    n_test = int(round(per_class * test_fraction))
    for kind in CLASSES:
        for i in range(per_class):
            w = synth_clip(kind, rng.uniform(min_duration, max_duration), rng)
            name = f"{kind}_{i:03d}.wav"
            write_wav(out_dir / name, w)
            clips.append(Clip(name, kind, "test" if i < n_test else "train"))
    path = out_dir / "manifest.jsonl"
    write_manifest(path, clips)
    return path


def make_unlabeled_corpus(out_dir, n_clips=60, seed=1, min_duration=2.0, max_duration=6.0) -> Path:
    """Unlabeled clips mixing the synthetic sound types, for distillation."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    clips = []
    for i in range(n_clips):
        dur = rng.uniform(min_duration, max_duration)
        kinds = rng.choice(CLASSES, size=rng.integers(1, 3), replace=False)
        mix = sum(synth_clip(k, dur, rng).samples for k in kinds)
        mix = mix / max(1.0, float(np.max(np.abs(mix))))
        name = f"clip_{i:04d}.wav"
        write_wav(out_dir / name, Waveform(mix, SAMPLE_RATE))
        clips.append(Clip(name, None, "train"))
    path = out_dir / "manifest.jsonl"
    write_manifest(path, clips)
    return path
