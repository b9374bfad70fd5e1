"""Linear probes on frozen embeddings."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import graph as G
from . import ops
from .data import SEGMENT_SAMPLES, Manifest, clip_segments, cut_segment
from .frontend import load_audio, model_input


class ProbeError(ValueError):
    pass


@dataclass
class ProbeConfig:
    batch_size: int = 64
    learning_rate: float = 1e-3
    epochs: int = 100
    seed: int = 42

    @classmethod
    def for_dataset(cls, n_train, **kw):
        """Batch 32 for sets under 10k clips, otherwise 64."""
        return cls(batch_size=32 if n_train < 10_000 else 64, **kw)


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits, y) -> float:
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return float(-logp[np.arange(len(y)), y].mean())


class LinearProbe:
    def __init__(self, dim, classes, seed=0):
        rng = np.random.default_rng(seed)
        self.classes = list(classes)
        k = len(self.classes)
        self.weight = (rng.standard_normal((dim, k)) * np.sqrt(2.0 / (dim + k))).astype(np.float32)
        self.bias = np.zeros(k, np.float32)

    def logits(self, emb):
        return np.asarray(emb, np.float32) @ self.weight + self.bias

    def predict(self, emb):
        return np.argmax(self.logits(emb), axis=-1)


class ProbeTrainer:
    """Softmax regression with Adam, advanced one epoch at a time."""

    def __init__(self, y, classes, dim, cfg: ProbeConfig):
        self.y = np.asarray(y)
        self.cfg = cfg
        self.rng = np.random.default_rng([cfg.seed, 0])
        self.probe = LinearProbe(dim, classes, seed=cfg.seed)
        self.params = {"w": self.probe.weight, "b": self.probe.bias}
        self.state = ops.AdamState()

    def epoch(self, x):
        x = np.asarray(x, np.float32)
        y, bs = self.y, self.cfg.batch_size
        order = self.rng.permutation(len(y))
        for s in range(0, len(y), bs):
            b = order[s:s + bs]
            p = softmax(self.probe.logits(x[b]))
            p[np.arange(len(b)), y[b]] -= 1.0
            p /= len(b)
            ops.adam_step(self.params, {"w": x[b].T @ p, "b": p.sum(axis=0)}, self.state,
                          self.cfg.learning_rate)


def segment_rng(cfg: ProbeConfig):
    """Generator for per-epoch segment placement, independent of shuffling."""
    return np.random.default_rng([cfg.seed, 1])


def fit_probe(draw_epoch, y, classes, dim, cfg: ProbeConfig) -> LinearProbe:
    """Train a probe; ``draw_epoch(epoch)`` gives that epoch's ``(n, dim)`` embeddings."""
    tr = ProbeTrainer(y, classes, dim, cfg)
    for e in range(cfg.epochs):
        tr.epoch(draw_epoch(e))
    return tr.probe


def _labels(m: Manifest, classes):
    unlabeled = [c.path for c in m if c.label is None]
    if unlabeled:
        raise ProbeError(f"{len(unlabeled)} clip(s) have no label, e.g. {unlabeled[0]}")
    lookup = {c: i for i, c in enumerate(classes)}
    try:
        return np.array([lookup[c.label] for c in m])
    except KeyError as exc:
        raise ProbeError(f"clip label {exc.args[0]!r} not among the probe classes") from None


def load_clips(m: Manifest, loader=load_audio):
    return [loader(m.resolve(c)).samples for c in m]


def random_segments(clips, rng):
    """One uniformly placed one-second segment per clip, as model inputs."""
    out = np.empty((len(clips), 98, 64), np.float32)
    for i, s in enumerate(clips):
        start = int(rng.integers(0, max(0, len(s) - SEGMENT_SAMPLES) + 1))
        out[i] = model_input(cut_segment(s, start))
    return out


def encode(encoder, feats, taps=None, batch=64):
    """Embed model inputs; with ``taps`` returns a dict of per-tap arrays."""
    parts = []
    for s in range(0, len(feats), batch):
        if taps is None:
            parts.append(G.forward(encoder, feats[s:s + batch]))
        else:
            parts.append(G.forward_taps(encoder, feats[s:s + batch], taps))
    if taps is None:
        return np.concatenate(parts)
    return {t: np.concatenate([p[t] for p in parts]) for t in taps}


def train_probe(encoder: G.LayerGraph, train: Manifest, cfg: ProbeConfig | None = None,
                classes=None, clips=None) -> LinearProbe:
    """Fit a probe on a frozen encoder, drawing a fresh segment per clip each epoch."""
    if len(train) == 0:
        raise ProbeError("empty training split")
    cfg = cfg or ProbeConfig.for_dataset(len(train))
    classes = classes or train.labels
    y = _labels(train, classes)
    clips = clips if clips is not None else load_clips(train)
    rng = segment_rng(cfg)
    return fit_probe(lambda e: encode(encoder, random_segments(clips, rng)),
                     y, classes, encoder.embedding_dim, cfg)


def clip_scores(encoder, probe: LinearProbe, samples) -> np.ndarray:
    """Mean segment logits over a whole clip (tail segment zero-padded)."""
    feats = np.stack([model_input(s) for s in clip_segments(samples)])
    return probe.logits(G.forward(encoder, feats)).mean(axis=0)


def evaluate_clip(encoder, probe, samples):
    """``(predicted class, mean logits)``; ties resolve to the first class."""
    scores = clip_scores(encoder, probe, samples)
    return probe.classes[int(np.argmax(scores))], scores


def evaluate(encoder, probe, test: Manifest, clips=None):
    """Per-clip predictions ``[(path, true, predicted, scores)]``."""
    if len(test) == 0:
        raise ProbeError("empty test split")
    clips = clips if clips is not None else load_clips(test)
    rows = []
    for c, s in zip(test, clips):
        pred, scores = evaluate_clip(encoder, probe, s)
        rows.append((c.path, c.label, pred, scores))
    return rows


def accuracy(rows) -> float:
    if not rows:
        raise ProbeError("no predictions to score")
    return float(np.mean([r[1] == r[2] for r in rows]))


def write_predictions(path, rows, classes):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["clip_path", "true_label", "predicted_label"] + [f"score_{c}" for c in classes])
        for p, t, pr, s in rows:
            w.writerow([p, t, pr] + [f"{v:.6g}" for v in s])
