"""Teacher-student embedding distillation."""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import graph as G
from . import modelio, ops
from .data import SegmentIndex, cut_segment
from .frontend import load_audio, model_input

log = logging.getLogger(__name__)

TEACHER_DIM = 1024


class DistillError(RuntimeError):
    pass


class NonFiniteLossError(DistillError):
    def __init__(self, step, checkpoint):
        super().__init__(f"non-finite loss at step {step}; diagnostic checkpoint: {checkpoint}")
        self.step = step
        self.checkpoint = checkpoint


# ----------------------------------------------------------------- loss

def distill_loss(student, teacher) -> float:
    """Half squared L2 distance, averaged over the batch."""
    s = np.asarray(student, dtype=np.float64)
    t = np.asarray(teacher, dtype=np.float64)
    if s.shape != t.shape:
        raise ValueError(f"student {s.shape} and teacher {t.shape} shapes differ")
    d = (t - s).reshape(-1, s.shape[-1]) if s.ndim else (t - s).reshape(1, 1)
    return float(0.5 * np.sum(d * d) / d.shape[0])


def distill_loss_grad(student, teacher) -> np.ndarray:
    s = np.asarray(student, dtype=np.float32)
    n = s.shape[0] if s.ndim > 1 else 1
    return ((s - np.asarray(teacher, dtype=np.float32)) / n).astype(np.float32)


# ------------------------------------------------------- embedding file

EMB_MAGIC = b"BREM"
EMB_VERSION = 1


def segment_key(clip_path: str, start: int) -> int:
    """Stable 64-bit key for the segment of ``clip_path`` starting at ``start``."""
    h = hashlib.blake2b(f"{clip_path}#{int(start)}".encode("utf-8"), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def write_embeddings(path, keys, vectors) -> None:
    vectors = np.asarray(vectors, dtype="<f4")
    keys = np.asarray(keys, dtype="<u8")
    if vectors.ndim != 2 or len(keys) != len(vectors):
        raise ValueError("need one key per embedding row")
    rec = np.zeros(len(keys), dtype=[("key", "<u8"), ("vec", "<f4", (vectors.shape[1],))])
    rec["key"], rec["vec"] = keys, vectors
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC + struct.pack("<IIQ", EMB_VERSION, vectors.shape[1], len(keys)))
        fh.write(rec.tobytes())


def read_embeddings(path):
    """Return ``(keys, vectors)``."""
    buf = Path(path).read_bytes()
    if buf[:4] != EMB_MAGIC:
        raise modelio.BadMagicError(f"{path}: not an embedding file")
    version, dim, count = struct.unpack_from("<IIQ", buf, 4)
    if version != EMB_VERSION:
        raise modelio.UnsupportedVersionError(f"{path}: embedding file version {version}")
    dt = np.dtype([("key", "<u8"), ("vec", "<f4", (dim,))])
    if len(buf) != 20 + count * dt.itemsize:
        raise modelio.ModelFormatError(f"{path}: size does not match {count} x {dim} records")
    rec = np.frombuffer(buf, dtype=dt, offset=20, count=count)
    return rec["key"].astype(np.uint64), rec["vec"].astype(np.float32)


# -------------------------------------------------------------- teachers

class TeacherOracle:
    """Maps segments to target embeddings.

    ``per_segment`` teachers are deterministic per segment and can be
    cached; otherwise ``embed`` sees the whole batch.
    """

    dim = TEACHER_DIM
    per_segment = True

    def embed(self, features: np.ndarray, keys) -> np.ndarray:
        raise NotImplementedError


class SyntheticTeacher(TeacherOracle):
    """Frozen random two-layer projection of log-mel summary statistics."""

    def __init__(self, seed=0, dim=TEACHER_DIM, hidden=256):
        rng = np.random.default_rng(seed)
        self.dim = dim
        n_in = 2 * 64
        self.w1 = rng.standard_normal((n_in, hidden)) / np.sqrt(n_in)
        self.b1 = rng.standard_normal(hidden) * 0.1
        self.w2 = rng.standard_normal((hidden, dim)) / np.sqrt(hidden)

    def embed(self, features, keys=None):
        f = np.asarray(features, dtype=np.float64).reshape(-1, 98, 64)
        # log-mel values sit roughly in [-14, 4]; recentre before projecting
        stats = np.concatenate([(f.mean(axis=1) + 5.0) / 4.0, f.std(axis=1) / 2.0], axis=1)
        return (np.tanh(stats @ self.w1 + self.b1) @ self.w2).astype(np.float32)


class FileTeacher(TeacherOracle):
    """Precomputed teacher embeddings looked up by segment key."""

    def __init__(self, path):
        keys, vecs = read_embeddings(path)
        self.dim = vecs.shape[1]
        self._rows = {int(k): i for i, k in enumerate(keys)}
        self._vecs = vecs

    def embed(self, features, keys):
        try:
            rows = [self._rows[int(k)] for k in keys]
        except KeyError as exc:
            raise DistillError(f"teacher file has no embedding for segment key {exc.args[0]}") from None
        return self._vecs[rows]


class GraphTeacher(TeacherOracle):
    """Frozen copy of a student graph plus head.

    It replays the student's training-mode forward (batch statistics), so
    its targets depend on the batch it sees rather than on single segments.
    """

    per_segment = False

    def __init__(self, g: G.LayerGraph, head: "RegressorHead"):
        self.graph = g.copy()
        self.head = head.copy()
        self.dim = head.n_out

    def embed(self, features, keys=None):
        emb, _ = G.forward(self.graph, features, training=True)
        return self.head.forward(emb)[0]


# ------------------------------------------------------------------ head

class RegressorHead:
    """Dense projection from the student embedding to the teacher space."""

    def __init__(self, n_in, n_out=TEACHER_DIM, binary=False, seed=0):
        self.layer = G.Dense("regressor", ["embedding"], n_in, n_out, binary,
                             rng=np.random.default_rng(seed))
        self.n_in, self.n_out, self.binary = n_in, n_out, binary

    @property
    def params(self):
        return {f"head/{k}": v for k, v in self.layer.params.items()}

    def forward(self, emb):
        return self.layer.forward([emb], True)

    def backward(self, dy, cache):
        dxs, grads = self.layer.backward(dy, cache)
        return dxs[0], {f"head/{k}": v for k, v in grads.items()}

    def copy(self):
        h = RegressorHead(self.n_in, self.n_out, self.binary)
        h.layer.params = {k: v.copy() for k, v in self.layer.params.items()}
        return h

    @classmethod
    def identity(cls, dim):
        h = cls(dim, dim)
        h.layer.params["kernel"] = np.eye(dim, dtype=np.float32)
        return h


# -------------------------------------------------------------- training

@dataclass
class DistillConfig:
    batch_size: int = 512
    learning_rate: float = 1e-3
    steps: int = 234_000
    seed: int = 42
    clip_latent: bool = True
    log_every: int = 100
    checkpoint_dir: str | None = None
    segment_seconds: float = 1.0

    def __post_init__(self):
        if self.batch_size < 1 or self.steps < 0 or self.learning_rate < 0 or self.log_every < 1:
            raise ValueError("need batch_size >= 1, steps >= 0, learning_rate >= 0, log_every >= 1")
        if self.segment_seconds != 1.0:
            raise ValueError("the model input is fixed to one-second segments")

    @classmethod
    def desk(cls, **kw):
        """Single-core preset: batch 32 for 2000 steps."""
        return replace(cls(batch_size=32, steps=2000), **kw)


@dataclass
class DistillResult:
    losses: list = field(default_factory=list)
    steps: int = 0


def batch_stream(n, batch, rng):
    """Indices in consecutive seeded permutations: each block of ``n`` draws
    aligned to an epoch boundary contains every index exactly once."""
    perm, pos = rng.permutation(n), 0
    while True:
        out = []
        while len(out) < batch:
            take = min(batch - len(out), n - pos)
            out.extend(perm[pos:pos + take])
            pos += take
            if pos == n:
                perm, pos = rng.permutation(n), 0
        yield np.asarray(out)


def segment_features(index: SegmentIndex, loader=load_audio):
    """Log-mel model inputs and keys for every indexed segment."""
    feats = np.empty((len(index), 98, 64), np.float32)
    keys = np.empty(len(index), np.uint64)
    cache = {}
    for i, (ci, start) in enumerate(index.segments):
        if ci not in cache:
            cache.clear()
            cache[ci] = loader(index.manifest.resolve(index.manifest.clips[ci])).samples
        feats[i] = model_input(cut_segment(cache[ci], start))
        keys[i] = segment_key(index.manifest.clips[ci].path, start)
    return feats, keys


def train_distill(student: G.LayerGraph, head: RegressorHead, teacher: TeacherOracle,
                  features, keys, cfg: DistillConfig, on_log=None) -> DistillResult:
    """Regress ``head(student(x))`` onto teacher embeddings with Adam.

    ``student`` and ``head`` are updated in place.
    """
    features = np.asarray(features, dtype=np.float32)
    n = features.shape[0]
    if n == 0:
        raise DistillError("no segments to train on")
    if head.n_in != student.embedding_dim or head.n_out != teacher.dim:
        raise DistillError(f"head {head.n_in}->{head.n_out} does not connect student "
                           f"({student.embedding_dim}) to teacher ({teacher.dim})")
    targets = teacher.embed(features, keys) if teacher.per_segment else None
    rng = np.random.default_rng(cfg.seed)
    stream = batch_stream(n, cfg.batch_size, rng)
    params = dict(student.trainable_params(), **head.params)
    latent = [a for _, a, b, t in student.parameters() if b and t]
    latent += [head.layer.params["kernel"]] if head.binary else []
    state = ops.AdamState()
    result = DistillResult()
    for step in range(cfg.steps):
        idx = next(stream)
        x = features[idx]
        t = targets[idx] if targets is not None else teacher.embed(x, keys[idx])
        emb, tape = G.forward(student, x, training=True)
        pred, hcache = head.forward(emb)
        loss = distill_loss(pred, t)
        if not np.isfinite(loss):
            ckpt = None
            if cfg.checkpoint_dir:
                ckpt = Path(cfg.checkpoint_dir) / f"nonfinite-step{step}.bril"
                modelio.save(student, ckpt)
            raise NonFiniteLossError(step, ckpt)
        d_emb, grads = head.backward(distill_loss_grad(pred, t), hcache)
        grads.update(G.backward(student, tape, d_emb))
        ops.adam_step(params, grads, state, cfg.learning_rate)
        if cfg.clip_latent:
            for a in latent:
                np.clip(a, -1.0, 1.0, out=a)
        student.mark_updated()
        result.losses.append(loss)
        result.steps = step + 1
        if on_log is not None and (step % cfg.log_every == 0 or step == cfg.steps - 1):
            on_log(step, loss)
    return result


def distill_from_index(student, head, teacher, index: SegmentIndex, cfg: DistillConfig,
                       on_log=None) -> DistillResult:
    """Decode every indexed segment, then run :func:`train_distill`."""
    features, keys = segment_features(index)
    return train_distill(student, head, teacher, features, keys, cfg, on_log)


def export_student(student: G.LayerGraph, path) -> int:
    """Persist the student alone; the regressor head is never part of it."""
    return modelio.save(student, path)
