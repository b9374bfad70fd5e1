"""Single-thread latency measurement and per-layer accuracy/latency sweeps."""

from __future__ import annotations

import csv
import logging
import platform
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_info, threadpool_limits

from . import graph as G
from .architectures import eligible_taps
from .data import Manifest
from .frontend import model_input
from .data import clip_segments
from .probe import (ProbeConfig, ProbeError, ProbeTrainer, load_clips, random_segments,
                    segment_rng, _labels)

log = logging.getLogger(__name__)


def host_description() -> str:
    return f"{platform.machine()} {platform.processor() or 'cpu'} / {platform.system()} " \
           f"{platform.release()} / python {platform.python_version()} / numpy {np.__version__}"


def blas_threads() -> list:
    return [int(i.get("num_threads", 1)) for i in threadpool_info()]


@dataclass
class LatencyResult:
    mean_ms: float
    std_ms: float
    min_ms: float
    max_ms: float
    runs: int
    warmup_runs: int
    threads: int
    host: str
    samples_ms: list = field(repr=False, default_factory=list)

    def as_dict(self):
        return {k: getattr(self, k) for k in
                ("mean_ms", "std_ms", "min_ms", "max_ms", "runs", "warmup_runs", "threads", "host")}


def latency_bench(g: G.LayerGraph, runs=150, warmup=10, seed=0) -> LatencyResult:
    """Time single-input inference with every BLAS pool limited to one thread."""
    if runs < 1 or warmup < 0:
        raise ValueError("need runs >= 1 and warmup >= 0")
    x = np.random.default_rng(seed).standard_normal(g.input_shape[:2]).astype(np.float32)
    with threadpool_limits(limits=1):
        threads = max(blas_threads(), default=1)
        if threads != 1:
            raise RuntimeError(f"could not restrict BLAS to one thread (saw {threads})")
        for _ in range(warmup):
            G.forward(g, x)
        times = np.empty(runs)
        for i in range(runs):
            t0 = time.perf_counter_ns()
            G.forward(g, x)
            times[i] = (time.perf_counter_ns() - t0) / 1e6
    return LatencyResult(float(times.mean()), float(times.std()), float(times.min()),
                         float(times.max()), runs, warmup, threads, host_description(),
                         times.tolist())


# ----------------------------------------------------------------- sweep

SWEEP_COLUMNS = ["layer_name", "embedding_dim", "accuracy", "latency_ms", "param_count"]


@dataclass
class SweepRow:
    layer_name: str
    embedding_dim: int
    accuracy: float | None
    latency_ms: float | None
    param_count: int
    error: str | None = None


def layer_sweep(g: G.LayerGraph, train: Manifest, test: Manifest, cfg: ProbeConfig | None = None,
                taps=None, runs=150, warmup=10) -> list:
    """Probe accuracy and latency for each candidate tap of ``g``.

    Segment draws match :func:`probe.train_probe`, so the tap feeding the
    final pooling reproduces the full model's probe. Failures are recorded
    per tap instead of aborting the sweep.
    """
    if len(train) == 0 or len(test) == 0:
        raise ProbeError("sweep needs non-empty train and test splits")
    cfg = cfg or ProbeConfig.for_dataset(len(train))
    taps = list(taps) if taps is not None else eligible_taps(g)
    classes = train.labels
    y = _labels(train, classes)
    train_clips, test_clips = load_clips(train), load_clips(test)

    trainers = {t: ProbeTrainer(y, classes, g.shapes[t][-1], cfg) for t in taps}
    rng = segment_rng(cfg)
    for _ in range(cfg.epochs):
        emb = _encode_taps(g, random_segments(train_clips, rng), taps)
        for t in taps:
            trainers[t].epoch(emb[t])

    # clip-level evaluation: mean of segment logits per tap
    seg_feats, owner = [], []
    for ci, s in enumerate(test_clips):
        for seg in clip_segments(s):
            seg_feats.append(model_input(seg))
            owner.append(ci)
    test_emb = _encode_taps(g, np.stack(seg_feats), taps)
    owner = np.asarray(owner)
    truth = np.array([c.label for c in test])

    rows = []
    for t in taps:
        try:
            logits = trainers[t].probe.logits(test_emb[t])
            mean = np.stack([logits[owner == ci].mean(axis=0) for ci in range(len(test_clips))])
            acc = float(np.mean(np.array(classes)[np.argmax(mean, axis=1)] == truth))
            sub = g.truncate(t)
            lat = latency_bench(sub, runs=runs, warmup=warmup).mean_ms
            rows.append(SweepRow(t, int(g.shapes[t][-1]), acc, lat, sub.param_counts()[0]))
        except Exception as exc:  # keep sweeping past a broken tap
            log.warning("tap %s failed: %s", t, exc)
            rows.append(SweepRow(t, int(g.shapes[t][-1]), None, None, 0, str(exc)))
    return rows


def _encode_taps(g, feats, taps, batch=64):
    parts = [G.forward_taps(g, feats[s:s + batch], taps) for s in range(0, len(feats), batch)]
    return {t: np.concatenate([p[t] for p in parts]) for t in taps}


def write_sweep_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS + ["error"])
        for r in rows:
            w.writerow([r.layer_name, r.embedding_dim,
                        "" if r.accuracy is None else f"{r.accuracy:.6f}",
                        "" if r.latency_ms is None else f"{r.latency_ms:.4f}",
                        r.param_count, r.error or ""])


def plot_sweep(path, rows):
    """Accuracy and latency against tap depth, written as SVG."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ok = [r for r in rows if r.error is None]
    xs = np.arange(len(ok))
    fig, ax = plt.subplots(figsize=(max(6, len(ok) * 0.35), 4))
    ax.plot(xs, [r.accuracy for r in ok], "o-", color="tab:blue")
    ax.set_ylabel("probe accuracy", color="tab:blue")
    ax.set_xticks(xs, [r.layer_name for r in ok], rotation=90, fontsize=7)
    ax2 = ax.twinx()
    ax2.plot(xs, [r.latency_ms for r in ok], "s--", color="tab:red")
    ax2.set_ylabel("latency (ms)", color="tab:red")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
