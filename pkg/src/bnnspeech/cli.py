"""Command-line entry point: ``bnnspeech <command> [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import struct
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import architectures, bench, data, distill, modelio, probe
from . import graph as G
from .frontend import UnsupportedRateError, WavFormatError, load_audio, log_mel, model_input

log = logging.getLogger("bnnspeech")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_MODEL = 5


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str
    seed: int
    flags: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)

    @classmethod
    def from_args(cls, args):
        flags, paths = {}, {}
        for k, v in sorted(vars(args).items()):
            if k in ("func", "command", "config"):
                continue
            (paths if isinstance(v, str) and k in _PATH_FLAGS else flags)[k] = v
        return cls(args.command, args.seed, flags, paths)

    def save(self, out_path):
        p = Path(str(out_path) + ".run.json")
        p.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return p


_PATH_FLAGS = {"wav", "out", "manifest", "model", "loss_csv", "predictions", "plot", "teacher"}


# ------------------------------------------------------------ spectrogram

def write_spectrogram(path, spec: np.ndarray):
    spec = np.ascontiguousarray(spec, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<QQ", *spec.shape))
        fh.write(spec.tobytes())


def read_spectrogram(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    rows, cols = struct.unpack_from("<QQ", buf)
    return np.frombuffer(buf, dtype="<f4", offset=16).reshape(rows, cols)


# --------------------------------------------------------------- commands

def _emit(obj):
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_frontend(args):
    spec = log_mel(load_audio(args.wav))
    write_spectrogram(args.out, spec)
    log.info("wrote %d x %d log-mel frames to %s", *spec.shape, args.out)


def cmd_synth(args):
    if args.kind == "task":
        path = data.make_synthetic_task(args.out, n_clips=args.clips, seed=args.seed)
    else:
        path = data.make_unlabeled_corpus(args.out, n_clips=args.clips, seed=args.seed)
    log.info("wrote manifest %s", path)
    print(path)


def resolve_teacher(spec: str):
    kind, _, arg = spec.partition(":")
    if kind == "synthetic":
        try:
            return distill.SyntheticTeacher(seed=int(arg or 0))
        except ValueError:
            raise ConfigError(f"bad synthetic teacher seed {arg!r}") from None
    if kind == "file":
        return distill.FileTeacher(arg)
    raise ConfigError(f"teacher must be file:PATH or synthetic:SEED, got {spec!r}")


def cmd_distill(args):
    if args.steps < 0 or args.batch < 1 or args.lr < 0:
        raise ConfigError("need steps >= 0, batch >= 1 and lr >= 0")
    teacher = resolve_teacher(args.teacher)
    student = architectures.build(args.arch, seed=args.seed)
    head = distill.RegressorHead(student.embedding_dim, teacher.dim, binary=args.binary_head,
                                 seed=args.seed)
    index = data.build_segment_index(data.read_manifest(args.manifest))
    cfg = distill.DistillConfig(batch_size=args.batch, learning_rate=args.lr, steps=args.steps,
                                seed=args.seed, log_every=args.log_every,
                                checkpoint_dir=str(Path(args.out).parent))
    if args.steps:
        feats, keys = distill.segment_features(index)
        result = distill.train_distill(student, head, teacher, feats, keys, cfg,
                                       on_log=lambda s, l: log.info("step %d loss %.6g", s, l))
        losses = result.losses
    else:
        losses = []
    distill.export_student(student, args.out)
    loss_csv = args.loss_csv or str(args.out) + ".loss.csv"
    with open(loss_csv, "w", encoding="utf-8") as fh:
        fh.write("step,loss\n")
        fh.writelines(f"{i},{v!r}\n" for i, v in enumerate(losses))
    _emit({"model": str(args.out), "loss_csv": loss_csv, "steps": len(losses),
           "segments": len(index), "skipped_clips": len(index.skipped),
           "final_loss": losses[-1] if losses else None})


def cmd_embed(args):
    g = modelio.load(args.model)
    index = data.build_segment_index(data.read_manifest(args.manifest))
    feats, keys = distill.segment_features(index)
    emb = probe.encode(g, feats) if len(feats) else np.zeros((0, g.embedding_dim), np.float32)
    distill.write_embeddings(args.out, keys, emb)
    _emit({"embeddings": str(args.out), "count": int(len(keys)), "dim": int(g.embedding_dim)})


def cmd_probe(args):
    g = modelio.load(args.model)
    m = data.read_manifest(args.manifest)
    train, test = m.split("train"), m.split("test")
    cfg = probe.ProbeConfig.for_dataset(len(train), learning_rate=args.lr, epochs=args.epochs,
                                        seed=args.seed)
    if args.batch:
        cfg.batch_size = args.batch
    p = probe.train_probe(g, train, cfg)
    rows = probe.evaluate(g, p, test)
    acc = probe.accuracy(rows)
    if args.predictions:
        probe.write_predictions(args.predictions, rows, p.classes)
    log.info("probe accuracy %.4f on %d test clips", acc, len(rows))
    _emit({"accuracy": acc, "test_clips": len(rows), "classes": p.classes,
           "batch_size": cfg.batch_size, "epochs": cfg.epochs})


def cmd_bench(args):
    g = modelio.load(args.model)
    if args.tap:
        g = g.truncate(args.tap)
    r = bench.latency_bench(g, runs=args.runs, warmup=args.warmup, seed=args.seed)
    out = dict(r.as_dict(), samples_ms=r.samples_ms)
    if args.out:
        Path(args.out).write_text(json.dumps(out, indent=2) + "\n")
    log.info("mean %.3f ms over %d runs (%s)", r.mean_ms, r.runs, r.host)
    _emit(r.as_dict())


def cmd_sweep(args):
    g = modelio.load(args.model)
    m = data.read_manifest(args.manifest)
    train, test = m.split("train"), m.split("test")
    cfg = probe.ProbeConfig.for_dataset(len(train), epochs=args.epochs, seed=args.seed)
    rows = bench.layer_sweep(g, train, test, cfg, runs=args.runs, warmup=args.warmup)
    bench.write_sweep_csv(args.out, rows)
    if args.plot:
        bench.plot_sweep(args.plot, rows)
    _emit({"rows": len(rows), "failed": [r.layer_name for r in rows if r.error], "csv": str(args.out)})


def cmd_size(args):
    _emit(modelio.size_report(modelio.load(args.model)).as_dict())


def cmd_inspect(args):
    g = modelio.load(args.model)
    for name, kind in g.enumerate_layers():
        layer = g.layer(name)
        b, f = layer.param_counts()
        print(f"{name}\t{kind}\t{'x'.join(map(str, g.shapes[name]))}\t{b}\t{f}")


# ----------------------------------------------------------------- parser

def build_parser():
    p = argparse.ArgumentParser(prog="bnnspeech", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def cmd(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=func)
        sp.add_argument("--seed", type=int, default=42)
        sp.add_argument("--config", action="append", default=[], metavar="KEY=VALUE",
                        help="override any flag, e.g. --config steps=100")
        return sp

    sp = cmd("frontend", cmd_frontend, "WAV to log-mel spectrogram file")
    sp.add_argument("--wav", required=True)
    sp.add_argument("--out", required=True)

    sp = cmd("synth", cmd_synth, "write a synthetic labeled task or unlabeled corpus")
    sp.add_argument("--kind", choices=("task", "corpus"), default="task")
    sp.add_argument("--clips", type=int, default=150)
    sp.add_argument("--out", required=True)

    sp = cmd("distill", cmd_distill, "distill a binary student from a teacher")
    sp.add_argument("--arch", choices=sorted(architectures.ARCHS), required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--teacher", required=True, help="file:PATH or synthetic:SEED")
    sp.add_argument("--steps", type=int, default=2000)
    sp.add_argument("--batch", type=int, default=32)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--binary-head", action="store_true")
    sp.add_argument("--log-every", type=int, default=100)
    sp.add_argument("--loss-csv")
    sp.add_argument("--out", required=True)

    sp = cmd("embed", cmd_embed, "embed every one-second segment of a manifest")
    sp.add_argument("--model", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)

    sp = cmd("probe", cmd_probe, "train and evaluate a linear probe")
    sp.add_argument("--model", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--epochs", type=int, default=100)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--batch", type=int, default=0, help="0 picks 32 or 64 by dataset size")
    sp.add_argument("--predictions")
    sp.add_argument("--out")

    sp = cmd("bench", cmd_bench, "single-thread latency benchmark")
    sp.add_argument("--model", required=True)
    sp.add_argument("--tap")
    sp.add_argument("--runs", type=int, default=150)
    sp.add_argument("--warmup", type=int, default=10)
    sp.add_argument("--out")

    sp = cmd("sweep", cmd_sweep, "probe accuracy and latency per intermediate layer")
    sp.add_argument("--model", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--epochs", type=int, default=100)
    sp.add_argument("--runs", type=int, default=150)
    sp.add_argument("--warmup", type=int, default=10)
    sp.add_argument("--plot")
    sp.add_argument("--out", required=True)

    sp = cmd("size", cmd_size, "parameter counts and model sizes")
    sp.add_argument("--model", required=True)

    sp = cmd("inspect", cmd_inspect, "list layers: name, kind, output shape, binary, float params")
    sp.add_argument("--model", required=True)
    return p


def apply_overrides(args):
    for item in args.config:
        key, sep, raw = item.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or not hasattr(args, key) or key in ("func", "command", "config"):
            raise ConfigError(f"unknown override {item!r}")
        current = getattr(args, key)
        try:
            if isinstance(current, bool):
                value = raw.lower() in ("1", "true", "yes", "on")
            elif isinstance(current, (int, float)):
                value = type(current)(raw)
            else:
                value = raw
        except ValueError:
            raise ConfigError(f"bad value for {key}: {raw!r}") from None
        setattr(args, key, value)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        apply_overrides(args)
        if getattr(args, "out", None):
            RunConfig.from_args(args).save(args.out)
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except distill.NonFiniteLossError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except modelio.ModelFormatError as exc:
        print(f"model file error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except (OSError, WavFormatError, UnsupportedRateError, data.ManifestError,
            distill.DistillError, probe.ProbeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
