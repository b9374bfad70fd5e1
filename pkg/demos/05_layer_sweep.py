"""Accuracy and latency when the classifier sits on an intermediate layer.

Run: python3 demos/05_layer_sweep.py MODEL.bril [epochs]
The model can come from `bnnspeech distill ... --out MODEL.bril`.
"""

import sys
import tempfile

from bnnspeech import bench, data, modelio
from bnnspeech.probe import ProbeConfig

model = modelio.load(sys.argv[1])
epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 100
task = data.read_manifest(data.make_synthetic_task(tempfile.mkdtemp(), seed=0))
train, test = task.split("train"), task.split("test")

rows = bench.layer_sweep(model, train, test, ProbeConfig.for_dataset(len(train), epochs=epochs),
                         runs=50, warmup=5)
for r in rows:
    acc = "failed" if r.error else f"{r.accuracy:.3f}"
    print(f"{r.layer_name:<28} dim {r.embedding_dim:>4}  acc {acc:>6}  "
          f"{r.latency_ms or 0:6.2f} ms  {r.param_count:>9,} params")
bench.write_sweep_csv("sweep.csv", rows)
bench.plot_sweep("sweep.svg", rows)
print("wrote sweep.csv and sweep.svg")
