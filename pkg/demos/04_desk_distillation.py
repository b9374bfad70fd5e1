"""Distill a tiny binary student from a synthetic teacher, then probe it.

Run: python3 demos/04_desk_distillation.py [steps]   (default 300; 2000 takes ~9 min)
"""

import sys
import tempfile
import time

import numpy as np

from bnnspeech import architectures as A
from bnnspeech import data, distill as D, probe as P

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
work = tempfile.mkdtemp()

# Unlabeled clips mixing tones, noise and chirps; cut into one-second segments.
corpus = data.read_manifest(data.make_unlabeled_corpus(f"{work}/corpus", seed=1))
index = data.build_segment_index(corpus)
features, keys = D.segment_features(index)
print(f"{len(corpus)} clips -> {len(index)} segments")

student = A.build("tiny", seed=7)
head = D.RegressorHead(student.embedding_dim, seed=7)   # discarded after training
teacher = D.SyntheticTeacher(seed=7)
cfg = D.DistillConfig.desk(steps=steps, seed=7)

t0 = time.time()
res = D.train_distill(student, head, teacher, features, keys, cfg,
                      on_log=lambda s, l: print(f"  step {s:5d}  loss {l:9.3f}"))
k = max(1, steps // 10)
print(f"loss ratio last/first decile: {np.mean(res.losses[-k:]) / np.mean(res.losses[:k]):.3f}"
      f"  ({time.time() - t0:.0f}s)")

# Freeze the student and fit a linear probe on the labeled 3-class task.
task = data.read_manifest(data.make_synthetic_task(f"{work}/task", seed=0))
train, test = task.split("train"), task.split("test")
probe = P.train_probe(student, train, P.ProbeConfig.for_dataset(len(train)))
rows = P.evaluate(student, probe, test)
print(f"probe accuracy on {len(rows)} test clips: {P.accuracy(rows):.3f}")
