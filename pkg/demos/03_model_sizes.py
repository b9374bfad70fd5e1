"""Parameter counts, sizes and latency for the three student graphs.

Run: python3 demos/03_model_sizes.py
"""

from bnnspeech import architectures as A
from bnnspeech import bench, modelio

print(f"{'model':<12} {'embed':>5} {'params':>10} {'binary':>10} {'float':>8} "
      f"{'MiB (1b/32b)':>13} {'MiB fp32':>9} {'ms':>6}")
for arch in ("densenet28", "meliusnet22", "tiny"):
    g = A.build(arch)
    r = modelio.size_report(g)
    lat = bench.latency_bench(g, runs=30, warmup=5)
    print(f"{arch:<12} {g.embedding_dim:>5} {r.param_count_total:>10,} {r.param_count_binary:>10,} "
          f"{r.param_count_float:>8,} {r.quantized_weights_mb:>13.3f} {r.float_size_mb:>9.2f} "
          f"{lat.mean_ms:>6.2f}")

# The tiny model is DenseNet-28 cut at a named batch-norm layer plus pooling.
full = A.build("densenet28")
print("\ntap:", A.DEFAULT_TAP, "->", full.shapes[A.DEFAULT_TAP])
print("eligible taps:", len(A.eligible_taps(full)))
