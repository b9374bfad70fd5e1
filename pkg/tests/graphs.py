"""Small randomized graphs for round-trip and equivalence tests."""

import numpy as np

from bnnspeech import graph as G
from bnnspeech.ops import ConvSpec


def random_graph(seed, input_shape=(12, 10, 1)):
    rng = np.random.default_rng(seed)
    g = G.LayerGraph(f"rand{seed}", input_shape, seed)
    c = int(rng.integers(2, 9))
    x = g.add(G.Conv2D(g.next_name("conv2d"), [G.INPUT], ConvSpec(3, 3, 1, c), rng))
    for _ in range(int(rng.integers(2, 6))):
        x = g.add(G.BatchNorm(g.next_name("batch-normalization"), [x], c))
        # perturb buffers so round trips exercise them
        layer = g.layer(x)
        layer.params["moving_mean"][:] = rng.standard_normal(c)
        layer.params["moving_variance"][:] = rng.uniform(0.5, 2, c)
        k = int(rng.integers(1, 4))
        out = int(rng.integers(1, 70))
        y = g.add(G.BinaryConv2D(g.next_name("binary-conv2d"), [x], ConvSpec(k, k, c, out), rng))
        if rng.random() < 0.5:
            x, c = g.add(G.Concatenate(g.next_name("concatenate"), [x, y])), c + out
        else:
            x, c = y, out
        if rng.random() < 0.3 and g.shapes[x][0] > 2:
            x = g.add(G.MaxPool2D(g.next_name("max-pool"), [x], 2, 2))
    x = g.add(G.GlobalMaxPool(g.next_name("global-max-pool"), [x]))
    if rng.random() < 0.5:
        g.add(G.Dense(g.next_name("dense"), [x], c, int(rng.integers(2, 9)), bool(rng.random() < 0.5), rng))
    return g


def small_encoder(seed=0):
    """A cheap 98x64 encoder with a real stem and two binary layers."""
    from bnnspeech.ops import ConvSpec as CS
    g = G.LayerGraph("small", (98, 64, 1), seed)
    rng = np.random.default_rng(seed)
    x = g.add(G.Conv2D("conv2d-1", [G.INPUT], CS(5, 5, 1, 8, 4), rng))
    x = g.add(G.BatchNorm("batch-normalization-1", [x], 8))
    g.layer(x).params["moving_mean"][:] = -40.0
    g.layer(x).params["moving_variance"][:] = 400.0
    x = g.add(G.BinaryConv2D("binary-conv2d-1", [x], CS(3, 3, 8, 16, 2), rng))
    x = g.add(G.BatchNorm("batch-normalization-2", [x], 16))
    y = g.add(G.BinaryConv2D("binary-conv2d-2", [x], CS(3, 3, 16, 16, 1), rng))
    x = g.add(G.Concatenate("concatenate-1", [x, y]))
    x = g.add(G.BatchNorm("batch-normalization-3", [x], 32))
    g.add(G.GlobalMaxPool("global-max-pool-1", [x]))
    return g
