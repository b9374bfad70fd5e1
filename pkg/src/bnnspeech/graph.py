"""Named layer graphs with training (STE) and XNOR inference forward passes."""

from __future__ import annotations

import copy

import numpy as np

from . import ops
from .ops import BatchNormParams, ConvSpec, GradTape
from .tensor import ShapeError

INPUT = "input"


class Layer:
    kind = "layer"
    # parameter names updated by the optimizer; everything else is a buffer
    trainable: tuple = ()
    binary_params: tuple = ()

    def __init__(self, name, inputs):
        self.name = name
        self.inputs = list(inputs)
        self.params = {}

    def config(self) -> dict:
        return {}

    def out_shape(self, *shapes):
        return shapes[0]

    def forward(self, xs, training):
        raise NotImplementedError

    def backward(self, dy, cache):
        raise NotImplementedError

    def infer(self, xs):
        return self.forward(xs, False)[0]

    def invalidate(self):
        pass

    def param_counts(self):
        """``(binary, float)`` parameter counts."""
        b = sum(self.params[k].size for k in self.binary_params)
        f = sum(v.size for k, v in self.params.items() if k not in self.binary_params)
        return b, f

    def __repr__(self):
        return f"<{type(self).__name__} {self.name}>"


class Conv2D(Layer):
    kind = "conv2d"
    trainable = ("kernel",)

    def __init__(self, name, inputs, spec: ConvSpec, rng=None):
        super().__init__(name, inputs)
        self.spec = spec
        fan_in = spec.kernel_h * spec.kernel_w * spec.in_ch
        fan_out = spec.kernel_h * spec.kernel_w * spec.out_ch
        std = np.sqrt(2.0 / (fan_in + fan_out))
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["kernel"] = (rng.standard_normal(spec.kernel_shape) * std).astype(np.float32)

    def config(self):
        s = self.spec
        return {"kernel": [s.kernel_h, s.kernel_w], "in_ch": s.in_ch, "out_ch": s.out_ch,
                "stride": s.stride, "padding": s.padding}

    def out_shape(self, shape):
        h, w, c = shape
        if c != self.spec.in_ch:
            raise ShapeError(f"{self.name}: input has {c} channels, expected {self.spec.in_ch}")
        ho, wo = ops.conv_output_hw(h, w, self.spec)
        return (ho, wo, self.spec.out_ch)

    def forward(self, xs, training):
        return ops.conv2d_forward(xs[0], self.params["kernel"], self.spec)

    def backward(self, dy, cache):
        dx, dw = ops.conv2d_backward(dy, cache, self.spec, need_dx=self.inputs != [INPUT])
        return [dx], {"kernel": dw}


class BinaryConv2D(Conv2D):
    """Sign-activation, sign-weight convolution with latent real weights."""

    kind = "binary_conv2d"
    binary_params = ("kernel",)

    def __init__(self, name, inputs, spec: ConvSpec, rng=None):
        if not spec.binary:
            spec = ConvSpec(spec.kernel_h, spec.kernel_w, spec.in_ch, spec.out_ch,
                            spec.stride, spec.padding, True)
        super().__init__(name, inputs, spec, rng)
        self._packed = None

    def forward(self, xs, training):
        return ops.binary_conv2d_train_forward(xs[0], self.params["kernel"], self.spec)

    def backward(self, dy, cache):
        dx, dw = ops.binary_conv2d_train_backward(dy, cache, self.spec,
                                                  need_dx=self.inputs != [INPUT])
        return [dx], {"kernel": dw}

    def packed_kernel(self):
        if self._packed is None:
            self._packed = ops.pack_kernel(self.params["kernel"])
        return self._packed

    def infer(self, xs):
        return ops.binary_conv2d(ops.sign(xs[0]), self.packed_kernel(), self.spec)

    def invalidate(self):
        self._packed = None


class BatchNorm(Layer):
    kind = "batch_norm"
    trainable = ("gamma", "beta")

    def __init__(self, name, inputs, channels, eps=ops.BN_EPS):
        super().__init__(name, inputs)
        self.eps = eps
        p = BatchNormParams.identity(channels)
        self.params.update(gamma=p.gamma, beta=p.beta,
                           moving_mean=p.running_mean, moving_variance=p.running_var)

    @property
    def bn_params(self):
        return BatchNormParams(self.params["gamma"], self.params["beta"],
                               self.params["moving_mean"], self.params["moving_variance"],
                               self.eps)

    def config(self):
        return {"channels": int(self.params["gamma"].shape[0]), "eps": self.eps}

    def out_shape(self, shape):
        if shape[-1] != self.params["gamma"].shape[0]:
            raise ShapeError(f"{self.name}: {shape[-1]} channels vs {self.params['gamma'].shape[0]}")
        return shape

    def forward(self, xs, training):
        return ops.batch_norm_forward(xs[0], self.bn_params, "train" if training else "infer")

    def backward(self, dy, cache):
        dx, dg, db = ops.batch_norm_backward(dy, cache)
        return [dx], {"gamma": dg, "beta": db}


class ReLU(Layer):
    kind = "relu"

    def forward(self, xs, training):
        return ops.relu_forward(xs[0])

    def backward(self, dy, cache):
        return [ops.relu_backward(dy, cache)], {}


class MaxPool2D(Layer):
    kind = "max_pool"

    def __init__(self, name, inputs, k, stride, padding="same"):
        super().__init__(name, inputs)
        self.k, self.stride, self.padding = k, stride, padding

    def config(self):
        return {"pool": self.k, "stride": self.stride, "padding": self.padding}

    def out_shape(self, shape):
        h, w, c = shape
        spec = ConvSpec(self.k, self.k, c, c, self.stride, self.padding)
        return ops.conv_output_hw(h, w, spec) + (c,)

    def forward(self, xs, training):
        return ops.max_pool2d_forward(xs[0], self.k, self.stride, self.padding)

    def backward(self, dy, cache):
        return [ops.max_pool2d_backward(dy, cache)], {}


class GlobalMaxPool(Layer):
    kind = "global_max_pool"

    def out_shape(self, shape):
        return (shape[-1],)

    def forward(self, xs, training):
        return ops.global_max_pool_forward(xs[0])

    def backward(self, dy, cache):
        return [ops.global_max_pool_backward(dy, cache)], {}


class Concatenate(Layer):
    kind = "concatenate"

    def out_shape(self, *shapes):
        if len({s[:-1] for s in shapes}) != 1:
            raise ShapeError(f"{self.name}: spatial shapes differ {shapes}")
        return shapes[0][:-1] + (sum(s[-1] for s in shapes),)

    def forward(self, xs, training):
        return np.concatenate(xs, axis=-1), [x.shape[-1] for x in xs]

    def backward(self, dy, cache):
        cuts = np.cumsum(cache)[:-1]
        return np.split(dy, cuts, axis=-1), {}


class ImprovementAdd(Layer):
    """Adds a narrow residual to the trailing channels of a wider input."""

    kind = "improvement_add"

    def out_shape(self, base, update):
        if base[:-1] != update[:-1] or update[-1] > base[-1]:
            raise ShapeError(f"{self.name}: cannot add {update} onto {base}")
        return base

    def forward(self, xs, training):
        base, update = xs
        y = base.copy()
        y[..., -update.shape[-1]:] += update
        return y, update.shape[-1]

    def backward(self, dy, width):
        return [dy, dy[..., -width:]], {}


class Dense(Layer):
    kind = "dense"
    trainable = ("kernel", "bias")

    def __init__(self, name, inputs, n_in, n_out, binary=False, rng=None):
        super().__init__(name, inputs)
        self.binary = binary
        rng = rng if rng is not None else np.random.default_rng(0)
        std = np.sqrt(2.0 / (n_in + n_out))
        self.params["kernel"] = (rng.standard_normal((n_in, n_out)) * std).astype(np.float32)
        self.params["bias"] = np.zeros(n_out, np.float32)
        self.binary_params = ("kernel",) if binary else ()

    def config(self):
        k = self.params["kernel"]
        return {"in": int(k.shape[0]), "out": int(k.shape[1]), "binary": self.binary}

    def out_shape(self, shape):
        if shape != (self.params["kernel"].shape[0],):
            raise ShapeError(f"{self.name}: input {shape} vs kernel {self.params['kernel'].shape}")
        return (self.params["kernel"].shape[1],)

    def forward(self, xs, training):
        return ops.dense_forward(xs[0], self.params["kernel"], self.params["bias"], self.binary)

    def backward(self, dy, cache):
        dx, dw, db = ops.dense_backward(dy, cache)
        return [dx], {"kernel": dw, "bias": db}

    def infer(self, xs):
        return ops.dense(xs[0], self.params["kernel"], self.params["bias"], self.binary)


LAYER_TYPES = {cls.kind: cls for cls in
               (Conv2D, BinaryConv2D, BatchNorm, ReLU, MaxPool2D, GlobalMaxPool,
                Concatenate, ImprovementAdd, Dense)}


def layer_from_config(kind, name, inputs, cfg) -> Layer:
    """Rebuild an (uninitialised-weight) layer from ``Layer.config()``."""
    if kind not in LAYER_TYPES:
        raise ValueError(f"unknown layer kind {kind!r}")
    if kind in ("conv2d", "binary_conv2d"):
        kh, kw = cfg["kernel"]
        spec = ConvSpec(kh, kw, cfg["in_ch"], cfg["out_ch"], cfg["stride"], cfg["padding"],
                        kind == "binary_conv2d")
        return LAYER_TYPES[kind](name, inputs, spec)
    if kind == "batch_norm":
        return BatchNorm(name, inputs, cfg["channels"], cfg["eps"])
    if kind == "max_pool":
        return MaxPool2D(name, inputs, cfg["pool"], cfg["stride"], cfg["padding"])
    if kind == "dense":
        return Dense(name, inputs, cfg["in"], cfg["out"], cfg["binary"])
    return LAYER_TYPES[kind](name, inputs)


class LayerGraph:
    """Topologically ordered, uniquely named layers with one embedding output."""

    def __init__(self, name, input_shape, seed=0):
        self.name = name
        self.input_shape = tuple(input_shape)
        self.layers = []
        self.shapes = {INPUT: self.input_shape}
        self._index = {}
        self.output = None
        self.taps = {}
        self.rng = np.random.default_rng(seed)
        self._counters = {}

    # -- construction ---------------------------------------------------
    def next_name(self, stem):
        n = self._counters.get(stem, 0) + 1
        self._counters[stem] = n
        return f"{stem}-{n}"

    def add(self, layer: Layer) -> str:
        if layer.name in self._index or layer.name == INPUT:
            raise ValueError(f"duplicate layer name {layer.name!r}")
        for src in layer.inputs:
            if src not in self.shapes:
                raise ValueError(f"{layer.name}: unknown input {src!r}")
        self.shapes[layer.name] = tuple(layer.out_shape(*(self.shapes[s] for s in layer.inputs)))
        self._index[layer.name] = len(self.layers)
        self.layers.append(layer)
        self.output = layer.name
        return layer.name

    def set_output(self, name):
        self.layer(name)
        self.output = name

    # -- lookup ----------------------------------------------------------
    def layer(self, name) -> Layer:
        try:
            return self.layers[self._index[name]]
        except KeyError:
            raise KeyError(f"no layer named {name!r} in {self.name}") from None

    def __contains__(self, name):
        return name in self._index

    def enumerate_layers(self):
        return [(layer.name, layer.kind) for layer in self.layers]

    @property
    def embedding_dim(self) -> int:
        shape = self.shapes[self.output]
        return shape[-1]

    def ancestors(self, name):
        """Names of every layer ``name`` depends on, itself included."""
        needed = {name}
        for layer in reversed(self.layers[: self._index[name] + 1]):
            if layer.name in needed:
                needed.update(s for s in layer.inputs if s != INPUT)
        return needed

    # -- parameters ------------------------------------------------------
    def parameters(self):
        """Yield ``(key, array, is_binary, is_trainable)``."""
        for layer in self.layers:
            for pname, arr in layer.params.items():
                yield (f"{layer.name}/{pname}", arr, pname in layer.binary_params,
                       pname in layer.trainable)

    def trainable_params(self) -> dict:
        return {k: a for k, a, _, t in self.parameters() if t}

    def state_dict(self) -> dict:
        return {k: a for k, a, _, _ in self.parameters()}

    def param_counts(self):
        """``(total, binary, float)``."""
        b = f = 0
        for layer in self.layers:
            lb, lf = layer.param_counts()
            b += lb
            f += lf
        return b + f, b, f

    def mark_updated(self):
        for layer in self.layers:
            layer.invalidate()

    def copy(self) -> "LayerGraph":
        g = copy.deepcopy(self)
        g.mark_updated()
        return g

    def truncate(self, tap) -> "LayerGraph":
        """Sub-graph ending at ``tap`` plus global max pooling if spatial."""
        self.layer(tap)
        keep = self.ancestors(tap)
        g = LayerGraph(f"{self.name}@{tap}", self.input_shape)
        g._counters = dict(self._counters)
        for layer in self.layers:
            if layer.name in keep:
                g.add(copy.deepcopy(layer))
        if len(g.shapes[tap]) == 3:
            g.add(GlobalMaxPool(_unique(g, "global-max-pool"), [tap]))
        else:
            g.set_output(tap)
        g.mark_updated()
        return g


def _unique(g, stem):
    name = g.next_name(stem)
    while name in g:
        name = g.next_name(stem)
    return name


# ------------------------------------------------------------- execution

def as_batch(x, input_shape):
    """Accept ``(H, W)``, ``(H, W, C)``, ``(N, H, W)`` or NHWC input."""
    x = np.asarray(x, dtype=np.float32)
    h, w, c = input_shape
    if x.shape == (h, w):
        x = x[None, :, :, None]
    elif x.shape == (h, w, c):
        x = x[None]
    elif x.ndim == 3 and x.shape[1:] == (h, w) and c == 1:
        x = x[..., None]
    if x.ndim != 4 or x.shape[1:] != (h, w, c):
        raise ShapeError(f"input shape {x.shape} incompatible with {input_shape}")
    return x


def _pool_tap(y):
    return ops.global_max_pool_forward(y) if y.ndim == 4 else (y, None)


def forward(g: LayerGraph, x, tap=None, training=False):
    """Embedding(s) for a log-mel input or batch.

    ``training=True`` runs batch-norm on batch statistics (updating running
    statistics) and binary layers through the float STE path, and returns
    ``(embeddings, tape)``. Inference uses XNOR-popcount for binary layers.
    A single unbatched input returns a 1-D embedding.
    """
    single = np.asarray(x).ndim in (2, 3) and np.asarray(x).shape[:2] == g.input_shape[:2]
    xb = as_batch(x, g.input_shape)
    target = tap if tap is not None else g.output
    needed = g.ancestors(target)
    values = {INPUT: xb}
    tape = GradTape() if training else None
    for layer in g.layers:
        if layer.name not in needed:
            continue
        xs = [values[s] for s in layer.inputs]
        if training:
            y, cache = layer.forward(xs, True)
            tape.record(layer.name, y, cache)
        else:
            y = layer.infer(xs)
        values[layer.name] = y
        if layer.name == target:
            break
    out, pool_cache = _pool_tap(values[target])
    if training:
        tape.caches["__tap__"] = (target, pool_cache)
        return out, tape
    return out[0] if single else out


def forward_taps(g: LayerGraph, x, taps):
    """Pooled inference outputs at several layers from a single pass."""
    xb = as_batch(x, g.input_shape)
    last = max(g._index[t] for t in taps)
    values = {INPUT: xb}
    for layer in g.layers[: last + 1]:
        values[layer.name] = layer.infer([values[s] for s in layer.inputs])
    return {t: _pool_tap(values[t])[0] for t in taps}


def backward(g: LayerGraph, tape: GradTape, d_out) -> dict:
    """Gradients of trainable parameters given d(loss)/d(embedding)."""
    target, pool_cache = tape.caches["__tap__"]
    d_out = np.asarray(d_out, dtype=np.float32)
    if pool_cache is not None:
        d_out = ops.global_max_pool_backward(d_out, pool_cache)
    upstream = {target: d_out}
    grads = {}
    for name in reversed(tape.order):
        dy = upstream.pop(name, None)
        if dy is None:
            continue
        layer = g.layer(name)
        dxs, dparams = layer.backward(dy, tape.caches[name])
        for pname, gval in dparams.items():
            if pname in layer.trainable:
                grads[f"{name}/{pname}"] = gval
        for src, dx in zip(layer.inputs, dxs):
            if src == INPUT or dx is None:
                continue
            if src in upstream:
                upstream[src] = upstream[src] + dx
            else:
                upstream[src] = dx
    return grads
