"""Forward/backward primitives for binary and real-valued layers.

Activations are NHWC float32 arrays. Convolution kernels are stored HWIO,
``(kernel_h, kernel_w, in_ch, out_ch)``, so an im2col row ``(kh, kw, c)``
multiplies a reshaped kernel directly and keeps channels innermost for bit
packing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import BitTensor, ShapeError, pack, pack_bits, xnor_matmul

BN_MOMENTUM = 0.9
BN_EPS = 1e-5
# value substituted for out-of-bounds pixels of a binary convolution: sign(0)
BINARY_PAD = 1.0


@dataclass(frozen=True)
class ConvSpec:
    kernel_h: int
    kernel_w: int
    in_ch: int
    out_ch: int
    stride: int = 1
    padding: str = "same"
    binary: bool = False

    def __post_init__(self):
        if min(self.kernel_h, self.kernel_w) < 1 or min(self.in_ch, self.out_ch) < 1:
            raise ValueError("kernel dims and channels must be >= 1")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.padding not in ("same", "valid"):
            raise ValueError(f"padding must be 'same' or 'valid', not {self.padding!r}")

    @property
    def kernel_shape(self):
        return (self.kernel_h, self.kernel_w, self.in_ch, self.out_ch)

    @property
    def n_weights(self) -> int:
        return self.kernel_h * self.kernel_w * self.in_ch * self.out_ch


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if np.any(np.asarray(self.running_var) < 0):
            raise ValueError("running_var must be non-negative")

    @classmethod
    def identity(cls, channels: int):
        return cls(np.ones(channels, np.float32), np.zeros(channels, np.float32),
                   np.zeros(channels, np.float32), np.ones(channels, np.float32))


@dataclass
class GradTape:
    """Per-layer caches recorded by a training-mode forward pass."""

    caches: dict = field(default_factory=dict)
    shapes: dict = field(default_factory=dict)
    order: list = field(default_factory=list)

    def record(self, name, output, cache):
        self.caches[name] = cache
        self.shapes[name] = output.shape
        self.order.append(name)


# --------------------------------------------------------------------- sign

def sign(x):
    """Sign with sign(0) = +1."""
    x = np.asarray(x)
    out = (x >= 0).astype(np.float32)
    out *= 2.0
    out -= 1.0
    return out


sign_forward = sign


def sign_backward(upstream, x):
    """Clipped straight-through estimator: pass where |x| <= 1."""
    return (upstream * (np.abs(x) <= 1.0)).astype(np.float32, copy=False)


# ------------------------------------------------------------- convolution

def _pad_amounts(size, k, s, padding):
    if padding == "valid":
        if size < k:
            raise ShapeError(f"input extent {size} smaller than kernel {k}")
        return (size - k) // s + 1, 0, 0
    out = -(-size // s)
    total = max((out - 1) * s + k - size, 0)
    return out, total // 2, total - total // 2


def conv_output_hw(h, w, spec: ConvSpec):
    ho, _, _ = _pad_amounts(h, spec.kernel_h, spec.stride, spec.padding)
    wo, _, _ = _pad_amounts(w, spec.kernel_w, spec.stride, spec.padding)
    return ho, wo


def _geometry(x, kh, kw, s, padding):
    _, h, w, _ = x.shape
    ho, pt, pb = _pad_amounts(h, kh, s, padding)
    wo, pl, pr = _pad_amounts(w, kw, s, padding)
    return ho, wo, ((0, 0), (pt, pb), (pl, pr), (0, 0))


def _windows(xp, kh, kw, s, ho, wo):
    """Strided view ``(N, Ho, Wo, kh, kw, C)`` over a padded input."""
    n, hp, wp, c = xp.shape
    st = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, shape=(n, ho, wo, kh, kw, c),
        strides=(st[0], st[1] * s, st[2] * s, st[1], st[2], st[3]),
        writeable=False)


def im2col(x, kh, kw, stride, padding, pad_value=0.0):
    """Lower an NHWC batch to a ``(N*Ho*Wo, kh*kw*C)`` patch matrix."""
    ho, wo, pads = _geometry(x, kh, kw, stride, padding)
    if any(p != (0, 0) for p in pads):
        n, h, w, c = x.shape
        xp = np.full((n, h + sum(pads[1]), w + sum(pads[2]), c), pad_value, dtype=np.float32)
        xp[:, pads[1][0]:pads[1][0] + h, pads[2][0]:pads[2][0] + w] = x
    else:
        xp = np.ascontiguousarray(x)
    cols = _windows(xp, kh, kw, stride, ho, wo)
    return cols.reshape(x.shape[0] * ho * wo, kh * kw * x.shape[3]), (ho, wo, pads)


def col2im(dcols, x_shape, kh, kw, stride, geom):
    """Scatter-add patch gradients back onto the (unpadded) input."""
    ho, wo, pads = geom
    n, h, w, c = x_shape
    hp = h + pads[1][0] + pads[1][1]
    wp = w + pads[2][0] + pads[2][1]
    dxp = np.zeros((n, hp, wp, c), dtype=np.float32)
    d = dcols.reshape(n, ho, wo, kh, kw, c)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += d[:, :, :, i, j, :]
    return dxp[:, pads[1][0]:pads[1][0] + h, pads[2][0]:pads[2][0] + w, :]


def _check_conv(x, w, spec):
    if x.ndim != 4:
        raise ShapeError(f"expected NHWC input, got shape {x.shape}")
    if x.shape[3] != spec.in_ch:
        raise ShapeError(f"input has {x.shape[3]} channels, spec expects {spec.in_ch}")
    if w is not None and tuple(w.shape) != spec.kernel_shape:
        raise ShapeError(f"kernel shape {w.shape} != {spec.kernel_shape}")


def _batched(x, ndim):
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == ndim - 1:
        return x[None], True
    return x, False


def conv2d_forward(x, w, spec: ConvSpec, pad_value=0.0):
    """Cross-correlation of an NHWC batch with an HWIO kernel.

    Returns ``(y, cache)``; the cache feeds :func:`conv2d_backward`.
    """
    _check_conv(x, w, spec)
    cols, geom = im2col(x, spec.kernel_h, spec.kernel_w, spec.stride, spec.padding, pad_value)
    w2 = w.reshape(-1, spec.out_ch)
    y = cols @ w2
    ho, wo, _ = geom
    return y.reshape(x.shape[0], ho, wo, spec.out_ch), (cols, w2, x.shape, geom)


def conv2d_backward(dy, cache, spec: ConvSpec, need_dx=True):
    cols, w2, x_shape, geom = cache
    dy2 = dy.reshape(-1, spec.out_ch)
    dw = (cols.T @ dy2).reshape(spec.kernel_shape)
    dx = None
    if need_dx:
        dx = col2im(dy2 @ w2.T, x_shape, spec.kernel_h, spec.kernel_w, spec.stride, geom)
    return dx, dw


def real_conv2d(x, w, spec: ConvSpec):
    """Real-valued convolution of one ``H x W x C`` image or an NHWC batch."""
    if spec.binary:
        raise ValueError("real_conv2d called with a binary ConvSpec")
    xb, single = _batched(x, 4)
    y, _ = conv2d_forward(xb, np.asarray(w, np.float32), spec)
    return y[0] if single else y


def binary_conv2d_train_forward(x, w_latent, spec: ConvSpec):
    """Float-GEMM form of a binary convolution, with STE caches.

    Inputs and latent weights are binarized by sign; out-of-bounds pixels
    take the value +1. Exactly equal to :func:`binary_conv2d`.
    """
    xs = sign(x)
    ws = sign(w_latent)
    y, cache = conv2d_forward(xs, ws, spec, pad_value=BINARY_PAD)
    return y, (cache, x, w_latent)


def binary_conv2d_train_backward(dy, cache, spec: ConvSpec, need_dx=True):
    conv_cache, x, w_latent = cache
    dxs, dws = conv2d_backward(dy, conv_cache, spec, need_dx)
    dx = sign_backward(dxs, x) if need_dx else None
    return dx, sign_backward(dws, w_latent)


def pack_kernel(w) -> BitTensor:
    """Pack an HWIO kernel as ``(out, kh, kw, in)`` bits, channels innermost."""
    w = np.asarray(w, dtype=np.float32)
    return pack(np.transpose(w, (3, 0, 1, 2)))


def binary_conv2d(x, w: BitTensor, spec: ConvSpec):
    """XNOR-popcount convolution of +/-1 activations with packed weights.

    ``x`` is ``H x W x Cin`` (or NHWC) with values in {-1, +1}; ``w`` is a
    BitTensor of shape ``(out, kh, kw, in)``. Each pixel's channel vector is
    packed once; im2col then gathers whole words. Out-of-bounds pixels are +1.
    """
    if not spec.binary:
        raise ValueError("binary_conv2d needs spec.binary == True")
    xb, single = _batched(x, 4)
    _check_conv(xb, None, spec)
    if w.shape != (spec.out_ch, spec.kernel_h, spec.kernel_w, spec.in_ch):
        raise ShapeError(f"packed kernel shape {w.shape} does not match {spec}")
    if __debug__ and not np.all(np.abs(xb) == 1.0):
        raise ValueError("binary_conv2d input must contain only -1/+1")
    pixel_words = pack_bits(xb >= 0)
    n, h, wd, cw = pixel_words.shape
    ho, wo, pads = _geometry(xb, spec.kernel_h, spec.kernel_w, spec.stride, spec.padding)
    if any(p != (0, 0) for p in pads):
        pad_pixel = pack_bits(np.ones(spec.in_ch, dtype=bool))
        padded = np.empty((n, h + sum(pads[1]), wd + sum(pads[2]), cw), dtype="<u8")
        padded[...] = pad_pixel
        padded[:, pads[1][0]:pads[1][0] + h, pads[2][0]:pads[2][0] + wd] = pixel_words
        pixel_words = padded
    cols = _windows(np.ascontiguousarray(pixel_words), spec.kernel_h, spec.kernel_w,
                    spec.stride, ho, wo)
    cols = cols.reshape(n * ho * wo, -1)
    kernel_words = w.words.reshape(spec.out_ch, -1)
    n_bits = spec.kernel_h * spec.kernel_w * spec.in_ch
    y = xnor_matmul(cols, kernel_words, n_bits).astype(np.float32)
    y = y.reshape(n, ho, wo, spec.out_ch)
    return y[0] if single else y


# -------------------------------------------------------------- batch norm

def batch_norm_forward(x, p: BatchNormParams, mode="infer"):
    """Normalize over all axes but the last.

    ``mode="train"`` uses batch statistics and updates ``p``'s running
    statistics in place (momentum 0.9).
    """
    x = np.asarray(x, dtype=np.float32)
    if x.shape[-1] != p.gamma.shape[0]:
        raise ShapeError(f"{x.shape[-1]} channels vs {p.gamma.shape[0]} batch-norm params")
    if mode == "infer":
        inv = (1.0 / np.sqrt(p.running_var.astype(np.float64) + p.eps)).astype(np.float32)
        xhat = (x - p.running_mean) * inv
        return xhat * p.gamma + p.beta, ("infer", xhat, inv, p.gamma)
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'infer', not {mode!r}")
    flat = x.reshape(-1, x.shape[-1])
    mean = flat.mean(axis=0)
    centred = x - mean
    var = np.square(centred).reshape(flat.shape).mean(axis=0)
    inv = (1.0 / np.sqrt(var.astype(np.float64) + p.eps)).astype(np.float32)
    xhat = centred
    xhat *= inv
    y = xhat * p.gamma + p.beta
    p.running_mean[...] = BN_MOMENTUM * p.running_mean + (1 - BN_MOMENTUM) * mean
    p.running_var[...] = BN_MOMENTUM * p.running_var + (1 - BN_MOMENTUM) * var
    return y, ("train", xhat, inv, p.gamma)


def batch_norm_backward(dy, cache):
    """Returns ``(dx, dgamma, dbeta)``."""
    mode, xhat, inv, gamma = cache
    c = dy.shape[-1]
    dy2 = dy.reshape(-1, c)
    xhat2 = xhat.reshape(-1, c)
    dbeta = dy2.sum(axis=0)
    dgamma = np.einsum("ij,ij->j", dy2, xhat2)
    if mode == "infer":
        return (dy * (gamma * inv)).astype(np.float32), dgamma, dbeta
    m = dy2.shape[0]
    # dx = gamma*inv/m * (m*dy - sum(dy) - xhat*sum(dy*xhat))
    dx = dy - (dbeta / m)
    dx -= xhat * (dgamma / m)
    dx *= gamma * inv
    return dx.astype(np.float32, copy=False), dgamma.astype(np.float32), dbeta.astype(np.float32)


def batch_norm(x, p: BatchNormParams, mode="infer"):
    return batch_norm_forward(x, p, mode)[0]



# ----------------------------------------------------------------- pooling

def max_pool2d_forward(x, k, stride, padding="same"):
    """Windowed maximum; the cache holds each window's first argmax offset."""
    x = np.asarray(x, dtype=np.float32)
    ho, wo, pads = _geometry(x, k, k, stride, padding)
    xp = np.pad(x, pads, constant_values=-np.inf) if any(p != (0, 0) for p in pads) else x
    span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    y = xp[:, 0:span_h:stride, 0:span_w:stride].copy()
    idx = np.zeros(y.shape, dtype=np.int8 if k * k < 128 else np.int32)
    for i in range(k):
        for j in range(k):
            if i == j == 0:
                continue
            cand = np.ascontiguousarray(xp[:, i:i + span_h:stride, j:j + span_w:stride])
            better = (cand > y).view(np.int8).astype(idx.dtype, copy=False)
            np.maximum(y, cand, out=y)
            # branch-free select; strict > keeps the first maximum
            idx += better * (idx.dtype.type(i * k + j) - idx)
    return y, (idx, x.shape, k, stride, (ho, wo, pads))


def max_pool2d_backward(dy, cache):
    """Route each window's gradient to its first (row-major) maximum."""
    idx, x_shape, k, stride, (ho, wo, pads) = cache
    n, h, w, c = x_shape
    dxp = np.zeros((n, h + sum(pads[1]), w + sum(pads[2]), c), dtype=np.float32)
    for i in range(k):
        for j in range(k):
            hit = idx == i * k + j
            if hit.any():
                dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += dy * hit
    return dxp[:, pads[1][0]:pads[1][0] + h, pads[2][0]:pads[2][0] + w]


def max_pool2d(x, k, stride, padding="same"):
    xb, single = _batched(x, 4)
    y = max_pool2d_forward(xb, k, stride, padding)[0]
    return y[0] if single else y


def global_max_pool_forward(x):
    x = np.asarray(x, dtype=np.float32)
    n, h, w, c = x.shape
    flat = x.reshape(n, h * w, c)
    idx = flat.argmax(axis=1)
    return np.take_along_axis(flat, idx[:, None, :], axis=1)[:, 0, :], (idx, x.shape)


def global_max_pool_backward(dy, cache):
    idx, x_shape = cache
    n, h, w, c = x_shape
    dx = np.zeros((n, h * w, c), dtype=np.float32)
    np.put_along_axis(dx, idx[:, None, :], dy[:, None, :], axis=1)
    return dx.reshape(x_shape)


def global_max_pool(x):
    """Per-channel maximum over all spatial positions: ``H x W x C -> C``."""
    xb, single = _batched(x, 4)
    y = global_max_pool_forward(xb)[0]
    return y[0] if single else y


# ------------------------------------------------------------------ misc

def relu_forward(x):
    return np.maximum(x, 0.0), x > 0


def relu_backward(dy, mask):
    return dy * mask


# ------------------------------------------------------------------- dense

def dense_forward(x, w, b=None, binary=False):
    """``x @ w + b``. ``w`` is ``(in, out)``; binary mode uses sign(x), sign(w)."""
    x = np.asarray(x, dtype=np.float32)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"input dim {x.shape[-1]} vs weight {w.shape}")
    if binary:
        xs, ws = sign(x), sign(w)
        y = xs @ ws
        cache = (xs, ws, x, w, True)
    else:
        y = x @ w
        cache = (x, w, None, None, False)
    if b is not None:
        y = y + b
    return y.astype(np.float32), cache


def dense_backward(dy, cache):
    """Returns ``(dx, dw, db)``."""
    a, wm, x, w_latent, binary = cache
    dw = a.T @ dy if dy.ndim == 2 else np.outer(a, dy)
    dx = dy @ wm.T
    db = dy.sum(axis=0) if dy.ndim == 2 else dy
    if binary:
        dx = sign_backward(dx, x)
        dw = sign_backward(dw, w_latent)
    return dx.astype(np.float32), dw.astype(np.float32), db.astype(np.float32)


def dense(x, w, b=None, binary=False):
    """Matrix-vector product; the binary path runs through XNOR-popcount."""
    if not binary:
        return dense_forward(x, w, b)[0]
    xb, single = _batched(x, 2)
    w = np.asarray(w, dtype=np.float32)
    if xb.shape[-1] != w.shape[0]:
        raise ShapeError(f"input dim {xb.shape[-1]} vs weight {w.shape}")
    xw = pack(xb).words
    ww = pack(w.T).words
    y = xnor_matmul(xw, ww, w.shape[0]).astype(np.float32)
    if b is not None:
        y = y + b
    return y[0] if single else y


# -------------------------------------------------------------------- adam

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update of ``params`` in place.

    Parameters without a gradient entry are left untouched.
    """
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for key, g in grads.items():
        p = params[key]
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != param shape {p.shape} for {key}")
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(p)
            state.v[key] = np.zeros_like(p)
        v = state.v[key]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        if lr:
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return params, state


# --------------------------------------------------------- finite differences

def finite_difference_grad(f, x, h=1e-3):
    """Central-difference gradient of scalar ``f`` at ``x`` (float64)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g
