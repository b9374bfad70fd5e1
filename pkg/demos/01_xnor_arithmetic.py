"""Bit-packed +/-1 arithmetic, step by step.

Run: python3 demos/01_xnor_arithmetic.py
"""

import numpy as np

from bnnspeech import ops
from bnnspeech.ops import ConvSpec
from bnnspeech.tensor import pack, unpack, xnor_popcount_dot

rng = np.random.default_rng(0)

# A +/-1 vector of 70 values needs two 64-bit words; +1 is stored as a set bit.
a = np.where(rng.random(70) < 0.5, -1.0, 1.0)
b = np.where(rng.random(70) < 0.5, -1.0, 1.0)
pa, pb = pack(a), pack(b)
print("words per row:", pa.words.shape)
print("first word, hex:", hex(int(pa.words[0])))
assert np.array_equal(unpack(pa), a)

# The dot product becomes n - 2 * popcount(a XOR b).
print("float dot:", int(a @ b), " xnor-popcount dot:", xnor_popcount_dot(pa, pb))

# A whole convolution: activations packed per pixel, kernel packed as (out, kh, kw, in).
x = np.where(rng.random((9, 9, 8)) < 0.5, -1.0, 1.0).astype(np.float32)
w = np.where(rng.random((3, 3, 8, 4)) < 0.5, -1.0, 1.0).astype(np.float32)
spec = ConvSpec(3, 3, 8, 4, stride=1, padding="same", binary=True)
y_bits = ops.binary_conv2d(x, ops.pack_kernel(w), spec)

# Same result from a float GEMM where out-of-bounds pixels read as +1.
y_float, _ = ops.conv2d_forward(x[None], w, spec, pad_value=1.0)
print("max |xnor - float|:", float(np.abs(y_bits - y_float[0]).max()))
print("output range:", y_bits.min(), "to", y_bits.max(), "(multiples of 2 within +/-72)")
