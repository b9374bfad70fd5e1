"""Bit-packed binary tensors and XNOR-popcount arithmetic.

Real-valued tensors are plain ``float32`` numpy arrays throughout the package.
Binary tensors hold +/-1 values packed into 64-bit words: bit 1 means +1, bit 0
means -1, the innermost dimension is packed least-significant-bit first and
each row is padded to a whole number of words with zero bits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

WORD_BITS = 64


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


def n_words(n: int) -> int:
    return -(-n // WORD_BITS)


@dataclass(frozen=True, eq=False)
class BitTensor:
    """Packed +/-1 tensor.

    ``words`` has shape ``shape[:-1] + (n_words(shape[-1]),)`` and dtype
    little-endian uint64.
    """

    shape: tuple
    words: np.ndarray

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        if not shape:
            raise ShapeError("BitTensor needs at least one dimension")
        object.__setattr__(self, "shape", shape)
        words = np.ascontiguousarray(self.words, dtype="<u8")
        expected = shape[:-1] + (n_words(shape[-1]),)
        if words.shape != expected:
            raise ShapeError(f"words shape {words.shape} does not match {expected} for {shape}")
        if np.any(words & ~row_mask(shape[-1])):
            raise ValueError("padding bits must be zero")
        words.flags.writeable = False
        object.__setattr__(self, "words", words)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def innermost(self) -> int:
        return self.shape[-1]

    def __eq__(self, other):
        if not isinstance(other, BitTensor):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.words, other.words)

    def __hash__(self):
        return hash((self.shape, self.words.tobytes()))

    def reshape_rows(self) -> np.ndarray:
        """Words as a 2-D ``(rows, words_per_row)`` array."""
        return self.words.reshape(-1, self.words.shape[-1])


def row_mask(n: int) -> np.ndarray:
    """Per-word masks selecting the ``n`` data bits of one packed row."""
    nw = n_words(n)
    mask = np.full(nw, np.uint64(0xFFFFFFFFFFFFFFFF), dtype="<u8")
    rem = n % WORD_BITS
    if nw and rem:
        mask[-1] = np.uint64((1 << rem) - 1)
    return mask


def pack_bits(bits: np.ndarray) -> np.ndarray:
    """Pack a boolean array along its last axis into uint64 words."""
    bits = np.asarray(bits, dtype=bool)
    n = bits.shape[-1]
    nw = n_words(n)
    packed = np.packbits(bits, axis=-1, bitorder="little")
    pad = nw * 8 - packed.shape[-1]
    if pad:
        widths = [(0, 0)] * (packed.ndim - 1) + [(0, pad)]
        packed = np.pad(packed, widths)
    packed = np.ascontiguousarray(packed)
    return packed.view("<u8").reshape(bits.shape[:-1] + (nw,))


def pack(x) -> BitTensor:
    """Binarize ``x`` by sign (zero maps to +1) and pack it."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 0:
        x = x.reshape(1)
    return BitTensor(x.shape, pack_bits(x >= 0))


def unpack(b: BitTensor) -> np.ndarray:
    """Expand a BitTensor into a float32 array of -1.0/+1.0."""
    n = b.innermost
    rows = b.reshape_rows()
    as_bytes = np.ascontiguousarray(rows).view(np.uint8)
    bits = np.unpackbits(as_bytes, axis=-1, count=n, bitorder="little")
    out = bits.astype(np.float32) * 2.0 - 1.0
    return out.reshape(b.shape)


def xnor_popcount_dot(a: BitTensor, b: BitTensor) -> int:
    """Sum of elementwise products of two packed +/-1 rows.

    Computed as ``2 * popcount(~(a ^ b) & mask) - n``.
    """
    if a.innermost != b.innermost or a.words.size != b.words.size:
        raise ShapeError(f"row lengths differ: {a.shape} vs {b.shape}")
    n = a.innermost
    same = ~(a.words.ravel() ^ b.words.ravel()) & row_mask(n)
    return int(2 * int(np.bitwise_count(same).sum()) - n)


def xnor_matmul(a_words: np.ndarray, b_words: np.ndarray, n: int, block: int = 1 << 21) -> np.ndarray:
    """All pairwise +/-1 dot products between packed rows.

    ``a_words`` is ``(M, W)``, ``b_words`` is ``(K, W)``; both must have zero
    padding bits. Returns an ``(M, K)`` int32 matrix equal to ``n - 2 *
    popcount(a ^ b)``, which is the masked XNOR form rewritten so that
    padding (zero in both operands) never contributes.
    """
    a_words = np.asarray(a_words, dtype="<u8")
    b_words = np.asarray(b_words, dtype="<u8")
    if a_words.shape[-1] != b_words.shape[-1]:
        raise ShapeError(f"word counts differ: {a_words.shape} vs {b_words.shape}")
    m, w = a_words.shape
    k = b_words.shape[0]
    out = np.empty((m, k), dtype=np.int32)
    rows = max(1, block // max(1, k * w))
    for start in range(0, m, rows):
        chunk = a_words[start:start + rows]
        diff = np.bitwise_count(chunk[:, None, :] ^ b_words[None, :, :])
        out[start:start + rows] = n - 2 * diff.sum(axis=-1, dtype=np.int32)
    return out
