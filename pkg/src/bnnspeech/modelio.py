"""Binary model file: layer table plus packed-bit and float32 weight blobs.

Layout (all integers little-endian)::

    b"BRIL" | u32 version | u32 len + graph JSON | u32 n_layers
    per layer:  u16 len + name | u16 len + kind | u32 len + config JSON | u16 n_blobs
    per blob:   u16 len + param | u8 encoding | u8 ndim | u32 dims[ndim]
                | u64 offset | u64 nbytes | u32 crc32
    u64 data length | data

Offsets are relative to the start of the data section. Binary weights are
stored as ±1 bits packed channels-innermost, so a loaded model's latent
binary weights are exactly their signs.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ops
from .graph import Dense, LayerGraph, layer_from_config
from .tensor import BitTensor, pack, unpack

MAGIC = b"BRIL"
VERSION = 1
ENC_BITS = 0
ENC_FLOAT32 = 1


class ModelFormatError(ValueError):
    pass


class BadMagicError(ModelFormatError):
    pass


class UnsupportedVersionError(ModelFormatError):
    pass


class ChecksumError(ModelFormatError):
    def __init__(self, layer, param):
        super().__init__(f"CRC mismatch in layer {layer!r} (parameter {param!r})")
        self.layer = layer
        self.param = param


def _json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _str(fmt, s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack(fmt, len(b)) + b


def _encode_param(layer, pname, arr):
    """Return ``(encoding, stored shape, payload bytes)``."""
    if pname in layer.binary_params:
        if isinstance(layer, Dense):
            bt = pack(arr.T)
        else:
            bt = ops.pack_kernel(arr)
        return ENC_BITS, bt.shape, bt.words.astype("<u8").tobytes()
    a = np.ascontiguousarray(arr, dtype="<f4")
    return ENC_FLOAT32, a.shape, a.tobytes()


def _decode_param(layer, pname, enc, shape, payload):
    if enc == ENC_BITS:
        nw = -(-shape[-1] // 64)
        words = np.frombuffer(payload, dtype="<u8").reshape(tuple(shape[:-1]) + (nw,))
        vals = unpack(BitTensor(tuple(shape), words.astype(np.uint64)))
        if isinstance(layer, Dense):
            return np.ascontiguousarray(vals.T)
        return np.ascontiguousarray(vals.transpose(1, 2, 3, 0))
    if enc == ENC_FLOAT32:
        return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    raise ModelFormatError(f"unknown blob encoding {enc}")


def _serialize(g: LayerGraph):
    """Return ``(header bytes, data bytes)``."""
    head = [MAGIC, struct.pack("<I", VERSION)]
    meta = {"name": g.name, "input_shape": list(g.input_shape), "output": g.output}
    head += [struct.pack("<I", len(_json(meta))), _json(meta), struct.pack("<I", len(g.layers))]
    data = bytearray()
    for layer in g.layers:
        cfg = dict(layer.config(), inputs=layer.inputs)
        head += [_str("<H", layer.name), _str("<H", layer.kind),
                 struct.pack("<I", len(_json(cfg))), _json(cfg),
                 struct.pack("<H", len(layer.params))]
        for pname, arr in layer.params.items():
            enc, shape, payload = _encode_param(layer, pname, arr)
            head += [_str("<H", pname), struct.pack("<BB", enc, len(shape)),
                     struct.pack(f"<{len(shape)}I", *shape),
                     struct.pack("<QQI", len(data), len(payload), zlib.crc32(payload))]
            data += payload
    head.append(struct.pack("<Q", len(data)))
    return b"".join(head), bytes(data)


def to_bytes(g: LayerGraph) -> bytes:
    head, data = _serialize(g)
    return head + data


def save(g: LayerGraph, path) -> int:
    """Write ``g`` to ``path``; returns the file size in bytes."""
    blob = to_bytes(g)
    Path(path).write_bytes(blob)
    return len(blob)


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, fmt):
        try:
            vals = struct.unpack_from(fmt, self.buf, self.pos)
        except struct.error:
            raise ModelFormatError("truncated model file") from None
        self.pos += struct.calcsize(fmt)
        return vals if len(vals) > 1 else vals[0]

    def raw(self, n):
        if self.pos + n > len(self.buf):
            raise ModelFormatError("truncated model file")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def text(self, fmt):
        return self.raw(self.take(fmt)).decode("utf-8")


def from_bytes(buf: bytes) -> LayerGraph:
    if buf[:4] != MAGIC:
        raise BadMagicError(f"not a model file (magic {buf[:4]!r})")
    r = _Reader(buf)
    r.pos = 4
    version = r.take("<I")
    if version != VERSION:
        raise UnsupportedVersionError(f"model file version {version}, expected {VERSION}")
    meta = json.loads(r.text("<I"))
    n_layers = r.take("<I")
    table = []
    for _ in range(n_layers):
        name, kind = r.text("<H"), r.text("<H")
        cfg = json.loads(r.text("<I"))
        blobs = []
        for _ in range(r.take("<H")):
            pname = r.text("<H")
            enc, ndim = r.take("<BB")
            shape = r.take(f"<{ndim}I") if ndim else ()
            shape = (shape,) if isinstance(shape, int) else tuple(shape)
            off, nbytes, crc = r.take("<QQI")
            blobs.append((pname, enc, shape, off, nbytes, crc))
        table.append((name, kind, cfg, blobs))
    data_len = r.take("<Q")
    data = r.raw(data_len)
    if r.pos != len(buf):
        raise ModelFormatError("trailing bytes after data section")

    g = LayerGraph(meta["name"], meta["input_shape"])
    cursor = 0
    for name, kind, cfg, blobs in table:
        layer = layer_from_config(kind, name, cfg.pop("inputs"), cfg)
        for pname, enc, shape, off, nbytes, crc in blobs:
            if off != cursor or off + nbytes > data_len:
                raise ModelFormatError(f"blob {name}/{pname} overlaps or lies outside the data section")
            cursor = off + nbytes
            payload = data[off:off + nbytes]
            if zlib.crc32(payload) != crc:
                raise ChecksumError(name, pname)
            if pname not in layer.params:
                raise ModelFormatError(f"layer {name!r} has no parameter {pname!r}")
            arr = _decode_param(layer, pname, enc, shape, payload)
            if arr.shape != layer.params[pname].shape:
                raise ModelFormatError(f"{name}/{pname}: stored shape {arr.shape} "
                                       f"!= expected {layer.params[pname].shape}")
            layer.params[pname] = arr
        g.add(layer)
    g.set_output(meta["output"])
    return g


def load(path) -> LayerGraph:
    return from_bytes(Path(path).read_bytes())


# ------------------------------------------------------------------ size

MIB = float(1 << 20)


@dataclass(frozen=True)
class SizeReport:
    param_count_total: int
    param_count_binary: int
    param_count_float: int
    header_bytes: int

    @property
    def float_size_mb(self) -> float:
        return 4 * self.param_count_total / MIB

    @property
    def quantized_weights_mb(self) -> float:
        """One bit per binary and four bytes per float parameter."""
        return (self.param_count_binary / 8 + 4 * self.param_count_float) / MIB

    @property
    def quantized_size_mb(self) -> float:
        return self.quantized_weights_mb + self.header_bytes / MIB

    def as_dict(self):
        return {"param_count_total": self.param_count_total,
                "param_count_binary": self.param_count_binary,
                "param_count_float": self.param_count_float,
                "header_bytes": self.header_bytes,
                "float_size_mb": self.float_size_mb,
                "quantized_weights_mb": self.quantized_weights_mb,
                "quantized_size_mb": self.quantized_size_mb}


def size_report(g: LayerGraph) -> SizeReport:
    total, binary, flt = g.param_counts()
    head, _ = _serialize(g)
    return SizeReport(total, binary, flt, len(head))
