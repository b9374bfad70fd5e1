import struct

import numpy as np
import pytest

from bnnspeech import architectures as A
from bnnspeech import graph as G
from bnnspeech import modelio as M
from bnnspeech.ops import ConvSpec, sign

from graphs import random_graph


@pytest.mark.parametrize("seed", range(4))
def test_roundtrip_forward_identical(seed, tmp_path):
    g = random_graph(seed)
    M.save(g, tmp_path / "m.bril")
    h = M.load(tmp_path / "m.bril")
    assert h.enumerate_layers() == g.enumerate_layers()
    x = np.random.default_rng(seed).standard_normal((2, 12, 10)).astype(np.float32)
    np.testing.assert_array_equal(G.forward(g, x), G.forward(h, x))
    for (k, a, b, _), (k2, a2, _, _) in zip(g.parameters(), h.parameters()):
        assert k == k2
        np.testing.assert_array_equal(sign(a) if b else a, a2)


def test_resave_is_byte_identical():
    g = random_graph(11)
    once = M.to_bytes(M.from_bytes(M.to_bytes(g)))
    assert M.to_bytes(M.from_bytes(once)) == once


def test_bad_magic():
    blob = bytearray(M.to_bytes(random_graph(0)))
    blob[:4] = b"XXXX"
    with pytest.raises(M.BadMagicError):
        M.from_bytes(bytes(blob))


def test_bad_version():
    blob = bytearray(M.to_bytes(random_graph(0)))
    blob[4:8] = struct.pack("<I", 9)
    with pytest.raises(M.UnsupportedVersionError):
        M.from_bytes(bytes(blob))


def test_crc_error_names_layer():
    g = random_graph(2)
    head, data = M._serialize(g)
    blob = bytearray(head + data)
    blob[-1] ^= 0xFF  # last blob belongs to the last parametrised layer
    last = [layer.name for layer in g.layers if layer.params][-1]
    with pytest.raises(M.ChecksumError) as err:
        M.from_bytes(bytes(blob))
    assert err.value.layer == last
    assert last in str(err.value)


def test_truncated_file():
    blob = M.to_bytes(random_graph(0))
    with pytest.raises(M.ModelFormatError):
        M.from_bytes(blob[:-10])
    with pytest.raises(M.ModelFormatError):
        M.from_bytes(blob[:30])


def test_single_binary_layer_costs_eight_bytes():
    g = G.LayerGraph("one", (4, 4, 4))
    g.add(G.BinaryConv2D("binary-conv2d-1", [G.INPUT], ConvSpec(1, 1, 4, 16)))
    r = M.size_report(g)
    assert (r.param_count_binary, r.param_count_float) == (64, 0)
    assert r.quantized_weights_mb * M.MIB == 8
    assert r.float_size_mb * M.MIB == 256
    assert r.quantized_size_mb * M.MIB == 8 + r.header_bytes


def test_header_bytes_match_file():
    g = A.build("tiny")
    r = M.size_report(g)
    blob = M.to_bytes(g)
    assert r.header_bytes < len(blob)
    assert r.header_bytes == len(M._serialize(g)[0])


def test_load_missing_file(tmp_path):
    with pytest.raises(OSError):
        M.load(tmp_path / "missing.bril")
