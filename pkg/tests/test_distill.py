import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bnnspeech import architectures as A
from bnnspeech import distill as D
from bnnspeech import graph as G
from bnnspeech import modelio
from bnnspeech.ops import finite_difference_grad


@pytest.fixture(scope="module")
def feats():
    rng = np.random.default_rng(0)
    x = np.log(rng.uniform(1e-4, 1, (24, 98, 64))).astype(np.float32)
    return x, np.arange(24, dtype=np.uint64)


def test_loss_value():
    s = np.array([[1.0, 2.0], [0.0, 0.0]])
    t = np.array([[1.0, 0.0], [3.0, 4.0]])
    assert D.distill_loss(s, t) == pytest.approx((0.5 * 4 + 0.5 * 25) / 2)
    assert D.distill_loss(np.ones(3), np.ones(3)) == 0.0


def test_loss_shape_mismatch():
    with pytest.raises(ValueError):
        D.distill_loss(np.ones((2, 3)), np.ones((2, 4)))


@pytest.mark.parametrize("seed", range(5))
def test_loss_grad(seed):
    rng = np.random.default_rng(seed)
    s, t = rng.standard_normal((4, 6)), rng.standard_normal((4, 6))
    num = finite_difference_grad(lambda v: D.distill_loss(v, t), s)
    np.testing.assert_allclose(D.distill_loss_grad(s, t), num, rtol=1e-3, atol=1e-6)


def test_embedding_file_roundtrip(tmp_path):
    keys = [D.segment_key("a.wav", 0), D.segment_key("a.wav", 16000)]
    vec = np.random.default_rng(0).standard_normal((2, 5)).astype(np.float32)
    D.write_embeddings(tmp_path / "e.brem", keys, vec)
    k, v = D.read_embeddings(tmp_path / "e.brem")
    assert list(k) == keys
    np.testing.assert_array_equal(v, vec)
    raw = (tmp_path / "e.brem").read_bytes()
    assert raw[:4] == b"BREM" and len(raw) == 20 + 2 * (8 + 20)


def test_embedding_file_errors(tmp_path):
    (tmp_path / "x").write_bytes(b"NOPE" + bytes(16))
    with pytest.raises(modelio.BadMagicError):
        D.read_embeddings(tmp_path / "x")


def test_segment_key_stable():
    assert D.segment_key("x.wav", 3) == D.segment_key("x.wav", 3)
    assert D.segment_key("x.wav", 3) != D.segment_key("x.wav", 4)


def test_file_teacher_missing_key(tmp_path):
    D.write_embeddings(tmp_path / "e", [1], np.zeros((1, 4)))
    t = D.FileTeacher(tmp_path / "e")
    assert t.embed(None, [1]).shape == (1, 4)
    with pytest.raises(D.DistillError):
        t.embed(None, [2])


def test_synthetic_teacher_deterministic(feats):
    x, _ = feats
    a = D.SyntheticTeacher(seed=3).embed(x)
    b = D.SyntheticTeacher(seed=3).embed(x[::-1])[::-1]
    assert a.shape == (24, 1024)
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, D.SyntheticTeacher(seed=4).embed(x))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.integers(1, 17), st.integers(0, 1000))
def test_batch_stream_is_epoch_permutation(n, batch, seed):
    stream = D.batch_stream(n, batch, np.random.default_rng(seed))
    drawn = np.concatenate([next(stream) for _ in range(-(-3 * n // batch))])[:3 * n]
    for e in range(3):
        assert sorted(drawn[e * n:(e + 1) * n]) == list(range(n))


def _small_student(seed=0):
    g = G.LayerGraph("s", (98, 64, 1), seed)
    from bnnspeech.ops import ConvSpec
    rng = np.random.default_rng(seed)
    x = g.add(G.Conv2D("conv2d-1", [G.INPUT], ConvSpec(5, 5, 1, 8, 4), rng))
    x = g.add(G.BatchNorm("batch-normalization-1", [x], 8))
    x = g.add(G.BinaryConv2D("binary-conv2d-1", [x], ConvSpec(3, 3, 8, 16, 2), rng))
    x = g.add(G.BatchNorm("batch-normalization-2", [x], 16))
    g.add(G.GlobalMaxPool("global-max-pool-1", [x]))
    return g


def test_zero_lr_keeps_trainables(feats):
    x, keys = feats
    g = _small_student()
    before = {k: v.copy() for k, v in g.trainable_params().items()}
    head = D.RegressorHead(16)
    D.train_distill(g, head, D.SyntheticTeacher(), x, keys,
                    D.DistillConfig(batch_size=8, learning_rate=0.0, steps=3))
    for k, v in g.trainable_params().items():
        np.testing.assert_array_equal(v, before[k])


def test_self_distillation_zero_loss_at_step0(feats):
    x, keys = feats
    g = _small_student(1)
    head = D.RegressorHead.identity(16)
    teacher = D.GraphTeacher(g, head)
    res = D.train_distill(g, head, teacher, x, keys,
                          D.DistillConfig(batch_size=8, learning_rate=0.0, steps=2))
    assert res.losses == [0.0, 0.0]


def test_loss_decreases(feats):
    x, keys = feats
    g = _small_student(2)
    res = D.train_distill(g, D.RegressorHead(16, seed=2), D.SyntheticTeacher(1), x, keys,
                          D.DistillConfig(batch_size=8, learning_rate=1e-2, steps=60))
    assert np.mean(res.losses[-6:]) < 0.5 * np.mean(res.losses[:6])


def test_binary_latents_clipped(feats):
    x, keys = feats
    g = _small_student(3)
    D.train_distill(g, D.RegressorHead(16, binary=True), D.SyntheticTeacher(), x, keys,
                    D.DistillConfig(batch_size=8, learning_rate=0.5, steps=3))
    assert np.abs(g.layer("binary-conv2d-1").params["kernel"]).max() <= 1.0


def test_nonfinite_loss_aborts_with_checkpoint(feats, tmp_path):
    x, keys = feats
    bad = x.copy()
    bad[:] = np.nan
    with pytest.raises(D.NonFiniteLossError) as err:
        D.train_distill(_small_student(), D.RegressorHead(16), D.SyntheticTeacher(), bad, keys,
                        D.DistillConfig(batch_size=4, steps=2, checkpoint_dir=str(tmp_path)))
    assert err.value.step == 0
    modelio.load(err.value.checkpoint)


def test_head_dimension_mismatch(feats):
    x, keys = feats
    with pytest.raises(D.DistillError):
        D.train_distill(_small_student(), D.RegressorHead(7), D.SyntheticTeacher(), x, keys,
                        D.DistillConfig(steps=1))


def test_deterministic_and_head_stripped(feats, tmp_path):
    x, keys = feats
    blobs = []
    for _ in range(2):
        g = _small_student(4)
        D.train_distill(g, D.RegressorHead(16, seed=4), D.SyntheticTeacher(2), x, keys,
                        D.DistillConfig(batch_size=8, steps=5, seed=7))
        D.export_student(g, tmp_path / "s.bril")
        blobs.append((tmp_path / "s.bril").read_bytes())
    assert blobs[0] == blobs[1]
    names = [n for n, _ in modelio.load(tmp_path / "s.bril").enumerate_layers()]
    assert "regressor" not in names and names[-1] == "global-max-pool-1"


def test_desk_preset():
    cfg = D.DistillConfig.desk()
    assert (cfg.batch_size, cfg.steps, cfg.learning_rate) == (32, 2000, 1e-3)
    assert (D.DistillConfig().batch_size, D.DistillConfig().steps) == (512, 234_000)


def test_loss_one_hot():
    t = np.zeros(1024)
    t[0] = 1.0
    assert D.distill_loss(np.zeros(1024), t) == 0.5


def test_loss_against_scalar_loop(rng):
    for _ in range(100):
        s, t = rng.standard_normal(1024), rng.standard_normal(1024)
        ref = 0.0
        for a, b in zip(s, t):
            ref += (b - a) ** 2
        assert D.distill_loss(s, t) == pytest.approx(0.5 * ref, rel=1e-6)


def test_loss_grad_is_difference(rng):
    s, t = rng.standard_normal(16), rng.standard_normal(16)
    np.testing.assert_allclose(D.distill_loss_grad(s, t), s - t, rtol=1e-6)
    num = finite_difference_grad(lambda v: D.distill_loss(v, t), s)
    np.testing.assert_allclose(num, s - t, rtol=1e-4)


def test_config_validation():
    with pytest.raises(ValueError):
        D.DistillConfig(batch_size=0)
    with pytest.raises(ValueError):
        D.DistillConfig(segment_seconds=2.0)


def test_distill_from_index(tmp_path):
    from bnnspeech import data
    m = data.read_manifest(data.make_unlabeled_corpus(tmp_path, n_clips=2, seed=0,
                                                      min_duration=1.0, max_duration=1.5))
    idx = data.build_segment_index(m)
    res = D.distill_from_index(_small_student(), D.RegressorHead(16), D.SyntheticTeacher(), idx,
                               D.DistillConfig(batch_size=2, steps=2))
    assert res.steps == 2


def test_export_untrained_roundtrip(tmp_path):
    g = _small_student(5)
    D.export_student(g, tmp_path / "u.bril")
    h = modelio.load(tmp_path / "u.bril")
    x = np.random.default_rng(0).standard_normal((10, 98, 64)).astype(np.float32)
    np.testing.assert_array_equal(G.forward(g, x), G.forward(h, x))
