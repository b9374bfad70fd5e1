import json

import numpy as np
import pytest

from bnnspeech import architectures as A
from bnnspeech import cli, modelio
from bnnspeech.frontend import Waveform, load_audio, log_mel, write_wav

from graphs import small_encoder


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    from bnnspeech import data
    return data.make_unlabeled_corpus(tmp_path_factory.mktemp("corpus"), n_clips=3, seed=2,
                                      min_duration=1.0, max_duration=2.0)


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_frontend_matches_library(tmp_path, capsys):
    x = np.random.default_rng(0).uniform(-0.5, 0.5, 15680)
    write_wav(tmp_path / "a.wav", Waveform(x))
    code, _, _ = run(capsys, "frontend", "--wav", tmp_path / "a.wav", "--out", tmp_path / "a.spec")
    assert code == 0
    raw = (tmp_path / "a.spec").read_bytes()
    assert raw[:16] == np.array([98, 64], "<u8").tobytes()
    assert raw[16:] == log_mel(load_audio(tmp_path / "a.wav")).astype("<f4").tobytes()
    cfg = json.loads((tmp_path / "a.spec.run.json").read_text())
    assert cfg["command"] == "frontend" and cfg["seed"] == 42


def test_frontend_silence(tmp_path, capsys):
    write_wav(tmp_path / "z.wav", Waveform(np.zeros(15680)))
    assert run(capsys, "frontend", "--wav", tmp_path / "z.wav", "--out", tmp_path / "z")[0] == 0
    spec = cli.read_spectrogram(tmp_path / "z")
    assert spec.shape == (98, 64) and np.all(spec == np.float32(np.log(1e-6)))


def test_frontend_bad_wav(tmp_path, capsys):
    (tmp_path / "bad.wav").write_bytes(b"xx")
    code, out, err = run(capsys, "frontend", "--wav", tmp_path / "bad.wav", "--out", tmp_path / "o")
    assert code == cli.EXIT_DATA and "data error" in err and out == ""


def test_distill_steps_zero_is_seeded_init(tmp_path, capsys, corpus):
    code, out, _ = run(capsys, "distill", "--arch", "tiny", "--manifest", corpus,
                       "--teacher", "synthetic:1", "--steps", 0, "--out", tmp_path / "m.bril")
    assert code == 0 and json.loads(out)["steps"] == 0
    assert (tmp_path / "m.bril").read_bytes() == modelio.to_bytes(A.build("tiny", seed=42))


def test_distill_deterministic_with_overrides(tmp_path, capsys, corpus):
    files = []
    for i in range(2):
        out = tmp_path / f"m{i}.bril"
        code, _, _ = run(capsys, "distill", "--arch", "tiny", "--manifest", corpus,
                         "--teacher", "synthetic:1", "--out", out, "--seed", 3,
                         "--config", "steps=2", "--config", "batch=4")
        assert code == 0
        files.append(out.read_bytes())
    assert files[0] == files[1]
    rows = (tmp_path / "m0.bril.loss.csv").read_text().splitlines()
    assert rows[0] == "step,loss" and len(rows) == 3
    cfg = json.loads((tmp_path / "m0.bril.run.json").read_text())
    assert cfg["flags"]["steps"] == 2 and cfg["seed"] == 3


def test_distill_config_errors(tmp_path, capsys, corpus):
    base = ["distill", "--arch", "tiny", "--manifest", corpus, "--out", tmp_path / "m"]
    assert run(capsys, *base, "--teacher", "magic:1")[0] == cli.EXIT_CONFIG
    assert run(capsys, *base, "--teacher", "synthetic:1", "--config", "nope=1")[0] == cli.EXIT_CONFIG
    assert run(capsys, *base, "--teacher", "synthetic:1", "--steps", -1)[0] == cli.EXIT_CONFIG
    assert run(capsys, *base, "--teacher", f"file:{tmp_path / 'none'}")[0] == cli.EXIT_DATA


def test_model_commands(tmp_path, capsys, small_task):
    g = small_encoder()
    modelio.save(g, tmp_path / "s.bril")
    m = tmp_path / "s.bril"

    code, out, _ = run(capsys, "size", "--model", m)
    assert code == 0 and json.loads(out)["param_count_total"] == g.param_counts()[0]

    code, out, _ = run(capsys, "inspect", "--model", m)
    assert code == 0 and "batch-normalization-2\tbatch_norm" in out

    code, out, _ = run(capsys, "bench", "--model", m, "--runs", 3, "--warmup", 0,
                       "--out", tmp_path / "b.json")
    dump = json.loads((tmp_path / "b.json").read_text())
    assert code == 0 and len(dump["samples_ms"]) == 3

    manifest = small_task.root / "manifest.jsonl"
    code, out, _ = run(capsys, "embed", "--model", m, "--manifest", manifest,
                       "--out", tmp_path / "e.brem")
    assert code == 0 and json.loads(out)["dim"] == g.embedding_dim

    code, out, _ = run(capsys, "probe", "--model", m, "--manifest", manifest, "--epochs", 2,
                       "--predictions", tmp_path / "p.csv")
    assert code == 0 and 0.0 <= json.loads(out)["accuracy"] <= 1.0
    assert (tmp_path / "p.csv").exists()

    code, out, _ = run(capsys, "sweep", "--model", m, "--manifest", manifest, "--epochs", 1,
                       "--runs", 2, "--warmup", 0, "--out", tmp_path / "s.csv")
    assert code == 0 and json.loads(out)["rows"] == 3


def test_corrupt_model_exit_code(tmp_path, capsys):
    (tmp_path / "x.bril").write_bytes(b"JUNKJUNK")
    code, _, err = run(capsys, "size", "--model", tmp_path / "x.bril")
    assert code == cli.EXIT_MODEL and "magic" in err


def test_inspect_lists_default_tap(tmp_path, capsys):
    modelio.save(A.build("densenet28"), tmp_path / "d.bril")
    code, out, _ = run(capsys, "inspect", "--model", tmp_path / "d.bril")
    assert code == 0 and A.DEFAULT_TAP in out
