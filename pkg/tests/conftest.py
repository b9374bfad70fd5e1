import numpy as np
import pytest

from bnnspeech import data

ACCEPTANCE_RESULTS = {}


@pytest.fixture(scope="session")
def synthetic_task(tmp_path_factory):
    """The bundled 150-clip tone/noise/chirp task."""
    return data.read_manifest(data.make_synthetic_task(tmp_path_factory.mktemp("task"), seed=0))


@pytest.fixture(scope="session")
def small_task(tmp_path_factory):
    return data.read_manifest(
        data.make_synthetic_task(tmp_path_factory.mktemp("small"), n_clips=12, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        status, title, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d} {status}: {title}{'  ' + detail if detail else ''}")
