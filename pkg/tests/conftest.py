import numpy as np
import pytest


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def default_benchmark():
    """The default synthetic benchmark (same as ``potgui gen-data`` defaults)."""
    from potgui.data import generate_scenes, synth_features

    scenes = generate_scenes(200, 32, 32, 5, 7)
    return scenes, synth_features(scenes, 8, 16, 0.5, 7)


@pytest.fixture
def criterion():
    """Record one acceptance line; call with (number, passed, detail)."""
    def record(number, passed, detail):
        ACCEPTANCE_LINES.append(f"[criterion {number}] {'PASS' if passed else 'FAIL'}: {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip("]"))):
            terminalreporter.write_line(line)
