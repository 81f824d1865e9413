import numpy as np
import pytest

from fvsim.scene.surfaces import Heightfield


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_unit(rng, n=None):
    v = rng.standard_normal((n, 3) if n else 3)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def flat_heightfield(height=0.0, n=9, d=1.0):
    return Heightfield(n, n, d, d, np.full((n, n), height))


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
