import numpy as np
import pytest
from hypothesis import settings

from lbm.gmc import GridSpec
from lbm.kernels import CutoffSequence, KernelConfig

settings.register_profile("lbm", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("lbm")

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: dict = {}


def record_acceptance(number: int, title: str, passed: bool, detail: str) -> str:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:2d} {title}: {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture(scope="session")
def kcfg():
    return KernelConfig()


@pytest.fixture(scope="session")
def cuts():
    return CutoffSequence.geometric()


@pytest.fixture(scope="session")
def small_grid():
    """Cheap grid whose embedding is exact for m = 1."""
    return GridSpec(side=1.0, cells_per_side=8, padding_factor=12)


@pytest.fixture(scope="session")
def wide_grid():
    """Side-4 window used for path tests (paths rarely exit)."""
    return GridSpec(side=4.0, cells_per_side=64, padding_factor=4)


def moment_test(x: np.ndarray) -> tuple:
    """``(skew, excess kurtosis, skew bound, kurtosis bound)`` at the 3-sigma level."""
    z = (x - x.mean()) / x.std()
    R = x.size
    return (float(np.mean(z ** 3)), float(np.mean(z ** 4) - 3.0),
            3 * np.sqrt(6 / R), 3 * np.sqrt(24 / R))
