import sys

import numpy as np
import pytest

from bichannel_abf.grid import Grid
from bichannel_abf.model import PotentialSpec, build_system


def gaussian_system(a=0.5, h=1.0, sigma=1.0, lam=1.0, exclusion=((0.25, 0.75),)):
    return build_system(
        PotentialSpec("gaussian-channel", {"a": a, "h": h, "sigma": sigma, "lambda": lam, "exclusion": exclusion})
    )


def flat_system(lam=1.0, exclusion=()):
    """Identical channels V_i = y^2/2."""
    return gaussian_system(a=0.0, h=0.0, lam=lam, exclusion=exclusion)


@pytest.fixture(scope="session")
def default_system():
    return gaussian_system(a=0.5, h=2.0, lam=5.0)


@pytest.fixture(scope="session")
def small_grid():
    return Grid(32, 32, 6.5)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
