import numpy as np
import pytest

from critsampler.lattice import LatticeSpec
from critsampler.rng import make_rng

BETA_C = 0.44

# Frozen enumeration results at beta = 0.44 (sum over all 2**(N*N) states).
ENUM_044 = {
    2: {"logZ": 4.37736649052529, "energy": -6.782499698708391, "absm": 0.8987894556815906},
    4: {"logZ": 15.504726538718161, "energy": -25.005552449660577, "absm": 0.842715640981369},
}


@pytest.fixture
def rng():
    return make_rng(12345)


@pytest.fixture
def spec4():
    return LatticeSpec(4, beta=BETA_C)


def within_sigma(est, err, ref, k=3.0):
    return abs(est - ref) <= k * err


def random_config(rng, N):
    return rng.choice(np.array([-1, 1], dtype=np.int8), size=N * N)


# filled by the acceptance suite, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
