import numpy as np
import pytest

from fogran.config import ScenarioConfig, reduced_scenario
from fogran.env import ChannelSet, FranEnv


@pytest.fixture(scope="session")
def full_cfg():
    return ScenarioConfig()


@pytest.fixture(scope="session")
def full_env(full_cfg):
    return FranEnv.from_seeds(full_cfg, 0, 100)


@pytest.fixture(scope="session")
def reduced_env():
    return FranEnv.from_seeds(reduced_scenario(), 1, 2)


def single_link(gain, **over):
    """One RRH, one antenna, one UE, channel power gain ``gain``."""
    base = dict(num_rrh=1, antennas_per_rrh=1, num_ue=1, num_processors=1,
                processor_power=(1.0,), processor_capacity=(100.0,), rho=1.0)
    base.update(over)
    cfg = ScenarioConfig(**base)
    h = np.full((1, 1, 1), np.sqrt(gain) + 0j)
    ch = ChannelSet(h=h, g_d2d=np.array([1e-4]), g_cross=np.array([[1e-4]]))
    return cfg, ch


def assert_uniform(counts, n):
    """Pearson chi-square of a histogram within 3 sigma of its expectation (df = bins - 1)."""
    k = len(counts)
    expected = n / k
    chi2 = float(np.sum((counts - expected) ** 2 / expected))
    df = k - 1
    assert abs(chi2 - df) <= 3 * np.sqrt(2 * df), chi2


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
