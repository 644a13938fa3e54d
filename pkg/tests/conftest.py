import numpy as np
import pytest

from iecdiff.models import LinearGaussianModel, default_mixture
from iecdiff.schedule import default_schedule

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def schedule100():
    return default_schedule(100)


@pytest.fixture(scope="session")
def mixture100(schedule100):
    return default_mixture(schedule100)


def random_spd(rng, d, lo=0.3, hi=3.0):
    Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    return (Q * rng.uniform(lo, hi, d)) @ Q.T


def make_linear(d, schedule, seed=0):
    rng = np.random.default_rng(seed)
    S = random_spd(rng, d)
    return LinearGaussianModel(rng.standard_normal(d), 0.5 * (S + S.T), schedule)
