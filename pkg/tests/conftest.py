import numpy as np
import pytest

from regimehedge.market import build_market, table1_market

ACCEPTANCE_LINES = []


def single_regime_config(r=0.03, mu=0.07, sigma=0.1, s0=100.0, horizon=1.0):
    return {"states": [{"r": r, "mu": mu, "sigma": sigma}], "transitions": [],
            "s0": s0, "j0": 1, "horizon": horizon}


@pytest.fixture(scope="session")
def table1():
    return table1_market()


@pytest.fixture(scope="session")
def black_scholes():
    return build_market(single_regime_config())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
