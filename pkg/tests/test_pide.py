import csv

import numpy as np
import pytest

from regimehedge import pide
from regimehedge.bsref import BsInputs, bs_call, bs_call_surface
from regimehedge.lsmc import ClaimSpec
from regimehedge.market import ModelError, build_market, sharpe_theta, table1_config

from .conftest import single_regime_config

CALL100 = ClaimSpec("call", strike=100)
COARSE = pide.PideConfig(n_space=201, n_time=100)


@pytest.fixture(scope="module")
def bs_grid(black_scholes):
    return pide.price_pide(black_scholes, CALL100, [0.9])


def test_black_scholes_price(bs_grid):
    exact = bs_call(BsInputs(100.0, 100.0, 0.03, 0.1, 1.0))
    assert abs(bs_grid.price - exact) < 1e-2


def test_black_scholes_delta_mid_grid(bs_grid):
    Z, U = pide.extract_controls(bs_grid)
    s = bs_grid.s
    mid = (s > 60) & (s < 160)
    _, delta = bs_call_surface(s[mid], 100.0, 0.03, 0.1, 1.0)
    np.testing.assert_allclose(Z[0, 0, mid] / (s[mid] * 0.1), delta, atol=1e-3)
    assert U.shape == (401, 1, 1, 401) and np.all(U == 0)


def test_constant_and_linear_payoffs(table1):
    # with a common rate the regimes agree, so level jumps vanish too
    cfg = table1_config()
    cfg["states"][0]["r"] = cfg["states"][1]["r"] = 0.02
    g = pide.price_pide(build_market(cfg), ClaimSpec("constant", amount=3.0), [0.4, 0.2], COARSE)
    Z, U = pide.extract_controls(g)
    # the coupling is explicit while the decay is implicit, leaving O(dt^2) in U
    assert np.max(np.abs(Z)) < 1e-10 and np.max(np.abs(U)) < 1e-4
    lin = pide.price_pide(table1, ClaimSpec("stock"), [0.4, 0.2], COARSE)
    vs = np.gradient(lin.values[0], lin.s, axis=1)
    # s is not a polynomial in log s, so the match is only up to O(dx^2)
    np.testing.assert_allclose(vs, 1.0, atol=1e-4)
    assert lin.price == pytest.approx(100.0, abs=1e-3)


def test_minimal_loading_is_cheaper(table1):
    low = pide.price_pide(table1, CALL100, sharpe_theta(table1, np.arange(2)), COARSE, eps_L=0.0)
    high = pide.price_pide(table1, CALL100, [0.4, 0.2], COARSE)
    assert low.price < high.price


def test_positivity_and_comparison(table1):
    a = pide.price_pide(table1, CALL100, [0.4, 0.2], COARSE)
    b = pide.price_pide(table1, ClaimSpec("call", strike=90), [0.4, 0.2], COARSE)
    assert a.values.min() > -1e-10
    # the grids differ with the strike, so compare on common spots
    s = np.linspace(50, 200, 61)
    for i in (0, 1):
        assert np.all(b.value(0.0, s, i) >= a.value(0.0, s, i) - 1e-10)
    assert a.diagnostics["V_s_within_bound"]


def test_feedback_intensities_rejected():
    cfg = table1_config()
    cfg["transitions"][0] = {"from": 1, "to": 2, "gamma": -0.1, "lambda_affine": {"a": 2.0, "b": 0.01, "cap": 5.0}}
    with pytest.raises(ModelError):
        pide.price_pide(build_market(cfg), CALL100, [0.4, 0.2], COARSE)


def test_divergence_detector():
    cfg = table1_config()
    for tr in cfg["transitions"]:
        tr["lambda"] = 1e5
    with pytest.raises(pide.DivergenceError, match="time step"):
        pide.price_pide(build_market(cfg), CALL100, [400.0, 400.0], pide.PideConfig(101, 10))


def test_grid_invariants(black_scholes):
    for bad in (dict(n_space=2), dict(n_time=0)):
        with pytest.raises(ValueError):
            pide.PideConfig(**bad)
    g = pide.price_pide(black_scholes, CALL100, [0.9], COARSE)
    assert 100.0 in g.s.round(10)
    assert g.s[0] == pytest.approx(20.0) and g.s[-1] == pytest.approx(500.0)


def test_second_order_in_grid():
    m = build_market(single_regime_config())
    exact = bs_call(BsInputs(100.0, 100.0, 0.03, 0.1, 1.0))
    errs = [abs(pide.price_pide(m, CALL100, [0.9], pide.PideConfig(n, n - 1)).price - exact) for n in (101, 201)]
    assert errs[1] < errs[0] / 3


def test_csv(tmp_path, black_scholes):
    g = pide.price_pide(black_scholes, CALL100, [0.9], pide.PideConfig(21, 4))
    g.to_csv(tmp_path / "v.csv")
    rows = list(csv.reader(open(tmp_path / "v.csv")))
    assert rows[0] == ["t", "s", "regime", "V"] and len(rows) == 1 + 5 * 21
