import csv

import numpy as np
import pytest

from regimehedge import generator as gen
from regimehedge import hedging, lsmc
from regimehedge.market import simulate_paths

CFG = lsmc.LsmcConfig(n_paths=10_000, n_steps=20, seed=3)


@pytest.fixture(scope="module")
def setup(table1):
    paths = simulate_paths(table1, n_steps=20, n_paths=10_000, seed=3)
    sol = lsmc.price_lsmc(table1, lsmc.ClaimSpec("call", strike=100), [0.4, 0.2], CFG, paths=paths)
    test = simulate_paths(table1, n_steps=20, n_paths=5_000, seed=4)
    return paths, sol, test


def test_no_claim_no_position_has_zero_surplus(table1):
    paths = simulate_paths(table1, n_steps=10, n_paths=2_000, seed=5)
    sol = lsmc.price_lsmc(table1, lsmc.ClaimSpec("constant", amount=0.0), [0.4, 0.2],
                          lsmc.LsmcConfig(n_paths=2_000, n_steps=10, seed=5), paths=paths)
    rep = hedging.backtest(paths, sol, table1, strategy="custom", custom=lambda k, t, s, j: 0.0)
    assert np.all(rep.terminal == 0.0)
    assert all(r.drift == 0.0 and r.qv == 0.0 for r in rep.regimes)


def test_variance_minimal_beats_perturbations(table1, setup):
    _, sol, test = setup

    def shifted(eps):
        def pi(k, t, s, j):
            _, z, u, _ = sol.controls(k, s, j)
            return gen.variance_optimal_strategy(gen.ControlVector(z=z, u=u), table1.context(j, s)) + eps * s
        return pi

    base = hedging.backtest(test, sol, table1, strategy="variance_minimal")
    qv = lambda rep: sum(r.qv * r.n for r in rep.regimes)
    for eps in (-0.2, -0.05, 0.05, 0.2):
        assert qv(base) <= qv(hedging.backtest(test, sol, table1, strategy="custom", custom=shifted(eps)))


def test_optimal_strategy_ordering(table1, setup):
    _, sol, test = setup
    opt = hedging.backtest(test, sol, table1, strategy="optimal")
    vm = hedging.backtest(test, sol, table1, strategy="variance_minimal")
    cmp = hedging.compare_strategies(opt, vm)
    assert cmp.mean_diff > 0 and cmp.var_ratio > 1
    assert cmp.mean_pvalue < 0.01 and cmp.var_pvalue < 0.01
    for r in opt.regimes:
        assert r.model_sharpe == pytest.approx(r.target_L, abs=5 * r.model_sharpe_se + 0.05)


def test_compare_strategies_on_known_samples():
    rng = np.random.default_rng(0)
    b = rng.normal(0, 1, 20_000)
    a = 0.1 + 1.2 * b + rng.normal(0, 0.3, b.size)
    rep = lambda x: hedging.BacktestReport("x", [], x.mean(), x.var(ddof=1), 0.0, 0, x)
    c = hedging.compare_strategies(rep(a), rep(b))
    assert c.mean_pvalue < 1e-6 and c.var_pvalue < 1e-6
    c = hedging.compare_strategies(rep(b), rep(a))
    assert c.mean_pvalue > 0.99 and c.var_pvalue > 0.99


def test_report_outputs(tmp_path, table1, setup):
    _, sol, test = setup
    rep = hedging.backtest(test, sol, table1, strategy="variance_minimal")
    rep.to_csv(tmp_path / "b.csv")
    rows = list(csv.DictReader(open(tmp_path / "b.csv")))
    assert [r["regime"] for r in rows] == ["1", "2"]
    assert rep.summary()["strategy"] == "variance_minimal"
    with pytest.raises(ValueError):
        hedging.backtest(test, sol, table1, strategy="greedy")
