import csv

import numpy as np
import pytest

from regimehedge import kernels, market
from regimehedge.market import ModelError, build_market, simulate_paths

from .conftest import single_regime_config


def two_state(**over):
    cfg = {
        "states": [{"r": 0.03, "mu": 0.07, "sigma": 0.1}, {"r": 0.01, "mu": 0.05, "sigma": 0.25}],
        "transitions": [{"from": 1, "to": 2, "gamma": -0.1, "lambda": 2.0},
                        {"from": 2, "to": 1, "gamma": 0.05, "lambda": 5.0}],
        "s0": 100.0, "j0": 1, "horizon": 1.0,
    }
    cfg.update(over)
    return cfg


def test_table1_parameters(table1):
    assert table1.n_states == 2
    assert table1.j0 == 0 and table1.s0 == 100.0
    np.testing.assert_allclose(table1.intensities(0), [0.0, 2.0])
    np.testing.assert_allclose(table1.intensities(1), [5.0, 0.0])
    theta = market.sharpe_theta(table1, np.arange(2))
    np.testing.assert_allclose(theta, [0.04 / np.sqrt(0.03), 0.01 / np.sqrt(0.075)], rtol=1e-14)


@pytest.mark.parametrize("mutate, message", [
    (lambda c: c["transitions"][0].update(gamma=-1.0), "gamma <= -1"),
    (lambda c: c["transitions"].append({"from": 1, "to": 1, "lambda": 1.0}), "self-transition"),
    (lambda c: c["states"][0].update(mu=0.01), "mu < r"),
    (lambda c: c.update(j0=3), "j0"),
    (lambda c: c.update(s0=-1.0), "positive"),
    (lambda c: c["transitions"][0].update(**{"lambda": -1.0}), "negative intensity"),
])
def test_invalid_configs(mutate, message):
    cfg = two_state()
    mutate(cfg)
    with pytest.raises(ModelError, match=message):
        build_market(cfg)


def test_degenerate_variance_rejected():
    cfg = single_regime_config(sigma=0.0)
    with pytest.raises(ModelError, match="delta"):
        build_market(cfg)


def test_affine_intensity_clipped_at_zero():
    cfg = two_state()
    cfg["transitions"][0] = {"from": 1, "to": 2, "gamma": -0.1,
                             "lambda_affine": {"a": 3.0, "b": -0.02, "cap": 3.0}}
    m = build_market(cfg)
    lam = m.intensities(np.zeros(3, dtype=int), np.array([50.0, 150.0, 200.0]))
    np.testing.assert_allclose(lam[1], [2.0, 0.0, 0.0])


def test_seed_determinism_and_thread_independence(table1):
    a = simulate_paths(table1, n_paths=3000, n_steps=20, seed=5)
    b = simulate_paths(table1, n_paths=3000, n_steps=20, seed=5, threads=4)
    np.testing.assert_array_equal(a.s, b.s)
    np.testing.assert_array_equal(a.regime, b.regime)
    c = simulate_paths(table1, n_paths=3000, n_steps=20, seed=6)
    assert not np.array_equal(a.s, c.s)


def test_path_substreams_do_not_depend_on_batch(table1):
    full = simulate_paths(table1, n_paths=50, n_steps=10, seed=9)
    part = simulate_paths(table1, n_paths=10, n_steps=10, seed=9, path_offset=20)
    np.testing.assert_array_equal(full.s[20:30], part.s)


@pytest.mark.parametrize("feedback", [False, True])
def test_backends_agree(feedback):
    if "compiled" not in kernels.available():
        pytest.skip("extension not built")
    cfg = two_state()
    if feedback:
        cfg["transitions"][0] = {"from": 1, "to": 2, "gamma": -0.1,
                                 "lambda_affine": {"a": -2.0, "b": 0.04, "cap": 8.0}}
    m = build_market(cfg)
    a = simulate_paths(m, n_paths=2000, n_steps=25, seed=3, backend="compiled")
    b = simulate_paths(m, n_paths=2000, n_steps=25, seed=3, backend="python")
    np.testing.assert_array_equal(a.regime, b.regime)
    np.testing.assert_allclose(a.s, b.s, rtol=1e-12)
    np.testing.assert_array_equal(a.dN, b.dN)
    np.testing.assert_allclose(a.compensator, b.compensator, rtol=1e-12, atol=1e-15)


def test_overflow_retry_is_transparent(table1, monkeypatch):
    ref = simulate_paths(table1, n_paths=500, n_steps=10, seed=4)
    monkeypatch.setattr(market, "_event_block", lambda m, horizon: 1)
    small = simulate_paths(table1, n_paths=500, n_steps=10, seed=4)
    np.testing.assert_array_equal(ref.s, small.s)
    np.testing.assert_array_equal(ref.regime, small.regime)


def test_regime_occupation_matches_chain(table1):
    # two-state chain, rates a (1->2) and b (2->1): P(J_T = 1 | J_0 = 1) closed form
    a, b, T = 2.0, 5.0, 1.0
    p11 = b / (a + b) + a / (a + b) * np.exp(-(a + b) * T)
    paths = simulate_paths(table1, n_paths=40000, n_steps=10, seed=11)
    x = (paths.regime[:, -1] == 0).astype(float)
    assert abs(x.mean() - p11) < 3 * x.std() / np.sqrt(x.size)


def test_compensated_counts_have_zero_mean(table1):
    paths = simulate_paths(table1, n_paths=40000, n_steps=10, seed=12)
    total = paths.dNtilde.sum(axis=1)
    se = total.std(axis=0) / np.sqrt(total.shape[0])
    assert np.all(np.abs(total.mean(axis=0)) < 3 * se)


def test_discounted_stock_martingale_property():
    # mu - r is the same in both regimes, so S exp(-int r - c t) is a martingale
    m = build_market(two_state(states=[{"r": 0.03, "mu": 0.07, "sigma": 0.1},
                                       {"r": 0.01, "mu": 0.05, "sigma": 0.25}]))
    paths = simulate_paths(m, n_paths=40000, n_steps=20, seed=13)
    x = paths.s[:, -1] * np.exp(-paths.int_r.sum(axis=1) - 0.04)
    assert abs(x.mean() - 100.0) < 3 * x.std() / np.sqrt(x.size)


def test_jump_sizes_applied_at_switches(table1):
    # with one step, log S_T = log s0 + drift + sigma W + log(1 + gamma) at a single switch
    paths = simulate_paths(table1, n_paths=20000, n_steps=1, seed=14)
    one = (paths.dN.sum(axis=(1, 2)) == 1) & (paths.regime[:, -1] == 1)
    assert one.sum() > 100
    no = paths.dN.sum(axis=(1, 2)) == 0
    lr = np.log(paths.s[:, -1] / 100.0)
    # regime 1 throughout: drift (mu - gamma lam - sigma^2/2) T + sigma W
    expected = (0.07 + 0.1 * 2.0 - 0.005) + 0.1 * paths.dW[:, 0]
    np.testing.assert_allclose(lr[no], expected[no], atol=1e-12)


def test_feedback_intensity_compensator():
    cfg = two_state()
    cfg["transitions"][0] = {"from": 1, "to": 2, "gamma": -0.1,
                             "lambda_affine": {"a": -2.0, "b": 0.04, "cap": 8.0}}
    m = build_market(cfg)
    paths = simulate_paths(m, n_paths=20000, n_steps=10, seed=15)
    total = paths.dNtilde.sum(axis=1)[:, 1]
    assert abs(total.mean()) < 3 * total.std() / np.sqrt(total.size)


def test_cap_exceeded_raises():
    cfg = two_state()
    cfg["transitions"][0] = {"from": 1, "to": 2, "gamma": 0.5,
                             "lambda_affine": {"a": 0.0, "b": 0.05, "cap": 5.5}}
    m = build_market(cfg)
    with pytest.raises(ModelError, match="cap"):
        simulate_paths(m, n_paths=2000, n_steps=10, seed=1)


def test_csv_export(tmp_path, table1):
    paths = simulate_paths(table1, n_paths=3, n_steps=4, seed=1)
    out = tmp_path / "p.csv"
    paths.to_csv(out)
    rows = list(csv.reader(open(out)))
    assert rows[0] == ["path_id", "t", "S", "J"]
    assert len(rows) == 1 + 3 * 5
    assert {r[3] for r in rows[1:]} <= {"1", "2"}
    assert float(rows[1][2]) == 100.0


def test_load_model_roundtrip(tmp_path):
    import json

    p = tmp_path / "m.json"
    p.write_text(json.dumps(two_state()))
    m = market.load_model(p)
    np.testing.assert_allclose(m.gamma, [[0.0, 0.05], [-0.1, 0.0]])
