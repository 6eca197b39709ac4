import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regimehedge import generator as gen

from . import oracles


def test_table1_contexts(table1):
    ctx = table1.context(np.arange(2))
    np.testing.assert_allclose(ctx.delta2, [0.03, 0.075])
    np.testing.assert_allclose(ctx.theta, [0.2309401076758503, 0.0365148371670111], rtol=1e-14)


def test_sharpe_target_validation(table1):
    t = gen.sharpe_target(table1, [0.4, 0.2])
    np.testing.assert_array_equal(t.at(np.array([0, 1, 1])), [0.4, 0.2, 0.2])
    with pytest.raises(ValueError, match="theta"):
        gen.sharpe_target(table1, [0.2, 0.2])
    gen.sharpe_target(table1, [0.04 / np.sqrt(0.03), 0.2], eps=0.0)
    np.testing.assert_array_equal(gen.sharpe_target(table1, 0.5).L, [0.5, 0.5])
    with pytest.raises(ValueError, match="expected 2"):
        gen.sharpe_target(table1, [0.5, 0.5, 0.5])


def test_residual_forms_agree(rng):
    for _ in range(200):
        c, ctx, _ = oracles.random_instance(rng)
        R = gen.residual_risk(c, ctx)
        assert R**2 == pytest.approx(gen.residual_variance(c, ctx), rel=1e-9, abs=1e-9)


def test_attainable_controls_have_no_residual_risk(rng):
    c, ctx, L = oracles.random_instance(rng, n_jumps=2)
    pi = 3.7
    att = gen.ControlVector(z=pi * ctx.sigma, u=pi * ctx.gamma)
    assert gen.residual_risk(att, ctx) < 1e-14
    assert gen.variance_optimal_strategy(att, ctx) == pytest.approx(pi, rel=1e-14)
    # the L-loading vanishes and the rate is the replication drift
    assert gen.pricing_rate(att, ctx, L) == pytest.approx(pi * (ctx.mu - ctx.r), rel=1e-12)
    k = gen.girsanov_kernel(att, ctx, L)
    assert k.attainable
    assert k.psi == pytest.approx(ctx.theta * ctx.sigma / ctx.delta)


def test_optimal_strategy_matches_golden_section(rng):
    for _ in range(50):
        c, ctx, L = oracles.random_instance(rng)
        pi_ref, h_ref = oracles.golden_argmin(c, ctx, L)
        pi = gen.optimal_strategy(c, ctx, L)
        assert abs(pi - pi_ref) <= 1e-6 * max(1.0, abs(pi))
        assert gen.objective(pi, c, ctx, L) <= float(h_ref) + 1e-9


def test_kernel_matches_constrained_optimiser(rng):
    for _ in range(30):
        c, ctx, L = oracles.random_instance(rng)
        k = gen.girsanov_kernel(c, ctx, L)
        value = gen.kernel_objective(k, c, ctx)
        assert value == pytest.approx(oracles.constrained_kernel_value(c, ctx, L), abs=1e-6)
        # the optimal kernel prices the stock and sits on the L-ball
        assert ctx.sigma * k.psi + np.sum(ctx.gamma * k.phi * ctx.lam) == pytest.approx(ctx.mu - ctx.r, abs=1e-12)
        assert k.psi**2 + np.sum(k.phi**2 * ctx.lam) == pytest.approx(L**2, rel=1e-10)
        assert value == pytest.approx(gen.pricing_rate(c, ctx, L), abs=1e-10)


def test_sharpe_identity_random(rng):
    for _ in range(200):
        c, ctx, L = oracles.random_instance(rng)
        f = gen.pricing_rate(c, ctx, L)
        pi = gen.optimal_strategy(c, ctx, L)
        drift, qv = gen.instantaneous_moments(pi, c, ctx, f)
        assert drift / np.sqrt(qv) == pytest.approx(L, rel=1e-9)


def test_driver_includes_discounting(rng):
    c, ctx, L = oracles.random_instance(rng)
    cy = gen.ControlVector(z=c.z, u=c.u, y=2.5)
    assert gen.driver(cy, ctx, L) == pytest.approx(-2.5 * ctx.r - gen.pricing_rate(c, ctx, L))


def test_optimal_strategy_requires_positive_loading(rng):
    c, ctx, _ = oracles.random_instance(rng)
    with pytest.raises(ValueError):
        gen.optimal_strategy(c, ctx, ctx.theta)
    with pytest.raises(ValueError):
        gen.pricing_rate(c, ctx, ctx.theta * 0.5)


def test_vectorised_nodes_match_scalar(rng):
    insts = [oracles.random_instance(rng, n_jumps=2) for _ in range(5)]
    stack = lambda f: np.array([f(i) for i in insts]).T  # noqa: E731
    c = gen.ControlVector(z=stack(lambda i: i[0].z), u=stack(lambda i: i[0].u))
    ctx = gen.LocalContext(*(stack(lambda i, a=a: getattr(i[1], a)) for a in ("r", "mu", "sigma", "gamma", "lam")))
    L = stack(lambda i: i[2])
    vec = gen.pricing_rate(c, ctx, L)
    for n, (ci, cti, Li) in enumerate(insts):
        assert vec[n] == pytest.approx(gen.pricing_rate(ci, cti, Li), rel=1e-14)


finite = st.floats(-50, 50, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(z=finite, u1=finite, u2=finite, scale=st.floats(0.01, 100), L_gap=st.floats(0.0, 2.0))
def test_properties(z, u1, u2, scale, L_gap):
    ctx = gen.LocalContext(r=0.02, mu=0.08, sigma=0.2, gamma=np.array([-0.1, 0.3]), lam=np.array([1.5, 0.5]))
    L = ctx.theta + L_gap
    c = gen.ControlVector(z=z, u=np.array([u1, u2]))
    R = gen.residual_risk(c, ctx)
    assert R >= 0
    # positive homogeneity of degree one
    cs = gen.ControlVector(z=z * scale, u=np.array([u1, u2]) * scale)
    assert gen.residual_risk(cs, ctx) == pytest.approx(scale * R, rel=1e-9, abs=1e-9)
    # larger L never lowers the price rate's loading: f decreases in L
    assert gen.pricing_rate(c, ctx, L + 0.1) <= gen.pricing_rate(c, ctx, L) + 1e-12
    # the residual risk never exceeds the unhedged local risk
    assert R <= np.sqrt(z**2 + u1**2 * 1.5 + u2**2 * 0.5) + 1e-9
