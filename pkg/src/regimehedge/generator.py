"""Closed-form solution of the pointwise mean-variance hedging problem.

Every function broadcasts over node arrays. Jump quantities (``u``,
``gamma``, ``lam``) carry the target regime on their leading axis.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

ATTAINABLE_TOL = 1e-10


@dataclass(frozen=True)
class LocalContext:
    r: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    gamma: np.ndarray
    lam: np.ndarray

    @cached_property
    def delta2(self):
        return self.sigma**2 + np.sum(self.gamma**2 * self.lam, axis=0)

    @cached_property
    def delta(self):
        return np.sqrt(self.delta2)

    @cached_property
    def theta(self):
        return (self.mu - self.r) / self.delta


@dataclass(frozen=True)
class ControlVector:
    z: np.ndarray
    u: np.ndarray
    y: np.ndarray | float = 0.0


@dataclass(frozen=True)
class GirsanovKernel:
    psi: np.ndarray
    phi: np.ndarray
    K1: np.ndarray
    K2: np.ndarray
    attainable: np.ndarray


@dataclass(frozen=True)
class SharpeTarget:
    """Hedger's required Sharpe ratio per regime."""

    L: np.ndarray

    def at(self, regime):
        return self.L[np.asarray(regime)]


def sharpe_target(m, L, eps: float = 1e-6, s_grid=None) -> SharpeTarget:
    """Validate ``L(i) >= theta(i, s) + eps`` on ``s_grid`` and wrap it.

    ``eps=0`` admits the boundary case L = theta, where the risk loading
    vanishes.
    """
    from .market import sharpe_theta

    L = np.asarray(L, dtype=float).reshape(-1)
    if L.size == 1:
        L = np.full(m.n_states, L[0])
    if L.size != m.n_states:
        raise ValueError(f"expected {m.n_states} Sharpe ratios, got {L.size}")
    if s_grid is None and not m.constant_intensities:
        s_grid = np.linspace(m.s0 / 5, 5 * m.s0, 101)
    for i in range(m.n_states):
        th = np.max(sharpe_theta(m, i, s_grid))
        if L[i] < th + eps - 1e-14:
            raise ValueError(f"L({i + 1})={L[i]:g} does not exceed theta({i + 1})={th:.6g} by {eps:g}")
    L.setflags(write=False)
    return SharpeTarget(L)


def _hedge_projection(c: ControlVector, ctx: LocalContext):
    return c.z * ctx.sigma + np.sum(c.u * ctx.gamma * ctx.lam, axis=0)


def _loading(ctx: LocalContext, L):
    gap = np.asarray(L, dtype=float) ** 2 - ctx.theta**2
    if np.any(gap < -1e-12):
        raise ValueError("Sharpe target below the stock's Sharpe ratio")
    return np.sqrt(np.maximum(gap, 0.0))


def residual_variance(c: ControlVector, ctx: LocalContext, extra=0.0):
    """z^2 + sum u_j^2 lam_j + extra - (z sigma + sum u_j gamma_j lam_j)^2 / delta^2.

    Negative values from rounding are clamped at a scale-aware tolerance;
    anything below it is an error.
    """
    total = c.z**2 + np.sum(c.u**2 * ctx.lam, axis=0) + extra
    rad = total - _hedge_projection(c, ctx) ** 2 / ctx.delta2
    if np.any(rad < -1e-12 * (total + 1.0)):
        raise FloatingPointError("negative residual variance beyond rounding")
    return np.maximum(rad, 0.0)


def residual_risk(c: ControlVector, ctx: LocalContext, extra=0.0):
    """Unhedgeable local risk left after the variance-minimal hedge.

    Evaluated as the quadratic-variation norm at the variance-minimal
    strategy, which equals the square root of :func:`residual_variance`
    but does not suffer cancellation when the claim is nearly replicable.
    """
    pi = variance_optimal_strategy(c, ctx)
    qv = (pi * ctx.sigma - c.z) ** 2 + np.sum((pi * ctx.gamma - c.u) ** 2 * ctx.lam, axis=0) + extra
    return np.sqrt(qv)


def variance_optimal_strategy(c: ControlVector, ctx: LocalContext):
    """Amount in the stock minimising the local quadratic variation."""
    return _hedge_projection(c, ctx) / ctx.delta2


def optimal_strategy(c: ControlVector, ctx: LocalContext, L, extra=0.0):
    """Amount in the stock minimising L * sqrt(QV) - excess drift."""
    k = _loading(ctx, L)
    if np.any(k <= 0):
        raise ValueError("optimal strategy requires L strictly above theta")
    return variance_optimal_strategy(c, ctx) + ctx.theta / (ctx.delta * k) * residual_risk(c, ctx, extra)


def pricing_rate(c: ControlVector, ctx: LocalContext, L, extra=0.0):
    """Generator f without the discounting term: pi~ (mu - r) - sqrt(L^2 - theta^2) R."""
    return _hedge_projection(c, ctx) / ctx.delta * ctx.theta - _loading(ctx, L) * residual_risk(c, ctx, extra)


def driver(c: ControlVector, ctx: LocalContext, L, extra=0.0):
    """BSDE driver -y r - (z sigma + sum u gamma lam) theta / delta + sqrt(L^2 - theta^2) R."""
    return -c.y * ctx.r - pricing_rate(c, ctx, L, extra)


def instantaneous_moments(pi, c: ControlVector, ctx: LocalContext, f, extra=0.0):
    """Excess drift and quadratic-variation rate of the surplus under ``pi``.

    ``f`` is the pricing rate (see :func:`pricing_rate`).
    """
    drift = pi * (ctx.mu - ctx.r) - f
    qv = (pi * ctx.sigma - c.z) ** 2 + np.sum((pi * ctx.gamma - c.u) ** 2 * ctx.lam, axis=0) + extra
    return drift, qv


def objective(pi, c: ControlVector, ctx: LocalContext, L):
    """Mean-variance risk L sqrt(QV) - excess drift, without the pricing rate."""
    _, qv = instantaneous_moments(pi, c, ctx, 0.0)
    return L * np.sqrt(qv) - pi * (ctx.mu - ctx.r)


def girsanov_kernel(c: ControlVector, ctx: LocalContext, L, tol: float = ATTAINABLE_TOL) -> GirsanovKernel:
    """Least favourable pricing kernel (psi, phi) for the controls ``c``.

    Nodes with residual risk below ``tol`` (or L = theta, or no active
    jumps) get the minimal martingale kernel psi = theta sigma / delta,
    phi_j = theta gamma_j / delta and are flagged attainable.
    """
    R = residual_risk(c, ctx)
    k = _loading(ctx, L)
    active = ctx.lam > 0
    any_jump = np.any(active, axis=0)
    attainable = (R < tol) | (k <= 0) | ~any_jump

    theta, delta = ctx.theta, ctx.delta
    with np.errstate(divide="ignore", invalid="ignore"):
        K2 = -0.5 * R / k
        K1 = -(theta / delta) * 2 * K2 + variance_optimal_strategy(c, ctx)
        psi = (c.z - ctx.sigma * K1) / (2 * K2)
        phi = np.where(active, (c.u - ctx.gamma * K1) / (2 * K2), 0.0)
    psi = np.where(attainable, theta * ctx.sigma / delta, psi)
    phi = np.where(attainable, np.where(active, theta * ctx.gamma / delta, 0.0), phi)
    return GirsanovKernel(psi=psi, phi=phi, K1=K1, K2=K2, attainable=attainable)


def kernel_objective(kernel: GirsanovKernel, c: ControlVector, ctx: LocalContext):
    return c.z * kernel.psi + np.sum(c.u * kernel.phi * ctx.lam, axis=0)
