"""Finite-difference solver for the regime-coupled pricing PIDE.

Works in x = log s and time to maturity. Per regime i the local operator

    0.5 sigma^2 V_xx + (b - 0.5 sigma^2) V_x - (r + sum_j lam^_j) V,
    b = mu - sum_j gamma_j lam_j - sigma^2 theta / delta,
    lam^_j = lam_j (1 - gamma_j theta / delta),

is treated implicitly. The regime coupling sum_j lam^_j V(s(1 + gamma_j), j)
and the risk loading sqrt(L^2 - theta^2) R(Z, U) are explicit. The first
steps are implicit Euler (Rannacher smoothing of the kink in the payoff),
then Crank-Nicolson with the explicit terms extrapolated by Adams-Bashforth 2.
Boundary rows impose V_ss = 0 through linear extrapolation in s.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.linalg import solve_banded

from . import generator as gen
from .lsmc import ClaimSpec
from .market import ModelError, RegimeSet

RANNACHER_STEPS = 4


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class PideConfig:
    n_space: int = 401
    n_time: int = 400
    s_min: float | None = None
    s_max: float | None = None

    def __post_init__(self):
        if self.n_space < 5 or self.n_time < 1:
            raise ValueError("grid too small")


@dataclass
class PideGrid:
    """Solved surface. ``values[n, i, :]`` is V at time ``times[n]`` in regime i."""

    s: np.ndarray
    times: np.ndarray
    values: np.ndarray
    model: RegimeSet
    L: gen.SharpeTarget
    claim: ClaimSpec
    price: float
    diagnostics: dict = field(default_factory=dict)

    @property
    def x(self):
        return np.log(self.s)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    def _time_index(self, t: float) -> int:
        return int(np.clip(np.rint(t / self.dt), 0, len(self.times) - 1))

    def value(self, t: float, s, regime):
        """V(t, s, regime) interpolated in s at the nearest time level."""
        n = self._time_index(t)
        return _eval_rows(self.x, self.values[n], np.log(np.asarray(s, dtype=float)), np.asarray(regime))

    def controls(self, t: float, s, regime):
        """(Y, Z, U) at (t, s, regime) with Z = V_s s sigma and U_j the level jumps."""
        n = self._time_index(t)
        s = np.asarray(s, dtype=float)
        regime = np.broadcast_to(np.asarray(regime), s.shape)
        m = self.model
        surf = self.values[n]
        xq = np.log(s)
        y = _eval_rows(self.x, surf, xq, regime)
        vx = _eval_rows(self.x, np.gradient(surf, self.x, axis=1), xq, regime)
        z = vx * m.sigma[regime]
        u = np.zeros((m.n_states,) + s.shape)
        for j in range(m.n_states):
            shifted = xq + np.log1p(m.gamma[j, regime])
            u[j] = np.where(regime == j, 0.0, _eval_rows(self.x, surf[j : j + 1], shifted, 0) - y)
        return y, z, u

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "s", "regime", "V"])
            for n, t in enumerate(self.times):
                for i in range(self.values.shape[1]):
                    for sv, v in zip(self.s, self.values[n, i]):
                        w.writerow([repr(float(t)), repr(float(sv)), i + 1, repr(float(v))])


def _interp_linear_ext(x, v, xq):
    """Monotone cubic inside [x_0, x_N], linear in s outside."""
    with np.errstate(over="ignore", invalid="ignore"):
        out = PchipInterpolator(x, v, extrapolate=False)(np.clip(xq, x[0], x[-1]))
    sq = np.exp(xq)
    s0, s1, sn1, sn = np.exp(x[[0, 1]]).tolist() + np.exp(x[[-2, -1]]).tolist()
    lo = xq < x[0]
    hi = xq > x[-1]
    if np.any(lo):
        out[lo] = v[0] + (v[1] - v[0]) / (s1 - s0) * (sq[lo] - s0)
    if np.any(hi):
        out[hi] = v[-1] + (v[-1] - v[-2]) / (sn - sn1) * (sq[hi] - sn)
    return out


def _eval_rows(x, surf, xq, regime):
    xq = np.asarray(xq, dtype=float)
    regime = np.broadcast_to(np.asarray(regime), xq.shape)
    out = np.empty_like(xq)
    for i in np.unique(regime):
        sel = regime == i
        out[sel] = _interp_linear_ext(x, surf[i], xq[sel])
    return out


def default_domain(m: RegimeSet, claim: ClaimSpec):
    q = claim.reference_level(m.s0)
    return q / 5.0, 5.0 * q


def _space_grid(m: RegimeSet, claim: ClaimSpec, cfg: PideConfig):
    lo, hi = default_domain(m, claim)
    lo = cfg.s_min if cfg.s_min is not None else lo
    hi = cfg.s_max if cfg.s_max is not None else hi
    n = cfg.n_space
    q = claim.reference_level(m.s0)
    if claim.kind in ("call", "put", "digital") and lo < q < hi:
        # put the strike on a node: uniform log spacing on each side
        xl, xq, xh = np.log([lo, q, hi])
        n_left = int(round((n - 1) * (xq - xl) / (xh - xl)))
        n_left = min(max(n_left, 2), n - 3)
        return np.concatenate([np.linspace(xl, xq, n_left + 1)[:-1], np.linspace(xq, xh, n - n_left)])
    return np.linspace(np.log(lo), np.log(hi), n)


def _local_operator(x, diff, conv, decay):
    """Banded (2, 2) form of diff V_xx + conv V_x - decay V on a non-uniform grid.

    Interior rows only; boundary rows are filled by the caller.
    """
    n = len(x)
    hm = np.diff(x)[:-1]
    hp = np.diff(x)[1:]
    lower = (2 * diff - conv * hp) / (hm * (hm + hp))
    upper = (2 * diff + conv * hm) / (hp * (hm + hp))
    mid = -(lower + upper) - decay
    ab = np.zeros((5, n))
    ab[2, 1:-1] = mid
    ab[1, 2:] = upper  # row r, column r+1
    ab[3, :-2] = lower  # row r, column r-1
    return ab


def _system(ab_op, weight, dt, s):
    """(I - weight dt A) in banded form with linear-in-s boundary rows."""
    n = ab_op.shape[1]
    ab = -weight * dt * ab_op
    ab[2] += 1.0
    # row 0: V_0 - w1 V_1 - w2 V_2 = 0 ; row n-1 likewise
    w = (s[0] - s[2]) / (s[1] - s[2])
    ab[2, 0], ab[1, 1], ab[0, 2] = 1.0, -w, -(1.0 - w)
    w = (s[-1] - s[-3]) / (s[-2] - s[-3])
    ab[2, n - 1], ab[3, n - 2], ab[4, n - 3] = 1.0, -w, -(1.0 - w)
    return ab


def _apply(ab_op, v):
    """A v for interior rows (boundary rows zero)."""
    out = ab_op[2] * v
    out[:-1] += ab_op[1, 1:] * v[1:]
    out[1:] += ab_op[3, :-1] * v[:-1]
    out[0] = out[-1] = 0.0
    return out


def price_pide(m: RegimeSet, claim: ClaimSpec, L, config: PideConfig = PideConfig(), eps_L: float = 1e-6) -> PideGrid:
    """Solve the PIDE system backward from the payoff and return the surface."""
    if not m.constant_intensities:
        raise ModelError("the PIDE solver supports constant intensities only")
    target = L if isinstance(L, gen.SharpeTarget) else gen.sharpe_target(m, L, eps=eps_L)
    n_states = m.n_states
    x = _space_grid(m, claim, config)
    s = np.exp(x)
    T = m.horizon
    M = config.n_time
    dt = T / M

    lam = m.lam_a  # (target, source)
    regimes = np.arange(n_states)
    ctx = m.context(regimes)
    delta, theta = ctx.delta, ctx.theta
    lam_hat = lam * (1.0 - m.gamma * theta[None, :] / delta[None, :])
    loading = np.sqrt(np.maximum(target.L**2 - theta**2, 0.0))
    shifts = np.log1p(m.gamma)  # (target, source)

    ops = []
    for i in range(n_states):
        b = m.mu[i] - np.sum(m.gamma[:, i] * lam[:, i]) - m.sigma[i] ** 2 * theta[i] / delta[i]
        ops.append(_local_operator(x, 0.5 * m.sigma[i] ** 2, b - 0.5 * m.sigma[i] ** 2,
                                   m.r[i] + np.sum(lam_hat[:, i])))
    systems = {}

    def solve(i, weight, step, rhs):
        key = (i, weight, step)
        if key not in systems:
            systems[key] = _system(ops[i], weight, step, s)
        return solve_banded((2, 2), systems[key], rhs)

    node_ctx = [gen.LocalContext(
        r=np.full(s.size, m.r[i]), mu=np.full(s.size, m.mu[i]), sigma=np.full(s.size, m.sigma[i]),
        gamma=np.repeat(m.gamma[:, i : i + 1], s.size, axis=1), lam=np.repeat(lam[:, i : i + 1], s.size, axis=1),
    ) for i in range(n_states)]

    def explicit(V):
        out = np.empty_like(V)
        vx = np.gradient(V, x, axis=1)
        for i in range(n_states):
            jumped = np.zeros((n_states, s.size))
            for j in range(n_states):
                if j != i and lam[j, i] > 0:
                    jumped[j] = _interp_linear_ext(x, V[j], x + shifts[j, i])
            u = np.where(lam[:, i : i + 1] > 0, jumped - V[i][None, :], 0.0)
            coupling = np.sum(lam_hat[:, i : i + 1] * jumped, axis=0)
            c = gen.ControlVector(z=m.sigma[i] * vx[i], u=u)
            out[i] = coupling + loading[i] * gen.residual_risk(c, node_ctx[i])
        return out

    payoff = np.stack([claim.payoff(s, np.full(s.size, i)) for i in range(n_states)])
    bound = 10.0 * (np.max(np.abs(payoff)) + claim.lipschitz * s[-1] + 1.0)
    values = np.empty((M + 1, n_states, s.size))
    values[M] = payoff
    V = payoff.copy()
    E_prev = None
    n = M
    sub = min(RANNACHER_STEPS, 2 * M)
    # Rannacher: the first time step is covered by `sub` implicit Euler substeps
    # of a fraction of dt, then Crank-Nicolson with AB2
    for h in np.full(sub, dt / sub):
        E = explicit(V)
        rhs = V + h * E
        rhs[:, 0] = rhs[:, -1] = 0.0
        V = np.stack([solve(i, 1.0, h, rhs[i]) for i in range(n_states)])
        _guard(V, bound, dt)
        E_prev = E
    n -= 1
    values[n] = V
    for _ in range(M - 1):
        E = explicit(V)
        ext = 1.5 * E - 0.5 * E_prev
        rhs = [V[i] + 0.5 * dt * _apply(ops[i], V[i]) + dt * ext[i] for i in range(n_states)]
        for i in range(n_states):
            rhs[i][0] = rhs[i][-1] = 0.0
        V = np.stack([solve(i, 0.5, dt, rhs[i]) for i in range(n_states)])
        _guard(V, bound, dt)
        E_prev = E
        n -= 1
        values[n] = V

    times = np.linspace(0.0, T, M + 1)
    grid = PideGrid(s=s, times=times, values=values, model=m, L=target, claim=claim, price=float("nan"))
    grid.price = float(grid.value(0.0, m.s0, m.j0))
    vs = np.abs(np.gradient(values[0], s, axis=1))
    lip = claim.lipschitz
    grid.diagnostics = {
        "max_abs_V_s": float(vs.max()),
        "V_s_within_bound": bool(vs.max() <= 1.1 * lip) if lip > 0 else None,
        "n_space": s.size,
        "n_time": M,
        "s_range": [float(s[0]), float(s[-1])],
    }
    return grid


def _guard(V, bound, dt):
    if not np.all(np.isfinite(V)) or np.max(np.abs(V)) > bound:
        raise DivergenceError(f"PIDE surface left the payoff bound; retry with a time step below {dt / 2:.3g}")


def extract_controls(grid: PideGrid, m: RegimeSet | None = None):
    """Z and U on every grid node.

    Returns Z with shape (times, I, N) and U with shape (times, target, source, N);
    U[:, j, i] is zero for j = i.
    """
    m = m or grid.model
    x = grid.x
    n_states = m.n_states
    vx = np.gradient(grid.values, x, axis=2)
    Z = vx * m.sigma[None, :, None]
    U = np.zeros((len(grid.times), n_states, n_states, x.size))
    for n in range(len(grid.times)):
        for i in range(n_states):
            for j in range(n_states):
                if j != i:
                    U[n, j, i] = _interp_linear_ext(x, grid.values[n, j], x + np.log1p(m.gamma[j, i])) - grid.values[n, i]
    return Z, U
