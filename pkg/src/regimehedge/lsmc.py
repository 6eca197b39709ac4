"""Least-squares Monte Carlo solver for the pricing BSDE.

The backward recursion on a grid t_0 < ... < t_K is

    Z_k   = E[Y_{k+1} dW_k | S_k, J_k] / h
    U_j,k = E[Y_{k+1} dN~_j,k | S_k, J_k] / (lambda_j h)
    Y_k   = (E[Y_{k+1} | S_k, J_k] - f(Z_k, U_k) h) / (1 + r h)

with f the pricing rate of :mod:`regimehedge.generator`. Conditional
expectations are polynomial regressions in S fitted separately per regime.
For Z and U the response is centred by the fitted E[Y_{k+1} | S_k, J_k]
first; the increments have zero conditional mean, so this changes only the
noise, not the target.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from . import generator as gen
from .market import PathBundle, RegimeSet, simulate_paths

ATTAINABLE_R = 1e-8
COND_MAX = 1e13


class RegressionError(RuntimeError):
    pass


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class ClaimSpec:
    """Terminal payoff F(S(T), J(T)).

    ``kind`` is one of call, put, digital, stock, constant, tabulated.
    Tabulated claims interpolate ``values`` (one row per regime, or a single
    row) over ``grid`` and hold the end values flat outside it.
    """

    kind: str
    strike: float = 0.0
    amount: float = 1.0
    grid: tuple | None = None
    values: tuple | None = None

    def __post_init__(self):
        if self.kind not in {"call", "put", "digital", "stock", "constant", "tabulated"}:
            raise ValueError(f"unknown claim kind {self.kind!r}")
        if self.kind == "tabulated" and (self.grid is None or self.values is None):
            raise ValueError("tabulated claims need grid and values")

    def payoff(self, s, regime=None):
        s = np.asarray(s, dtype=float)
        a = self.amount
        if self.kind == "call":
            return a * np.maximum(s - self.strike, 0.0)
        if self.kind == "put":
            return a * np.maximum(self.strike - s, 0.0)
        if self.kind == "digital":
            return a * (s > self.strike).astype(float)
        if self.kind == "stock":
            return a * s
        if self.kind == "constant":
            return np.full_like(s, a)
        grid = np.asarray(self.grid, dtype=float)
        vals = np.atleast_2d(np.asarray(self.values, dtype=float))
        if vals.shape[0] == 1 or regime is None:
            return a * np.interp(s, grid, vals[0])
        regime = np.broadcast_to(np.asarray(regime), s.shape)
        out = np.empty_like(s)
        for i in range(vals.shape[0]):
            sel = regime == i
            out[sel] = np.interp(s[sel], grid, vals[i])
        return a * out

    @property
    def lipschitz(self) -> float:
        if self.kind in ("call", "put", "stock"):
            return abs(self.amount)
        if self.kind == "tabulated":
            grid = np.asarray(self.grid, dtype=float)
            vals = np.atleast_2d(np.asarray(self.values, dtype=float))
            return float(np.max(np.abs(np.diff(vals, axis=1) / np.diff(grid)))) * abs(self.amount)
        return 0.0

    def reference_level(self, s0: float) -> float:
        return self.strike if self.kind in ("call", "put", "digital") and self.strike > 0 else s0

    def label(self) -> str:
        if self.kind in ("call", "put", "digital"):
            return f"{self.kind}:{self.strike:g}"
        return self.kind


def parse_claim(text: str) -> ClaimSpec:
    """Parse ``call:100``, ``put:90``, ``digital:110``, ``stock`` or ``constant:5``."""
    kind, _, arg = text.partition(":")
    kind = kind.strip().lower()
    if kind in ("call", "put", "digital"):
        if not arg:
            raise ValueError(f"claim {text!r} needs a strike")
        return ClaimSpec(kind, strike=float(arg))
    if kind == "constant":
        return ClaimSpec("constant", amount=float(arg or 1.0))
    if kind == "stock":
        return ClaimSpec("stock")
    raise ValueError(f"unknown claim {text!r}")


@dataclass(frozen=True)
class LsmcConfig:
    n_paths: int = 200_000
    n_steps: int = 50
    degree: int = 3
    ridge: float = 1e-8
    seed: int = 0
    winsor: float = 1e-3
    threads: int = 1
    backend: str | None = None

    def __post_init__(self):
        if self.n_steps < 1 or self.degree < 0 or self.ridge < 0 or not 0 <= self.winsor < 0.5:
            raise ValueError("invalid LSMC configuration")
        if self.n_paths < 10 * (self.degree + 1):
            raise ValueError("n_paths must be at least 10 * (degree + 1)")


def basis(x, degree: int) -> np.ndarray:
    return np.vander(np.asarray(x, dtype=float), degree + 1, increasing=True)


def _solve_normal(X, V, ridge: float, where: str):
    gram = X.T @ X
    # intercept left unpenalised so constant responses are reproduced exactly
    idx = np.arange(1, gram.shape[0])
    gram[idx, idx] += ridge * X.shape[0]
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > COND_MAX:
        raise RegressionError(f"rank-deficient regression at {where} (cond={cond:.3g})")
    try:
        return cho_solve(cho_factor(gram), X.T @ V)
    except LinAlgError:
        raise RegressionError(f"rank-deficient regression at {where}") from None


def regress(s, v, degree: int = 3, ridge: float = 0.0, where: str = "regress"):
    """Least-squares coefficients of ``v`` on {1, s, ..., s^degree}.

    ``v`` may hold several responses as columns. The fit is done on s scaled
    by its largest magnitude and the coefficients are mapped back to powers
    of the raw s.
    """
    s = np.asarray(s, dtype=float)
    scale = float(np.max(np.abs(s))) or 1.0
    coef = _solve_normal(basis(s / scale, degree), np.asarray(v, dtype=float), ridge, where)
    powers = scale ** np.arange(degree + 1, dtype=float)
    return coef / (powers if coef.ndim == 1 else powers[:, None])


def _winsorize(V, q: float):
    if q <= 0 or V.shape[0] < 1000:
        return V
    lo, hi = np.quantile(V, [q, 1 - q], axis=0)
    return np.clip(V, lo, hi)


def _effective_degree(x, n: int, degree: int) -> int:
    if n == 0 or np.ptp(x) == 0:
        return 0
    return max(0, min(degree, n // 10 - 1, len(np.unique(x[: 10 * (degree + 1)])) - 1 if n < 64 else degree))


@dataclass
class StepResult:
    y: np.ndarray
    z: np.ndarray
    u: np.ndarray
    um: np.ndarray | None
    f: np.ndarray
    coef: np.ndarray
    diag: dict


@dataclass
class MortalityStep:
    """Mortality inputs of one backward step (see :mod:`regimehedge.insurance`)."""

    alive: np.ndarray
    dDtilde: np.ndarray
    rate: float
    feature: np.ndarray


def backward_step(k: int, paths: PathBundle, y_next, m: RegimeSet, L: gen.SharpeTarget,
                  config: LsmcConfig, scale: float, mortality: MortalityStep | None = None) -> StepResult:
    """One step of the recursion: regress, then evaluate the driver per node.

    Groups are regimes, or (regime, alive) pairs when ``mortality`` is given.
    """
    n_states = m.n_states
    h = paths.times[k + 1] - paths.times[k]
    s = paths.s[:, k]
    regime = paths.regime[:, k]
    lam = m.intensities(regime, s)  # (I, P)
    dNt = (paths.dN[:, k, :] - paths.compensator[:, k, :]).T  # (I, P)
    n_ctrl = 1 + n_states + (mortality is not None)

    incs = np.empty((len(s), n_ctrl))
    incs[:, 0] = paths.dW[:, k] / h
    with np.errstate(divide="ignore", invalid="ignore"):
        incs[:, 1 : 1 + n_states] = np.where(lam > 0, dNt / (lam * h), 0.0).T
    if mortality is not None:
        alive = mortality.alive
        rate = mortality.rate
        incs[:, -1] = np.where(alive & (rate > 0), mortality.dDtilde / (rate * h) if rate > 0 else 0.0, 0.0)
        group = np.where(alive, regime, n_states + regime)
        x = np.where(alive, s, mortality.feature) / scale
        n_groups = 2 * n_states
    else:
        group = regime
        x = s / scale
        n_groups = n_states

    d = config.degree
    coef = np.zeros((n_groups, 1 + n_ctrl, d + 1))
    ey = np.zeros(len(s))
    ctrl = np.zeros((len(s), n_ctrl))
    degrees = {}
    for g in range(n_groups):
        idx = np.flatnonzero(group == g)
        if idx.size == 0:
            continue
        xg = x[idx]
        dg = _effective_degree(xg, idx.size, d)
        degrees[g] = dg
        X = basis(xg, dg)
        where = f"step {k}, group {g}"
        c_ey = _solve_normal(X, y_next[idx], config.ridge, where)
        ey[idx] = X @ c_ey
        resp = (y_next[idx] - ey[idx])[:, None] * incs[idx]
        c_ctrl = _solve_normal(X, _winsorize(resp, config.winsor), config.ridge, where)
        ctrl[idx] = X @ c_ctrl
        coef[g, 0, : dg + 1] = c_ey
        coef[g, 1:, : dg + 1] = c_ctrl.T

    z = ctrl[:, 0]
    u = np.where(lam > 0, ctrl[:, 1 : 1 + n_states].T, 0.0)
    ctx = m.context(regime, s)
    L_nodes = L.at(regime)
    if mortality is not None:
        um = np.where(mortality.alive, ctrl[:, -1], 0.0)
        extra = um**2 * (mortality.rate * mortality.alive)
    else:
        um, extra = None, 0.0
    c = gen.ControlVector(z=z, u=u)
    f = gen.pricing_rate(c, ctx, L_nodes, extra)
    r = m.r[regime]
    y = (ey - f * h) / (1.0 + r * h)

    R = gen.residual_risk(c, ctx, extra)
    risky = R > ATTAINABLE_R
    sharpe_err = 0.0
    k_load = np.sqrt(np.maximum(L_nodes**2 - ctx.theta**2, 0.0))
    check = risky & (k_load > 0)
    if np.any(check):
        # extended precision: the drift cancels terms of size |pi~ (mu - r)|
        # against a remainder of size R, so float64 loses digits as R -> 0
        def sub(a):
            return np.asarray(a)[..., check].astype(np.longdouble)

        c_sub = gen.ControlVector(z=sub(z), u=sub(u))
        ctx_sub = gen.LocalContext(*(sub(np.broadcast_to(v, lam.shape if v.ndim == 2 else z.shape))
                                     for v in (ctx.r, ctx.mu, ctx.sigma, ctx.gamma, ctx.lam)))
        ex_sub = sub(extra) if mortality is not None else 0.0
        L_sub = sub(L_nodes)
        f_sub = gen.pricing_rate(c_sub, ctx_sub, L_sub, ex_sub)
        pi = gen.optimal_strategy(c_sub, ctx_sub, L_sub, ex_sub)
        drift, qv = gen.instantaneous_moments(pi, c_sub, ctx_sub, f_sub, ex_sub)
        sharpe_err = float(np.max(np.abs(drift / np.sqrt(qv) - L_sub)))
    small_u = (np.abs(u) < ATTAINABLE_R) & (lam > 0)
    diag = {
        "step": k,
        "mean_R": float(R.mean()),
        "attainable_fraction": float(1.0 - risky.mean()),
        "small_U_fraction": float(small_u.sum() / max(1, (lam > 0).sum())),
        "sharpe_identity_error": sharpe_err,
        "degrees": degrees,
    }
    return StepResult(y=y, z=z, u=u, um=um, f=f, coef=coef, diag=diag)


@dataclass
class BsdeSolution:
    """Regression representation of (Y, Z, U) on the simulation grid.

    ``coef[k, g, 0]`` fits E[Y_{k+1} | S_k] and ``coef[k, g, 1 + c]`` the
    controls (Z, U_1..U_I[, U_m]) as polynomials in S_k / scale for group g.
    """

    times: np.ndarray
    scale: float
    coef: np.ndarray
    model: RegimeSet
    L: gen.SharpeTarget
    claim: ClaimSpec
    config: LsmcConfig
    y0: float
    z0: float
    u0: np.ndarray
    std_error: float
    y0_forward: float
    diagnostics: list = field(default_factory=list)
    checks: dict = field(default_factory=dict)
    mortality: object | None = None
    s_bounds: np.ndarray | None = None  # (K+1, 2) training range of S per step
    pathwise: np.ndarray | None = field(default=None, repr=False)  # per-path backward values at t_0

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    def controls(self, k: int, s, regime, alive=None, feature=None):
        """(Y, Z, U, U_m) at step ``k`` for nodes (s, regime)."""
        m = self.model
        s = np.asarray(s, dtype=float)
        regime = np.broadcast_to(np.asarray(regime), s.shape)
        if k >= self.n_steps:
            y = self.claim.payoff(s, regime)
            zeros = np.zeros_like(s)
            return y, zeros, np.zeros((m.n_states,) + s.shape), None
        h = self.times[k + 1] - self.times[k]
        n_states = m.n_states
        if alive is None:
            group, x = regime, s / self.scale
        else:
            group = np.where(alive, regime, n_states + regime)
            x = np.where(alive, s, feature) / self.scale
        X = basis(x, self.coef.shape[-1] - 1)
        vals = np.einsum("nd,ncd->nc", X, self.coef[k][group])
        ey, z = vals[:, 0], vals[:, 1]
        lam = m.intensities(regime, s)
        u = np.where(lam > 0, vals[:, 2 : 2 + n_states].T, 0.0)
        extra, um = 0.0, None
        if alive is not None:
            um = np.where(alive, vals[:, -1], 0.0)
            extra = um**2 * (self.mortality.average_rate(self.times[k], self.times[k + 1]) * alive)
        ctx = m.context(regime, s)
        f = gen.pricing_rate(gen.ControlVector(z=z, u=u), ctx, self.L.at(regime), extra)
        y = (ey - f * h) / (1.0 + m.r[regime] * h)
        return y, z, u, um

    def summary(self) -> dict:
        return {
            "price": self.y0,
            "std_error": self.std_error,
            "forward_estimate": self.y0_forward,
            "Z0": self.z0,
            "U0": [float(v) for v in self.u0],
            "claim": self.claim.label(),
            "L": [float(v) for v in self.L.L],
            "config": asdict(self.config),
            "diagnostics": {
                "max_sharpe_identity_error": max(d["sharpe_identity_error"] for d in self.diagnostics),
                "mean_R": [d["mean_R"] for d in self.diagnostics],
                "attainable_fraction": [d["attainable_fraction"] for d in self.diagnostics],
                "small_U_fraction": [d["small_U_fraction"] for d in self.diagnostics],
            },
            "checks": self.checks,
        }

    def to_csv(self, path) -> None:
        """Per-step coefficient table: one row per (step, group, response)."""
        names = ["EY", "Z"] + [f"U{j + 1}" for j in range(self.model.n_states)]
        if self.coef.shape[2] > len(names):
            names.append("Um")
        deg = self.coef.shape[-1] - 1
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "t", "group", "response", "scale"] + [f"c{p}" for p in range(deg + 1)])
            for k in range(self.coef.shape[0]):
                for g in range(self.coef.shape[1]):
                    for c, name in enumerate(names):
                        w.writerow([k, repr(float(self.times[k])), g + 1, name, self.scale]
                                   + [repr(float(v)) for v in self.coef[k, g, c]])


def _as_target(m: RegimeSet, L, eps_L: float) -> gen.SharpeTarget:
    if isinstance(L, gen.SharpeTarget):
        return L
    return gen.sharpe_target(m, L, eps=eps_L)


def sweep(paths: PathBundle, m: RegimeSet, claim: ClaimSpec, L: gen.SharpeTarget, config: LsmcConfig,
          terminal=None, mortality_steps=None):
    """Full backward sweep; returns (coef, y0 nodes, pathwise forward values, diagnostics, step results at 0)."""
    K = paths.n_steps
    scale = float(paths.s[0, 0])
    y = claim.payoff(paths.s[:, -1], paths.regime[:, -1]) if terminal is None else terminal
    pathwise = y.copy()
    n_ctrl = 1 + m.n_states + (mortality_steps is not None)
    n_groups = m.n_states * (2 if mortality_steps is not None else 1)
    coef = np.zeros((K, n_groups, 1 + n_ctrl, config.degree + 1))
    diagnostics = []
    step = None
    for k in range(K - 1, -1, -1):
        mort = mortality_steps(k) if mortality_steps is not None else None
        try:
            step = backward_step(k, paths, y, m, L, config, scale, mort)
        except RegressionError:
            raise
        except (FloatingPointError, ValueError) as exc:
            raise SolverError(f"backward step {k} failed: {exc}") from exc
        coef[k] = step.coef
        h = paths.times[k + 1] - paths.times[k]
        r = m.r[paths.regime[:, k]]
        pathwise = (pathwise - step.f * h) / (1.0 + r * h)
        y = step.y
        diagnostics.append(step.diag)
        if not np.all(np.isfinite(y)):
            raise SolverError(f"non-finite values at step {k}")
    diagnostics.reverse()
    return coef, y, pathwise, diagnostics, step, scale


def price_lsmc(m: RegimeSet, claim: ClaimSpec, L, config: LsmcConfig = LsmcConfig(),
               paths: PathBundle | None = None, eps_L: float = 1e-6, check: bool = True) -> BsdeSolution:
    """Price ``claim`` at (m.s0, m.j0) by solving the BSDE backward on simulated paths."""
    target = _as_target(m, L, eps_L)
    checks = {}
    if check:
        from . import validity

        arb = validity.check_arbitrage(m, target.L)
        mono = validity.check_monotonicity(m, target.L)
        checks = {"arbitrage": arb.verdict, "monotonicity": mono.verdict}
        if arb.verdict == "fail":
            warnings.warn("arbitrage-free condition fails; the price may admit arbitrage", stacklevel=2)
        elif mono.verdict == "fail":
            warnings.warn("monotonicity condition fails; comparison may not hold", stacklevel=2)
    if paths is None:
        paths = simulate_paths(m, n_steps=config.n_steps, n_paths=config.n_paths, seed=config.seed,
                               threads=config.threads, backend=config.backend)
    coef, y, pathwise, diags, step0, scale = sweep(paths, m, claim, target, config)
    n = len(pathwise)
    return BsdeSolution(
        times=paths.times,
        scale=scale,
        coef=coef,
        model=m,
        L=target,
        claim=claim,
        config=config,
        y0=float(y.mean()),
        z0=float(step0.z.mean()),
        u0=step0.u.mean(axis=1),
        std_error=float(pathwise.std(ddof=1) / np.sqrt(n)),
        y0_forward=float(pathwise.mean()),
        diagnostics=diags,
        checks=checks,
        s_bounds=np.stack([paths.s.min(axis=0), paths.s.max(axis=0)], axis=1),
        pathwise=pathwise,
    )


def reweight_check(solution: BsdeSolution, paths: PathBundle, max_negative: float = 1e-3):
    """Price the claim as E[M(T) exp(-int r) xi] under the solution's worst-case kernel.

    Returns (price, std_error, fraction of paths with a negative density factor).
    """
    m = solution.model
    density = np.ones(paths.n_paths)
    negative = np.zeros(paths.n_paths, dtype=bool)
    dNt = paths.dN - paths.compensator
    for k in range(paths.n_steps):
        s, regime = paths.s[:, k], paths.regime[:, k]
        _, z, u, _ = solution.controls(k, s, regime)
        ker = gen.girsanov_kernel(gen.ControlVector(z=z, u=u), m.context(regime, s), solution.L.at(regime))
        factor = 1.0 - ker.psi * paths.dW[:, k] - np.sum(ker.phi * dNt[:, k, :].T, axis=0)
        negative |= factor <= 0
        density *= factor
    frac = float(negative.mean())
    if frac > max_negative:
        raise SolverError(f"{frac:.3%} of paths have a negative density factor")
    disc = np.exp(-paths.int_r.sum(axis=1))
    vals = density * disc * solution.claim.payoff(paths.s[:, -1], paths.regime[:, -1])
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(len(vals))), frac
