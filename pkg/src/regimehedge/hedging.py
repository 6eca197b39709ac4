"""Forward backtest of hedging strategies along simulated paths.

The hedger starts with the model price X_0 = Y_0, holds pi_k in the stock
over [t_k, t_{k+1}] and the rest in the bank account. The surplus is
X_k - Y_k with Y_k read off the solved representation (regression
functions or PIDE surface), so its increments carry the fitting error of
that representation as well as the hedging error.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import generator as gen
from .lsmc import BsdeSolution
from .market import PathBundle, RegimeSet
from .pide import PideGrid


@dataclass
class RegimeStats:
    regime: int  # 1-based
    n: int
    drift: float
    drift_se: float
    qv: float
    qv_se: float
    sharpe: float
    sharpe_se: float
    model_sharpe: float
    model_sharpe_se: float
    target_L: float


@dataclass
class BacktestReport:
    strategy: str
    regimes: list
    terminal_mean: float
    terminal_var: float
    terminal_mean_se: float
    n_extrapolated: int
    terminal: np.ndarray = field(repr=False)

    def to_csv(self, path) -> None:
        names = list(RegimeStats.__dataclass_fields__)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["strategy"] + names + ["terminal_mean", "terminal_var", "n_extrapolated"])
            for r in self.regimes:
                w.writerow([self.strategy] + [getattr(r, k) for k in names]
                           + [self.terminal_mean, self.terminal_var, self.n_extrapolated])

    def summary(self) -> dict:
        return {
            "strategy": self.strategy,
            "terminal_mean": self.terminal_mean,
            "terminal_var": self.terminal_var,
            "terminal_mean_se": self.terminal_mean_se,
            "n_extrapolated": self.n_extrapolated,
            "regimes": [vars(r) for r in self.regimes],
        }


def _node_controls(solution, k, t, s, regime, n_steps):
    if isinstance(solution, PideGrid):
        return solution.controls(t, s, regime)
    y, z, u, _ = solution.controls(k, s, regime)
    return y, z, u


def _outside(solution, k, t, s):
    if isinstance(solution, PideGrid):
        return (s < solution.s[0]) | (s > solution.s[-1])
    if solution.s_bounds is None:
        return np.zeros(s.shape, dtype=bool)
    lo, hi = solution.s_bounds[min(k, len(solution.s_bounds) - 1)]
    return (s < lo) | (s > hi)


def _strategy(name, c, ctx, L, custom, k, t, s, regime):
    if name == "variance_minimal":
        return gen.variance_optimal_strategy(c, ctx)
    if name == "optimal":
        pi = gen.variance_optimal_strategy(c, ctx)
        k_load = np.sqrt(np.maximum(L**2 - ctx.theta**2, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            loading = np.where(k_load > 0, ctx.theta / (ctx.delta * k_load), 0.0)
        return pi + loading * gen.residual_risk(c, ctx)
    if name == "custom":
        return np.broadcast_to(np.asarray(custom(k, t, s, regime), dtype=float), s.shape)
    raise ValueError(f"unknown strategy {name!r}")


def backtest(paths: PathBundle, solution: BsdeSolution | PideGrid, m: RegimeSet, L=None,
             strategy: str = "optimal", custom=None, claim=None) -> BacktestReport:
    """Run ``strategy`` along ``paths`` against the price process of ``solution``.

    ``custom`` is a callable (k, t, s, regime) -> stock amount, used when
    ``strategy == "custom"``.
    """
    target = solution.L if L is None else (L if isinstance(L, gen.SharpeTarget) else gen.sharpe_target(m, L, eps=0))
    claim = claim or solution.claim
    K = paths.n_steps
    P = paths.n_paths
    times = paths.times

    y0, *_ = _node_controls(solution, 0, 0.0, paths.s[:, 0], paths.regime[:, 0], K)
    x = y0.copy()
    y = y0
    incs = np.empty((P, K))
    model_sd = np.empty((P, K))
    n_out = 0
    for k in range(K):
        s, regime = paths.s[:, k], paths.regime[:, k]
        h = times[k + 1] - times[k]
        if k > 0:
            y, z, u = _node_controls(solution, k, times[k], s, regime, K)
        else:
            _, z, u = _node_controls(solution, 0, 0.0, s, regime, K)
        n_out += int(_outside(solution, k, times[k], s).sum())
        ctx = m.context(regime, s)
        c = gen.ControlVector(z=z, u=u)
        pi = _strategy(strategy, c, ctx, target.at(regime), custom, k, times[k], s, regime)

        growth = np.exp(paths.int_r[:, k])
        x_next = (x - pi) * growth + pi * paths.s[:, k + 1] / s
        if k + 1 < K:
            y_next, *_ = _node_controls(solution, k + 1, times[k + 1], paths.s[:, k + 1], paths.regime[:, k + 1], K)
        else:
            y_next = claim.payoff(paths.s[:, K], paths.regime[:, K])
        # surplus increment in units of time-t_k money
        inc = (x_next - y_next) / growth - (x - y)
        incs[:, k] = inc
        _, qv = gen.instantaneous_moments(pi, c, ctx, 0.0)
        model_sd[:, k] = np.sqrt(qv) * h
        x = x_next
        y = y_next

    terminal = x - y
    h_all = np.diff(times)
    regimes = []
    for i in range(m.n_states):
        sel = paths.regime[:, :-1] == i
        n = int(sel.sum())
        if n < 2:
            continue
        hh = np.broadcast_to(h_all, sel.shape)[sel]
        a = incs[sel] / hh
        q = incs[sel] ** 2 / hh
        drift, qv = a.mean(), q.mean()
        drift_se, qv_se = a.std(ddof=1) / np.sqrt(n), q.std(ddof=1) / np.sqrt(n)
        sharpe = drift / np.sqrt(qv) if qv > 0 else np.nan
        # delta method for drift / sqrt(qv)
        cov = np.cov(a, q) / n
        grad = np.array([1.0 / np.sqrt(qv), -0.5 * drift * qv**-1.5]) if qv > 0 else np.zeros(2)
        sharpe_se = float(np.sqrt(grad @ cov @ grad))
        # ratio estimator sum(inc) / sum(sqrt(QV_model) h): equals L when every
        # node earns L times its model risk, without weighting tiny-QV nodes up
        sd = model_sd[sel]
        ratio = incs[sel].sum() / sd.sum() if sd.sum() > 0 else np.nan
        ratio_se = (incs[sel] - ratio * sd).std(ddof=1) * np.sqrt(n) / sd.sum() if sd.sum() > 0 else np.nan
        regimes.append(RegimeStats(
            regime=i + 1, n=n, drift=float(drift), drift_se=float(drift_se), qv=float(qv), qv_se=float(qv_se),
            sharpe=float(sharpe), sharpe_se=sharpe_se,
            model_sharpe=float(ratio), model_sharpe_se=float(ratio_se),
            target_L=float(target.L[i]),
        ))
    return BacktestReport(
        strategy=strategy,
        regimes=regimes,
        terminal_mean=float(terminal.mean()),
        terminal_var=float(terminal.var(ddof=1)),
        terminal_mean_se=float(terminal.std(ddof=1) / np.sqrt(P)),
        n_extrapolated=n_out,
        terminal=terminal,
    )


@dataclass(frozen=True)
class StrategyComparison:
    mean_diff: float
    mean_pvalue: float
    var_ratio: float
    var_pvalue: float


def compare_strategies(a: BacktestReport, b: BacktestReport) -> StrategyComparison:
    """One-sided tests that ``a`` has a higher mean and a higher variance of
    terminal surplus than ``b`` on the same paths.

    The mean test is a paired t-test. The variance test is Pitman-Morgan:
    var A > var B exactly when A + B and A - B are positively correlated.
    """
    A, B = a.terminal, b.terminal
    t = stats.ttest_rel(A, B, alternative="greater")
    r = stats.pearsonr(A + B, A - B, alternative="greater")
    return StrategyComparison(
        mean_diff=float(np.mean(A - B)),
        mean_pvalue=float(t.pvalue),
        var_ratio=float(A.var(ddof=1) / B.var(ddof=1)),
        var_pvalue=float(r.pvalue),
    )
