"""Parameter-level sufficient conditions for arbitrage-free and monotone prices.

Each check evaluates its inequality for every source regime i, every target
j with a positive intensity, and every price on an s-grid, and reports the
smallest slack (right-hand side minus left-hand side). A condition passes
when the smallest slack is strictly positive.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .market import RegimeSet, instantaneous_variance, sharpe_theta

GRID_POINTS = 101


@dataclass(frozen=True)
class ConditionReport:
    name: str
    verdict: str  # pass | fail | not-applicable
    margin: float | None
    regime: int | None  # 1-based source regime of the worst case
    target: int | None  # 1-based target regime of the worst case
    s: float | None

    @property
    def passed(self) -> bool:
        return self.verdict != "fail"

    def to_dict(self) -> dict:
        return asdict(self)


def default_s_range(m: RegimeSet):
    return (m.s0 / 5.0, 5.0 * m.s0)


def _grid(m: RegimeSet, s_range):
    if m.constant_intensities:
        return np.array([m.s0])
    lo, hi = s_range if s_range is not None else default_s_range(m)
    return np.linspace(lo, hi, GRID_POINTS)


def _terms(m: RegimeSet, L, s_range):
    """Per (target j, source i, s) arrays: lam, gamma, theta, delta^2, L."""
    s = _grid(m, s_range)
    L = np.broadcast_to(np.asarray(L, dtype=float), (m.n_states,))
    src = np.arange(m.n_states)[:, None]
    lam = m.intensities(src, s[None, :])  # (j, i, s)
    lam = np.broadcast_to(lam, (m.n_states, m.n_states, s.size))
    gamma = np.broadcast_to(m.gamma[:, :, None], lam.shape)
    d2 = np.broadcast_to(instantaneous_variance(m, src, s[None, :]), lam.shape)
    theta = np.broadcast_to(sharpe_theta(m, src, s[None, :]), lam.shape)
    Lb = np.broadcast_to(L[None, :, None], lam.shape)
    return s, lam, gamma, theta, d2, Lb


def _report(name, slack, mask, s):
    if not np.any(mask):
        return ConditionReport(name, "not-applicable", None, None, None, None)
    masked = np.where(mask, slack, np.inf)
    j, i, n = np.unravel_index(np.argmin(masked), masked.shape)
    margin = float(masked[j, i, n])
    return ConditionReport(name, "pass" if margin > 0 else "fail", margin, int(i) + 1, int(j) + 1, float(s[n]))


def check_arbitrage(m: RegimeSet, L, s_range=None) -> ConditionReport:
    """sqrt(L^2 - theta^2) + |gamma_j| sqrt(lam_j) theta / delta < sqrt(lam_j) where lam_j > 0."""
    s, lam, gamma, theta, d2, Lb = _terms(m, L, s_range)
    lhs = np.sqrt(np.maximum(Lb**2 - theta**2, 0.0)) + np.abs(gamma) * np.sqrt(lam) * theta / np.sqrt(d2)
    return _report("arbitrage", np.sqrt(lam) - lhs, lam > 0, s)


def check_monotonicity(m: RegimeSet, L, s_range=None) -> ConditionReport:
    """Comparison-principle conditions, split on whether the jump size is zero.

    With a_j = (delta^2 - gamma_j^2 lam_j) / delta^2:
      gamma_j = 0:  a_j (L^2 - theta^2) < lam_j
      gamma_j != 0: a_j (L^2 - theta^2) + gamma_j^2 lam_j theta^2 / delta^2 < lam_j / 2
    """
    s, lam, gamma, theta, d2, Lb = _terms(m, L, s_range)
    jump_var = gamma**2 * lam
    base = (d2 - jump_var) / d2 * (Lb**2 - theta**2)
    zero = gamma == 0
    slack = np.where(zero, lam - base, lam / 2 - base - jump_var / d2 * theta**2)
    return _report("monotonicity", slack, lam > 0, s)


def check_simple_sufficient(m: RegimeSet, L, s_range=None) -> ConditionReport:
    """theta^2 < L^2 < lam_j / 2 for every positive intensity."""
    s, lam, gamma, theta, d2, Lb = _terms(m, L, s_range)
    slack = np.minimum(Lb**2 - theta**2, lam / 2 - Lb**2)
    return _report("simple_sufficient", slack, lam > 0, s)


def check_all(m: RegimeSet, L, s_range=None) -> dict:
    return {r.name: r for r in (check_arbitrage(m, L, s_range), check_monotonicity(m, L, s_range),
                                check_simple_sufficient(m, L, s_range))}


def report_json(reports: dict) -> str:
    return json.dumps({k: v.to_dict() for k, v in reports.items()}, indent=2, sort_keys=True)


def report_text(reports: dict) -> str:
    lines = []
    for r in reports.values():
        where = "" if r.margin is None else f" (min slack {r.margin:.6g} at regime {r.regime}->{r.target}, s={r.s:g})"
        lines.append(f"{r.name}: {r.verdict}{where}")
    return "\n".join(lines)
