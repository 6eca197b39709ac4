"""Equity-linked insurance: a mortality jump on top of the regime-switching market.

The policyholder's death time tau has a deterministic piecewise-constant
intensity m(t) and is drawn from its own random stream, independent of the
market. The claim pays F_surv(S(T)) on survival and F_death(S(tau)) at T on
death. Death is resolved on the time grid: a death in (t_k, t_{k+1}] freezes
the benefit feature at S(t_{k+1}).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import generator as gen
from ._kernels_py import uniform_open
from .lsmc import BsdeSolution, ClaimSpec, LsmcConfig, MortalityStep, sweep
from .market import PathBundle, RegimeSet, path_raw_bits, simulate_paths

MORTALITY_STREAM = 1


@dataclass(frozen=True)
class MortalityModel:
    """Piecewise-constant intensity: ``rates[b]`` on [breaks[b], breaks[b+1]), last rate beyond."""

    breaks: tuple
    rates: tuple

    def __post_init__(self):
        b, r = np.asarray(self.breaks, float), np.asarray(self.rates, float)
        if b.size != r.size or b.size == 0 or b[0] != 0 or np.any(np.diff(b) <= 0):
            raise ValueError("breaks must start at 0, increase, and match rates")
        if np.any(r < 0) or not np.all(np.isfinite(r)):
            raise ValueError("mortality intensities must be finite and non-negative")

    @classmethod
    def constant(cls, rate: float) -> "MortalityModel":
        return cls((0.0,), (float(rate),))

    @classmethod
    def from_csv(cls, path, entry_age: float) -> "MortalityModel":
        """Read an age-band table (columns age_from, age_to, intensity) for a policyholder aged ``entry_age``."""
        with open(path, newline="") as fh:
            rows = sorted((float(r["age_from"]), float(r["age_to"]), float(r["intensity"])) for r in csv.DictReader(fh))
        breaks, rates = [0.0], []
        for lo, hi, rate in rows:
            if hi <= entry_age:
                continue
            if not rates:
                rates.append(rate)
            else:
                breaks.append(lo - entry_age)
                rates.append(rate)
        if not rates:
            raise ValueError(f"no band covers age {entry_age}")
        return cls(tuple(breaks), tuple(rates))

    def rate(self, t):
        idx = np.searchsorted(np.asarray(self.breaks), np.asarray(t, float), side="right") - 1
        return np.asarray(self.rates)[idx]

    def cumulative(self, t):
        """int_0^t m(s) ds."""
        b = np.asarray(self.breaks)
        r = np.asarray(self.rates)
        t = np.asarray(t, dtype=float)
        widths = np.clip(t[..., None] - b, 0.0, np.append(np.diff(b), np.inf))
        return widths @ r

    def average_rate(self, t0: float, t1: float) -> float:
        return float((self.cumulative(t1) - self.cumulative(t0)) / (t1 - t0))

    def inverse_cumulative(self, e):
        """Smallest t with cumulative(t) = e (inf if never reached)."""
        b = np.asarray(self.breaks)
        r = np.asarray(self.rates)
        e = np.asarray(e, dtype=float)
        knots = self.cumulative(b)
        idx = np.searchsorted(knots, e, side="right") - 1
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(r[idx] > 0, b[idx] + (e - knots[idx]) / r[idx], np.inf)
        return t


@dataclass(frozen=True)
class InsuranceClaim:
    survival: ClaimSpec
    death: ClaimSpec | None = None

    def payoff(self, s_T, s_tau, alive_T, regime_T=None):
        out = np.where(alive_T, self.survival.payoff(s_T, regime_T), 0.0)
        if self.death is not None:
            out = out + np.where(alive_T, 0.0, self.death.payoff(s_tau, regime_T))
        return out

    def label(self) -> str:
        return f"survival={self.survival.label()}" + (f",death={self.death.label()}" if self.death else "")


def pure_endowment(amount: float = 1.0) -> InsuranceClaim:
    return InsuranceClaim(ClaimSpec("constant", amount=amount))


def insurance_driver(c: gen.ControlVector, ctx: gen.LocalContext, L, m_t, u_m):
    """Driver with the mortality term u_m^2 m(t) added to the residual variance."""
    return gen.driver(c, ctx, L, extra=np.asarray(u_m) ** 2 * m_t)


def insurance_optimal_strategy(c: gen.ControlVector, ctx: gen.LocalContext, L, m_t, u_m):
    return gen.optimal_strategy(c, ctx, L, extra=np.asarray(u_m) ** 2 * m_t)


@dataclass
class DeathTimes:
    tau: np.ndarray
    step: np.ndarray  # index k+1 of the first node at or after tau (K+1 if alive at T)


def simulate_deaths(mortality: MortalityModel, times, n_paths: int, seed: int, path_offset: int = 0) -> DeathTimes:
    raw = path_raw_bits(seed, np.arange(path_offset, path_offset + n_paths), 1, stream=MORTALITY_STREAM)
    tau = mortality.inverse_cumulative(-np.log(uniform_open(raw[:, 0])))
    step = np.searchsorted(times, tau, side="left")
    return DeathTimes(tau=tau, step=np.minimum(step, len(times)))


def price_insurance_lsmc(m: RegimeSet, mortality: MortalityModel, claim: InsuranceClaim, L,
                         config: LsmcConfig = LsmcConfig(), paths: PathBundle | None = None,
                         mortality_seed: int | None = None, eps_L: float = 1e-6) -> BsdeSolution:
    """LSMC price of an equity-linked contract with an extra mortality control U_m."""
    target = L if isinstance(L, gen.SharpeTarget) else gen.sharpe_target(m, L, eps=eps_L)
    if paths is None:
        paths = simulate_paths(m, n_steps=config.n_steps, n_paths=config.n_paths, seed=config.seed,
                               threads=config.threads, backend=config.backend)
    times = paths.times
    K = paths.n_steps
    deaths = simulate_deaths(mortality, times, paths.n_paths,
                             config.seed if mortality_seed is None else mortality_seed)
    alive_T = deaths.step > K
    rows = np.arange(paths.n_paths)
    s_tau = paths.s[rows, np.minimum(deaths.step, K)]
    xi = claim.payoff(paths.s[:, K], s_tau, alive_T, paths.regime[:, K])
    H = mortality.cumulative(times)
    H_tau = mortality.cumulative(np.minimum(deaths.tau, times[-1]))

    def step_inputs(k):
        alive = deaths.tau > times[k]
        died = alive & (deaths.tau <= times[k + 1])
        comp = np.where(alive, np.where(died, H_tau, H[k + 1]) - H[k], 0.0)
        return MortalityStep(
            alive=alive,
            dDtilde=died.astype(float) - comp,
            rate=mortality.average_rate(times[k], times[k + 1]),
            feature=s_tau,
        )

    coef, y, pathwise, diags, step0, scale = sweep(paths, m, claim.survival, target, config,
                                                   terminal=xi, mortality_steps=step_inputs)
    n = len(pathwise)
    return BsdeSolution(
        times=times, scale=scale, coef=coef, model=m, L=target, claim=claim.survival, config=config,
        y0=float(y.mean()), z0=float(step0.z.mean()), u0=step0.u.mean(axis=1),
        std_error=float(pathwise.std(ddof=1) / np.sqrt(n)), y0_forward=float(pathwise.mean()),
        diagnostics=diags, mortality=mortality,
        s_bounds=np.stack([paths.s.min(axis=0), paths.s.max(axis=0)], axis=1),
        pathwise=pathwise,
    )


def expected_discounted_payoff(m: RegimeSet, mortality: MortalityModel, claim: InsuranceClaim,
                               paths: PathBundle, mortality_seed: int):
    """Plain MC estimate of E[exp(-int r) xi] with its standard error (no risk loading)."""
    K = paths.n_steps
    deaths = simulate_deaths(mortality, paths.times, paths.n_paths, mortality_seed)
    alive_T = deaths.step > K
    s_tau = paths.s[np.arange(paths.n_paths), np.minimum(deaths.step, K)]
    vals = np.exp(-paths.int_r.sum(axis=1)) * claim.payoff(paths.s[:, K], s_tau, alive_T, paths.regime[:, K])
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(len(vals)))
