"""Regime-switching market model and joint (stock, regime) path simulation.

Regimes are 0-based internally. Configuration files, CSV exports and the CLI
use 1-based labels.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels

DELTA2_FLOOR = 1e-10
CHUNK_PATHS = 4096


class ModelError(ValueError):
    """Raised when a market configuration violates a model assumption."""


@dataclass(frozen=True)
class RegimeSet:
    """Per-regime coefficients of the market.

    ``gamma[j, i]`` and the intensity arrays are indexed (target, source).
    The intensity of a switch i -> j at stock price s is
    ``max(0, lam_a[j, i] + lam_b[j, i] * s)``, capped by ``lam_cap[j, i]``.
    Constant intensities have ``lam_b == 0`` and ``lam_cap == lam_a``.
    """

    r: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    gamma: np.ndarray
    lam_a: np.ndarray
    lam_b: np.ndarray
    lam_cap: np.ndarray
    s0: float = 100.0
    j0: int = 0
    horizon: float = 1.0

    @property
    def n_states(self) -> int:
        return len(self.r)

    @property
    def constant_intensities(self) -> bool:
        return not np.any(self.lam_b)

    def intensities(self, i, s=None) -> np.ndarray:
        """Intensities of all switches out of regime ``i``, shape (I,) + shape(s).

        ``i`` may be an integer or an integer array broadcastable with ``s``.
        """
        i = np.asarray(i)
        a = self.lam_a[:, i]
        if self.constant_intensities or s is None:
            if s is None:
                return a
            return np.broadcast_to(a, a.shape[:1] + np.broadcast_shapes(i.shape, np.shape(s))).copy()
        return np.maximum(0.0, a + self.lam_b[:, i] * np.asarray(s, dtype=float))

    def jump_sizes(self, i) -> np.ndarray:
        return self.gamma[:, np.asarray(i)]

    def thinning_bound(self) -> np.ndarray:
        """Total proposal rate per source regime used for thinning."""
        return self.lam_cap.sum(axis=0)

    def context(self, i, s=None):
        """Snapshot of the coefficients at regime(s) ``i`` and price(s) ``s``."""
        from .generator import LocalContext

        i = np.asarray(i)
        lam = self.intensities(i, s)
        gamma = self.gamma[:, i]
        if lam.ndim > gamma.ndim:
            gamma = np.broadcast_to(gamma.reshape(gamma.shape + (1,) * (lam.ndim - gamma.ndim)), lam.shape)
        return LocalContext(
            r=self.r[i],
            mu=self.mu[i],
            sigma=self.sigma[i],
            gamma=gamma,
            lam=lam,
        )


def build_market(config: dict) -> RegimeSet:
    """Validate a raw parameter table and return a :class:`RegimeSet`.

    ``config`` follows the JSON model format: ``states`` (r, mu, sigma),
    ``transitions`` (from, to, gamma, and either ``lambda`` or
    ``lambda_affine`` with keys a, b, cap), optional ``s0``, ``j0``,
    ``horizon``. State labels in ``transitions`` and ``j0`` are 1-based.
    """
    try:
        states = config["states"]
    except (KeyError, TypeError):
        raise ModelError("config has no 'states' table") from None
    n = len(states)
    if n < 1:
        raise ModelError("at least one state is required")
    try:
        r = np.array([float(st["r"]) for st in states])
        mu = np.array([float(st["mu"]) for st in states])
        sigma = np.array([float(st["sigma"]) for st in states])
    except KeyError as exc:
        raise ModelError(f"state entry missing field {exc}") from None

    gamma = np.zeros((n, n))
    lam_a = np.zeros((n, n))
    lam_b = np.zeros((n, n))
    lam_cap = np.zeros((n, n))
    for tr in config.get("transitions", []):
        i, j = int(tr["from"]) - 1, int(tr["to"]) - 1
        if not (0 <= i < n and 0 <= j < n):
            raise ModelError(f"transition ({tr['from']}->{tr['to']}) refers to an unknown state")
        if i == j:
            raise ModelError(f"self-transition at state {i + 1} is not allowed")
        gamma[j, i] = float(tr.get("gamma", 0.0))
        if "lambda_affine" in tr:
            aff = tr["lambda_affine"]
            lam_a[j, i] = float(aff["a"])
            lam_b[j, i] = float(aff.get("b", 0.0))
            lam_cap[j, i] = float(aff["cap"])
            if lam_cap[j, i] < max(lam_a[j, i], 0.0):
                raise ModelError(f"intensity cap below intercept at ({j + 1},{i + 1})")
        else:
            lam = float(tr.get("lambda", 0.0))
            if lam < 0:
                raise ModelError(f"negative intensity at ({j + 1},{i + 1})")
            lam_a[j, i] = lam
            lam_cap[j, i] = lam

    for i in range(n):
        if mu[i] < r[i]:
            raise ModelError(f"mu < r at {i + 1}")
        if sigma[i] < 0:
            raise ModelError(f"sigma < 0 at {i + 1}")
    for j in range(n):
        for i in range(n):
            if i != j and gamma[j, i] <= -1.0:
                raise ModelError(f"gamma <= -1 at ({j + 1},{i + 1})")
    # Smallest intensity over s in (0, inf) of max(0, a + b s).
    lam_min = np.where(lam_b >= 0, np.maximum(lam_a, 0.0), 0.0)
    for i in range(n):
        d2_min = sigma[i] ** 2 + np.sum(gamma[:, i] ** 2 * lam_min[:, i])
        if d2_min < DELTA2_FLOOR:
            raise ModelError(f"delta^2 below eps at {i + 1}")

    j0 = int(config.get("j0", 1)) - 1
    if not 0 <= j0 < n:
        raise ModelError("j0 outside the state range")
    s0 = float(config.get("s0", 100.0))
    horizon = float(config.get("horizon", 1.0))
    if s0 <= 0 or horizon <= 0:
        raise ModelError("s0 and horizon must be positive")
    for arr in (r, mu, sigma, gamma, lam_a, lam_b, lam_cap):
        arr.setflags(write=False)
    return RegimeSet(r, mu, sigma, gamma, lam_a, lam_b, lam_cap, s0=s0, j0=j0, horizon=horizon)


def load_model(path) -> RegimeSet:
    with open(path) as fh:
        return build_market(json.load(fh))


def table1_config() -> dict:
    """The two-regime parameter set used for the reference tables."""
    return json.loads((Path(__file__).parent / "data" / "table1.json").read_text())


def table1_market() -> RegimeSet:
    return build_market(table1_config())


def instantaneous_variance(m: RegimeSet, i, s=None):
    """delta^2(i, s) = sigma_i^2 + sum_j gamma_{j,i}^2 lambda_j(i, s)."""
    lam = m.intensities(i, s)
    g = m.gamma[:, np.asarray(i)]
    if lam.ndim > g.ndim:
        g = g.reshape(g.shape + (1,) * (lam.ndim - g.ndim))
    return m.sigma[np.asarray(i)] ** 2 + np.sum(g**2 * lam, axis=0)


def sharpe_theta(m: RegimeSet, i, s=None):
    """Instantaneous Sharpe ratio (mu - r) / delta of the stock."""
    i = np.asarray(i)
    return (m.mu[i] - m.r[i]) / np.sqrt(instantaneous_variance(m, i, s))


@dataclass
class PathBundle:
    """A batch of simulated paths on a common time grid.

    Attributes:
        times: grid t_0=0 < ... < t_K, shape (K+1,).
        s: stock values, shape (P, K+1).
        regime: 0-based regime per node, shape (P, K+1).
        dW: Brownian increment per step, shape (P, K).
        dN: transitions into each regime per step, shape (P, K, I).
        compensator: integrated intensity per step and target, shape (P, K, I).
        int_r: integrated short rate per step, shape (P, K).
    """

    times: np.ndarray
    s: np.ndarray
    regime: np.ndarray
    dW: np.ndarray
    dN: np.ndarray
    compensator: np.ndarray
    int_r: np.ndarray
    seed: int | None = None
    proposals: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_paths(self) -> int:
        return self.s.shape[0]

    @property
    def n_steps(self) -> int:
        return self.s.shape[1] - 1

    @property
    def dNtilde(self) -> np.ndarray:
        return self.dN - self.compensator

    @property
    def discount(self) -> np.ndarray:
        """exp(-int_0^{t_k} r ds) per node, shape (P, K+1)."""
        out = np.ones_like(self.s)
        np.exp(-np.cumsum(self.int_r, axis=1), out=out[:, 1:])
        return out

    def path(self, p: int) -> "MarketPath":
        return MarketPath(
            times=self.times,
            s=self.s[p],
            j=self.regime[p] + 1,
            dW=self.dW[p],
            dNtilde=self.dNtilde[p],
            discount=self.discount[p],
        )

    def to_csv(self, path) -> None:
        """One row per node: path_id, t, S, J (1-based)."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path_id", "t", "S", "J"])
            for p in range(self.n_paths):
                for k, t in enumerate(self.times):
                    w.writerow([p, repr(float(t)), repr(float(self.s[p, k])), int(self.regime[p, k]) + 1])


@dataclass(frozen=True)
class MarketPath:
    """Single trajectory view; ``j`` carries 1-based regime labels."""

    times: np.ndarray
    s: np.ndarray
    j: np.ndarray
    dW: np.ndarray
    dNtilde: np.ndarray
    discount: np.ndarray


def _philox_key(seed: int) -> np.ndarray:
    return np.random.SeedSequence(seed).generate_state(2, np.uint64)


def path_raw_bits(seed: int, path_ids, n_words: int, stream: int = 0) -> np.ndarray:
    """Raw 64-bit words of the substreams of ``path_ids``, shape (len, n_words).

    Path p reads the Philox stream keyed by ``seed`` with counter words
    (0, 0, p, stream), so each path's draws do not depend on how paths are
    batched.
    """
    path_ids = np.asarray(path_ids, dtype=np.uint64)
    bg = np.random.Philox(key=_philox_key(seed))
    state = bg.state
    state["state"]["counter"][:] = 0
    state["state"]["counter"][3] = stream
    out = np.empty((len(path_ids), n_words), dtype=np.uint64)
    counter = state["state"]["counter"]
    for row, p in enumerate(path_ids):
        counter[2] = p
        state["buffer_pos"] = 4
        bg.state = state
        out[row] = bg.random_raw(n_words)
    return out


def _event_block(m: RegimeSet, horizon: float) -> int:
    """Proposal slots per path: the 1-1e-12 Poisson quantile of the busiest regime."""
    from scipy.stats import poisson

    rate = float(m.thinning_bound().max()) * horizon
    if rate == 0:
        return 2
    return int(poisson.ppf(1 - 1e-12, rate)) + 8


def simulate_paths(
    m: RegimeSet,
    s0: float | None = None,
    j0: int | None = None,
    horizon: float | None = None,
    n_steps: int = 50,
    n_paths: int = 10_000,
    seed: int = 0,
    threads: int = 1,
    path_offset: int = 0,
    backend: str | None = None,
) -> PathBundle:
    """Simulate (S, J) under the physical measure on a uniform grid.

    Between transitions log S is Gaussian with drift
    mu_i - sum_j gamma_{j,i} lambda_j(i, s) - sigma_i^2 / 2; transitions are
    proposed at the regime's total intensity cap and thinned, so constant
    intensities accept every proposal. ``j0`` is 0-based. Path ``p`` uses
    substream ``path_offset + p``.
    """
    s0 = m.s0 if s0 is None else float(s0)
    j0 = m.j0 if j0 is None else int(j0)
    horizon = m.horizon if horizon is None else float(horizon)
    if horizon <= 0 or n_steps < 1 or n_paths < 1:
        raise ValueError("horizon, n_steps and n_paths must be positive")
    if not 0 <= j0 < m.n_states:
        raise ValueError("j0 outside the state range")
    times = np.linspace(0.0, horizon, n_steps + 1)
    n_states = m.n_states
    block = _event_block(m, horizon)

    s = np.empty((n_paths, n_steps + 1))
    regime = np.empty((n_paths, n_steps + 1), dtype=np.int64)
    dW = np.empty((n_paths, n_steps))
    dN = np.zeros((n_paths, n_steps, n_states))
    comp = np.zeros((n_paths, n_steps, n_states))
    int_r = np.zeros((n_paths, n_steps))
    used = np.zeros(n_paths, dtype=np.int64)
    simulate_chunk = kernels.get("simulate_chunk", backend)

    def run(lo: int, hi: int) -> None:
        ids = np.arange(lo, hi)
        width = block
        todo = ids
        while todo.size:
            raw = path_raw_bits(seed, todo + path_offset, 2 * n_steps + 4 * width)
            out = [a[todo] for a in (s, regime, dW, dN, comp, int_r, used)]
            status = simulate_chunk(
                raw, times, s0, j0, m.r, m.mu, m.sigma, m.gamma, m.lam_a, m.lam_b, m.lam_cap, width, *out
            )
            for arr, o in zip((s, regime, dW, dN, comp, int_r, used), out):
                arr[todo] = o
            if np.any(status == 2):
                bad = todo[status == 2][0]
                raise ModelError(f"intensity above its cap on path {bad}; raise lambda cap")
            todo = todo[status == 1]
            width *= 4

    bounds = [(lo, min(lo + CHUNK_PATHS, n_paths)) for lo in range(0, n_paths, CHUNK_PATHS)]
    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(lambda b: run(*b), bounds))
    else:
        for b in bounds:
            run(*b)
    return PathBundle(times, s, regime, dW, dN, comp, int_r, seed=seed, proposals=used)
