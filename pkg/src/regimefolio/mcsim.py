"""Regime-switching Monte Carlo: chain simulation, regime-conditional
bootstrap of historical return vectors, strategy compounding, and terminal
distribution summaries (mean, CI, VaR, CVaR).

Returns are bootstrapped as whole cross-asset vectors per year, preserving
same-year co-movement. Each path draws from its own RNG stream derived from
(master seed, path index), so results are identical at any parallelism.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .rng import child_stream

SCHEMA_VERSION = 1


class McError(ValueError):
    """Invalid Monte Carlo configuration or input."""


@dataclass(frozen=True)
class TransitionMatrix:
    P: np.ndarray  # (K, K), row-stochastic

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        object.__setattr__(self, "P", P)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise McError("transition matrix must be square")
        if np.any(P < 0) or np.any(P > 1):
            raise McError("transition entries must lie in [0, 1]")
        if np.any(np.abs(P.sum(axis=1) - 1.0) > 1e-12):
            raise McError("transition rows must sum to 1 within 1e-12")

    @property
    def K(self) -> int:
        return self.P.shape[0]

    def stationary(self) -> np.ndarray:
        """Left eigenvector for eigenvalue 1, normalized to a distribution."""
        vals, vecs = np.linalg.eig(self.P.T)
        idx = int(np.argmin(np.abs(vals - 1.0)))
        pi = np.real(vecs[:, idx])
        pi = np.abs(pi)
        return pi / pi.sum()


@dataclass(frozen=True)
class RegimeReturnPools:
    """Historical per-year return vectors grouped by regime label."""

    pools: list[np.ndarray]  # K arrays of shape (n_k, N)

    def __post_init__(self):
        pools = [np.atleast_2d(np.asarray(p, dtype=float)) for p in self.pools]
        object.__setattr__(self, "pools", pools)
        if not pools:
            raise McError("no regime pools")
        widths = {p.shape[1] for p in pools}
        if len(widths) != 1:
            raise McError("pools must share the asset dimension")
        for k, p in enumerate(pools):
            if p.shape[0] == 0:
                raise McError(f"empty pool for regime {k}")

    @property
    def K(self) -> int:
        return len(self.pools)

    @property
    def N(self) -> int:
        return self.pools[0].shape[1]

    @classmethod
    def from_labels(cls, returns: np.ndarray, labels: np.ndarray) -> "RegimeReturnPools":
        labels = np.asarray(labels, dtype=int)
        K = int(labels.max()) + 1
        pools = [np.asarray(returns)[labels == k] for k in range(K)]
        return cls(pools=pools)


@dataclass(frozen=True)
class McConfig:
    horizon_years: int
    n_paths: int
    transition: TransitionMatrix
    pools: RegimeReturnPools
    strategy_weights: np.ndarray
    seed: int = 0
    initial_regime: int | np.ndarray = 0  # fixed index or distribution
    macro_coeffs: tuple[float, float, float] | None = None
    # Asset-index pairs feeding the macro transition signals: risk premium =
    # returns[i] - returns[j] of the previous simulated year, likewise spread.
    macro_risk_premium_pair: tuple[int, int] | None = None
    macro_yield_spread_pair: tuple[int, int] | None = None

    def __post_init__(self):
        w = np.asarray(self.strategy_weights, dtype=float)
        object.__setattr__(self, "strategy_weights", w)
        if self.horizon_years < 1:
            raise McError("horizon must be >= 1")
        if self.n_paths < 1:
            raise McError("n_paths must be >= 1")
        if w.shape != (self.pools.N,):
            raise McError("strategy weights must match asset count")
        if np.any(w < -1e-12) or abs(float(w.sum()) - 1.0) > 1e-12:
            raise McError("strategy weights must lie on the simplex within 1e-12")
        if self.macro_coeffs is not None and self.transition.K != 2:
            raise McError("macro-adjusted transitions require a two-regime model")


@dataclass(frozen=True)
class McSummary:
    mean: float
    median: float
    ci_low: float
    ci_high: float
    var5: float
    cvar5: float
    terminal_returns: np.ndarray
    total_loss_paths: int = 0
    horizon_years: int = 0

    def __post_init__(self):
        object.__setattr__(
            self, "terminal_returns", np.asarray(self.terminal_returns, dtype=float)
        )

    def to_json(self) -> str:
        return json.dumps({
            "schema_version": SCHEMA_VERSION,
            "mean": self.mean,
            "median": self.median,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "var5": self.var5,
            "cvar5": self.cvar5,
            "n_paths": int(self.terminal_returns.size),
            "horizon": self.horizon_years,
            "total_loss_paths": self.total_loss_paths,
        }, indent=2, sort_keys=True)


def simulate_chain(
    T: int,
    P: TransitionMatrix,
    initial: int | np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """Sample a length-T regime path; step t+1 drawn from row P[path[t]]."""
    if T < 1:
        raise McError("chain length must be >= 1")
    path = np.empty(T, dtype=int)
    if np.ndim(initial) == 0:
        path[0] = int(initial)
    else:
        init = np.asarray(initial, dtype=float)
        if abs(float(init.sum()) - 1.0) > 1e-9:
            raise McError("initial distribution must sum to 1")
        path[0] = int(rng.choice(P.K, p=init))
    # Inverse-CDF sampling from precomputed row CDFs; one uniform per step.
    cdf = np.cumsum(P.P, axis=1)
    u = rng.random(T)
    for t in range(1, T):
        path[t] = min(int(np.searchsorted(cdf[path[t - 1]], u[t], side="right")), P.K - 1)
    return path


def _logistic(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


# Reproduces the base 10% stress-entry probability at zero macro signals.
DEFAULT_MACRO_COEFFS = (math.log(0.1 / 0.9), -5.0, -5.0)
STRESS_INDEX = 1


def macro_adjusted_row(
    P_base: TransitionMatrix,
    regime: int,
    risk_premium: float,
    yield_spread: float,
    coeffs: tuple[float, float, float] = DEFAULT_MACRO_COEFFS,
) -> np.ndarray:
    """Two-regime transition row with macro-driven stress probability.

    The probability of entering (or staying in) the stress state becomes
    logistic(a0 + a1*risk_premium + a2*yield_spread); the remaining mass goes
    to the other state.
    """
    if P_base.K != 2:
        raise McError("macro-adjusted transitions support exactly two regimes")
    if regime not in (0, 1):
        raise McError("regime index must be 0 or 1")
    a0, a1, a2 = coeffs
    p_stress = _logistic(a0 + a1 * risk_premium + a2 * yield_spread)
    row = np.empty(2)
    row[STRESS_INDEX] = p_stress
    row[1 - STRESS_INDEX] = 1.0 - p_stress
    return row


def sample_regime_returns(
    path: np.ndarray, pools: RegimeReturnPools, rng: np.random.Generator
) -> np.ndarray:
    """Draw one historical return vector per step from the regime's pool."""
    path = np.asarray(path, dtype=int)
    if path.max() >= pools.K:
        raise McError(f"path visits regime {int(path.max())} with no pool")
    out = np.empty((path.size, pools.N))
    for t, k in enumerate(path):
        pool = pools.pools[k]
        out[t] = pool[rng.integers(pool.shape[0])]
    return out


def compound_strategy(returns: np.ndarray, weights: np.ndarray) -> float:
    """Terminal cumulative return of a fixed-weight, annually rebalanced mix.

    A portfolio return <= -1 at any step marks the path as a total loss
    (terminal -1).
    """
    returns = np.atleast_2d(np.asarray(returns, dtype=float))
    port = returns @ np.asarray(weights, dtype=float)
    if np.any(port <= -1.0):
        return -1.0
    return float(math.expm1(np.sum(np.log1p(port))))


def empirical_var_cvar(samples, alpha: float) -> tuple[float, float]:
    """Lower-tail empirical VaR and CVaR of a sample of terminal returns.

    VaR is the sorted-ascending value at index ceil(alpha*n) - 1 (index
    clamped to >= 0); CVaR is the mean of all samples at or below it.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.size == 0:
        raise McError("empirical_var_cvar requires a non-empty sample")
    if not 0.0 < alpha < 1.0:
        raise McError("alpha must lie in (0, 1)")
    ordered = np.sort(samples)
    idx = max(math.ceil(alpha * samples.size) - 1, 0)
    var = float(ordered[idx])
    tail = ordered[ordered <= var]
    return var, float(tail.mean())


def _simulate_path(cfg: McConfig, path_index: int) -> tuple[float, bool]:
    rng = child_stream(cfg.seed, "mcsim.path", path_index)
    if cfg.macro_coeffs is None:
        path = simulate_chain(cfg.horizon_years, cfg.transition, cfg.initial_regime, rng)
        returns = sample_regime_returns(path, cfg.pools, rng)
    else:
        # Macro signals are read off the previous simulated year's returns,
        # so the transition row adapts one step behind the market.
        path = np.empty(cfg.horizon_years, dtype=int)
        returns = np.empty((cfg.horizon_years, cfg.pools.N))
        if np.ndim(cfg.initial_regime) == 0:
            path[0] = int(cfg.initial_regime)
        else:
            path[0] = int(rng.choice(cfg.transition.K, p=np.asarray(cfg.initial_regime)))
        pool = cfg.pools.pools[path[0]]
        returns[0] = pool[rng.integers(pool.shape[0])]
        for t in range(1, cfg.horizon_years):
            rp_i, rp_j = cfg.macro_risk_premium_pair or (0, 0)
            ys_i, ys_j = cfg.macro_yield_spread_pair or (0, 0)
            rp = float(returns[t - 1, rp_i] - returns[t - 1, rp_j])
            ys = float(returns[t - 1, ys_i] - returns[t - 1, ys_j])
            row = macro_adjusted_row(cfg.transition, int(path[t - 1]), rp, ys, cfg.macro_coeffs)
            path[t] = int(rng.choice(2, p=row))
            pool = cfg.pools.pools[path[t]]
            returns[t] = pool[rng.integers(pool.shape[0])]
    terminal = compound_strategy(returns, cfg.strategy_weights)
    return terminal, terminal == -1.0


def run_monte_carlo(cfg: McConfig, n_workers: int = 1) -> McSummary:
    """Run n_paths independent simulations and summarize terminal returns.

    Identical seeds give identical summaries at any worker count: each path
    owns a stream keyed by its index and the reduction sorts once at the end.
    """
    if n_workers <= 1:
        results = [_simulate_path(cfg, i) for i in range(cfg.n_paths)]
    else:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(lambda i: _simulate_path(cfg, i), range(cfg.n_paths)))
    terminals = np.array([r[0] for r in results])
    total_loss = sum(1 for r in results if r[1])
    var5, cvar5 = empirical_var_cvar(terminals, 0.05)
    return McSummary(
        mean=float(terminals.mean()),
        median=float(np.quantile(terminals, 0.5)),
        ci_low=float(np.quantile(terminals, 0.025)),
        ci_high=float(np.quantile(terminals, 0.975)),
        var5=var5,
        cvar5=cvar5,
        terminal_returns=terminals,
        total_loss_paths=total_loss,
        horizon_years=cfg.horizon_years,
    )
