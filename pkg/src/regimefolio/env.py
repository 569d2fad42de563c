"""Regime-aware portfolio environment.

Observations pair the current asset return vector with the regime posterior
row. Actions are simplex portfolio weights. Rewards are either a trailing
Sharpe-style step reward or the regime-weighted risk-adjusted reward, with
transaction costs, clipping, scheduled capital shocks, and periodic capital
resets; each mechanism can be ablated independently.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from .dataio import ReturnPanel
from .regimes import RegimePosterior
from .rng import child_stream

CAPITAL_FLOOR = 1e-12


class EnvError(ValueError):
    """Invalid environment configuration or action."""


@dataclass(frozen=True)
class EnvConfig:
    lambda_cost: float = 0.002
    clip_lo: float = -0.03
    clip_hi: float = 0.03
    reset_interval: int = 30
    shock_interval: int = 25
    shock_size: float = -0.05
    epsilon: float = 1e-8
    var_window: int = 10
    gamma_k: tuple[float, ...] | None = None  # regime risk aversions
    no_clip: bool = False
    no_cost: bool = False
    no_reset: bool = False
    no_shock: bool = False
    reward_mode: str = "sharpe_step"  # sharpe_step | regime_aware
    initial_capital: float = 1.0
    shock_mode: str = "scheduled"  # scheduled | bernoulli
    seed: int = 0  # used only by the bernoulli shock mode

    def __post_init__(self):
        if self.clip_lo >= self.clip_hi:
            raise EnvError("clip_lo must be < clip_hi")
        if self.reset_interval < 1 or self.shock_interval < 1:
            raise EnvError("intervals must be >= 1")
        if self.epsilon <= 0:
            raise EnvError("epsilon must be > 0")
        if self.lambda_cost < 0:
            raise EnvError("lambda_cost must be >= 0")
        if self.var_window < 1:
            raise EnvError("var_window must be >= 1")
        if self.gamma_k is not None and any(g <= 0 for g in self.gamma_k):
            raise EnvError("gamma_k entries must be > 0")
        if self.reward_mode not in ("sharpe_step", "regime_aware"):
            raise EnvError(f"unknown reward_mode {self.reward_mode!r}")
        if self.shock_mode not in ("scheduled", "bernoulli"):
            raise EnvError(f"unknown shock_mode {self.shock_mode!r}")


@dataclass(frozen=True)
class Observation:
    returns: np.ndarray  # (N,)
    regime_probs: np.ndarray  # (K,)


@dataclass
class RewardBreakdown:
    gross_return: float = 0.0
    cost: float = 0.0
    sharpe_reward: float = 0.0
    regime_mu: float = 0.0
    regime_var: float = 0.0
    regime_reward: float = 0.0
    clipped_reward: float = 0.0
    shock_applied: bool = False
    reset_applied: bool = False


@dataclass(frozen=True)
class RegimeStats:
    """Per-regime mean vector and diagonal covariance of asset returns."""

    means: np.ndarray  # (K, N)
    variances: np.ndarray  # (K, N) diagonal entries

    def __post_init__(self):
        object.__setattr__(self, "means", np.asarray(self.means, dtype=float))
        object.__setattr__(self, "variances", np.asarray(self.variances, dtype=float))
        if self.means.shape != self.variances.shape:
            raise EnvError("regime stats shape mismatch")

    @property
    def K(self) -> int:
        return self.means.shape[0]


def estimate_regime_stats(panel: ReturnPanel, posterior: RegimePosterior) -> RegimeStats:
    """Group training returns by argmax regime label and take mean/variance.

    Empty regimes fall back to whole-sample statistics.
    """
    if panel.n_years != posterior.probs.shape[0]:
        raise EnvError("panel and posterior lengths differ")
    K = posterior.K
    means = np.empty((K, panel.n_assets))
    variances = np.empty((K, panel.n_assets))
    overall_mean = panel.returns.mean(axis=0)
    overall_var = np.maximum(panel.returns.var(axis=0), 1e-12)
    for k in range(K):
        mask = posterior.labels == k
        if mask.sum() >= 2:
            means[k] = panel.returns[mask].mean(axis=0)
            variances[k] = np.maximum(panel.returns[mask].var(axis=0), 1e-12)
        elif mask.sum() == 1:
            means[k] = panel.returns[mask][0]
            variances[k] = overall_var
        else:
            means[k] = overall_mean
            variances[k] = overall_var
    return RegimeStats(means=means, variances=variances)


def default_gamma_k(stats: RegimeStats, lo: float = 1.0, hi: float = 3.0) -> np.ndarray:
    """Risk aversions spaced over [lo, hi], calmest regime getting lo."""
    total_var = stats.variances.sum(axis=1)
    order = np.argsort(total_var, kind="stable")
    grid = np.linspace(lo, hi, stats.K) if stats.K > 1 else np.array([lo])
    gammas = np.empty(stats.K)
    gammas[order] = grid
    return gammas


def transaction_cost(w: np.ndarray, w_prev: np.ndarray, lam: float) -> float:
    """Turnover penalty: lambda times the L1 weight change."""
    return float(lam * np.sum(np.abs(np.asarray(w) - np.asarray(w_prev))))


def sharpe_step_reward(
    gross: float, cost: float, trailing, epsilon: float
) -> float:
    """Trailing-volatility-normalized step reward.

    The std is the sample std of the trailing buffer including the current
    gross return; with fewer than two observations the volatility term is
    dropped and the reward is just the net return.
    """
    window = list(trailing) + [gross]
    numerator = gross - cost
    if len(window) < 2:
        return numerator
    std = float(np.std(window, ddof=1))
    return numerator / (std + epsilon)


def regime_aware_reward(
    w: np.ndarray,
    w_prev: np.ndarray,
    rho: np.ndarray,
    stats: RegimeStats,
    cfg: EnvConfig,
    gamma_k: np.ndarray | None = None,
) -> tuple[float, RewardBreakdown]:
    """Regime-weighted risk-adjusted reward.

    Mixes the per-regime expected portfolio return with a risk-aversion
    weighted portfolio variance: (mu - cost) / (sqrt(sum_k rho_k * g_k *
    var_k) + eps).
    """
    w = np.asarray(w, dtype=float)
    rho = np.asarray(rho, dtype=float)
    if gamma_k is None:
        gamma_k = np.asarray(cfg.gamma_k) if cfg.gamma_k is not None else default_gamma_k(stats)
    cost = 0.0 if cfg.no_cost else transaction_cost(w, w_prev, cfg.lambda_cost)
    exp_k = stats.means @ w  # (K,)
    var_k = stats.variances @ (w ** 2)  # (K,)
    mu = float(rho @ exp_k)
    mixed_var = float(rho @ (gamma_k * var_k))
    reward = (mu - cost) / (np.sqrt(mixed_var) + cfg.epsilon)
    breakdown = RewardBreakdown(
        cost=cost, regime_mu=mu, regime_var=float(rho @ var_k), regime_reward=reward
    )
    return reward, breakdown


class PortfolioEnv:
    """Replay environment over aligned (returns, posterior) streams."""

    def __init__(
        self,
        cfg: EnvConfig,
        panel: ReturnPanel,
        posterior: RegimePosterior,
        regime_stats: RegimeStats,
    ):
        if panel.n_years != posterior.probs.shape[0]:
            raise EnvError(
                f"panel length {panel.n_years} != posterior length {posterior.probs.shape[0]}"
            )
        if regime_stats.K != posterior.K:
            raise EnvError("regime stats K does not match posterior width")
        if regime_stats.means.shape[1] != panel.n_assets:
            raise EnvError("regime stats asset dimension mismatch")
        if cfg.gamma_k is not None and len(cfg.gamma_k) != posterior.K:
            raise EnvError("gamma_k length must equal the regime count")
        self.cfg = cfg
        self.panel = panel
        self.posterior = posterior
        self.stats = regime_stats
        self.gamma_k = (
            np.asarray(cfg.gamma_k, dtype=float)
            if cfg.gamma_k is not None
            else default_gamma_k(regime_stats)
        )
        self.reset()

    @property
    def n_assets(self) -> int:
        return self.panel.n_assets

    @property
    def n_regimes(self) -> int:
        return self.posterior.K

    @property
    def episode_length(self) -> int:
        return self.panel.n_years

    def reset(self) -> Observation:
        self.t = 0
        self.capital = self.cfg.initial_capital
        self.prev_weights = np.full(self.n_assets, 1.0 / self.n_assets)
        self.trailing = deque(maxlen=self.cfg.var_window)
        self._shock_rng = child_stream(self.cfg.seed, "env.shock")
        self.trace: list[dict] = []
        return self._observation(0)

    def _observation(self, t: int) -> Observation:
        t = min(t, self.episode_length - 1)
        return Observation(
            returns=self.panel.returns[t].copy(),
            regime_probs=self.posterior.probs[t].copy(),
        )

    def _shock_due(self, t: int) -> bool:
        if self.cfg.no_shock:
            return False
        if self.cfg.shock_mode == "bernoulli":
            return bool(self._shock_rng.random() < 1.0 / self.cfg.shock_interval)
        return t > 0 and t % self.cfg.shock_interval == 0

    def step(self, action) -> tuple[Observation, float, bool, RewardBreakdown]:
        if self.t >= self.episode_length:
            raise EnvError("episode already finished; call reset()")
        w = np.asarray(action, dtype=float)
        if w.shape != (self.n_assets,):
            raise EnvError(f"action must have shape ({self.n_assets},)")
        if np.any(w < -1e-6) or abs(float(w.sum()) - 1.0) > 1e-6:
            raise EnvError("action off the probability simplex")
        w = np.clip(w, 0.0, None)
        w = w / w.sum()

        t = self.t
        r_t = self.panel.returns[t]
        rho_t = self.posterior.probs[t]
        breakdown = RewardBreakdown()

        gross = float(w @ r_t)
        breakdown.gross_return = gross

        if self._shock_due(t):
            self.capital = max(self.capital * (1.0 + self.cfg.shock_size), CAPITAL_FLOOR)
            breakdown.shock_applied = True

        self.capital = max(self.capital * (1.0 + gross), CAPITAL_FLOOR)

        cost = 0.0 if self.cfg.no_cost else transaction_cost(
            w, self.prev_weights, self.cfg.lambda_cost
        )
        breakdown.cost = cost
        if self.cfg.reward_mode == "sharpe_step":
            raw = sharpe_step_reward(gross, cost, self.trailing, self.cfg.epsilon)
            breakdown.sharpe_reward = raw
        else:
            raw, rb = regime_aware_reward(
                w, self.prev_weights, rho_t, self.stats, self.cfg, self.gamma_k
            )
            breakdown.regime_mu = rb.regime_mu
            breakdown.regime_var = rb.regime_var
            breakdown.regime_reward = rb.regime_reward
        reward = raw
        if not self.cfg.no_clip:
            reward = float(np.clip(reward, self.cfg.clip_lo, self.cfg.clip_hi))
        breakdown.clipped_reward = reward

        if not self.cfg.no_reset and t > 0 and t % self.cfg.reset_interval == 0:
            self.capital = self.cfg.initial_capital
            breakdown.reset_applied = True

        self.trailing.append(gross)
        self.prev_weights = w
        self.t = t + 1
        done = self.t >= self.episode_length

        self.trace.append({
            "t": t,
            "weights": w.copy(),
            "gross": gross,
            "cost": cost,
            "reward": reward,
            "capital": self.capital,
            "shock_applied": breakdown.shock_applied,
            "reset_applied": breakdown.reset_applied,
        })
        return self._observation(self.t), reward, done, breakdown

    def export_trace(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            asset_cols = [f"w_{name}" for name in self.panel.asset_names]
            writer.writerow(
                ["t"] + asset_cols
                + ["gross", "cost", "reward", "capital", "shock_applied", "reset_applied"]
            )
            for row in self.trace:
                writer.writerow(
                    [row["t"]] + [repr(float(v)) for v in row["weights"]]
                    + [repr(row["gross"]), repr(row["cost"]), repr(row["reward"]),
                       repr(row["capital"]), int(row["shock_applied"]),
                       int(row["reset_applied"])]
                )


def env_new(
    cfg: EnvConfig,
    panel: ReturnPanel,
    posterior: RegimePosterior,
    regime_stats: RegimeStats | None = None,
) -> PortfolioEnv:
    """Build an environment; stats default to label-grouped panel estimates."""
    if regime_stats is None:
        regime_stats = estimate_regime_stats(panel, posterior)
    return PortfolioEnv(cfg, panel, posterior, regime_stats)
