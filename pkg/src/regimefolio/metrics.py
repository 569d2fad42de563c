"""Portfolio performance metrics and deterministic policy backtesting.

Annual-data conventions: no annualization factor, no risk-free subtraction
(pass excess returns in if that adjustment is wanted). Sortino's downside
deviation averages squared shortfalls over ALL periods, not only losing
ones.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

SCHEMA_VERSION = 1


class MetricError(ValueError):
    """Metric undefined for the given inputs."""


def sharpe(returns) -> float:
    returns = np.asarray(returns, dtype=float)
    if returns.size < 2:
        raise MetricError("sharpe requires at least 2 returns")
    std = float(np.std(returns, ddof=1))
    if std == 0.0:
        raise MetricError("sharpe undefined: zero return variance")
    return float(np.mean(returns)) / std


def sortino(returns, target: float = 0.0) -> float:
    returns = np.asarray(returns, dtype=float)
    if returns.size < 2:
        raise MetricError("sortino requires at least 2 returns")
    shortfall = np.minimum(returns - target, 0.0)
    if not np.any(shortfall < 0):
        raise MetricError("sortino undefined: no returns below target")
    downside_dev = math.sqrt(float(np.mean(shortfall ** 2)))
    return (float(np.mean(returns)) - target) / downside_dev


def max_drawdown(wealth) -> float:
    wealth = np.asarray(wealth, dtype=float)
    if wealth.size < 1:
        raise MetricError("max_drawdown requires at least 1 value")
    if np.any(wealth <= 0):
        raise MetricError("max_drawdown requires positive wealth")
    peaks = np.maximum.accumulate(wealth)
    return float(np.min(wealth / peaks - 1.0))


def rolling_cagr(wealth, years, window: int) -> list[tuple[int, float]]:
    """Geometric growth rate over each `window`-year slice of the curve.

    `wealth` has one more entry than `years` covers steps; entry s of the
    output anchors at years[s].
    """
    wealth = np.asarray(wealth, dtype=float)
    if window < 1:
        raise MetricError("window must be >= 1")
    if window >= wealth.size:
        raise MetricError(f"window {window} too long for wealth curve of {wealth.size}")
    out = []
    for s in range(wealth.size - window):
        growth = (wealth[s + window] / wealth[s]) ** (1.0 / window) - 1.0
        out.append((int(years[s]), float(growth)))
    return out


@dataclass(frozen=True)
class BacktestReport:
    wealth_curve: np.ndarray  # (T+1,), starts at initial capital
    per_step_returns: np.ndarray  # (T,)
    sharpe: float | None
    sortino: float | None
    max_drawdown: float
    final_log_value: float
    rolling_cagr: list[tuple[int, float]]
    reward_trace: np.ndarray
    years: list[int] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({
            "schema_version": SCHEMA_VERSION,
            "sharpe": self.sharpe,
            "sortino": self.sortino,
            "max_drawdown": self.max_drawdown,
            "final_log_value": self.final_log_value,
            "final_wealth": float(self.wealth_curve[-1]),
            "n_steps": int(self.per_step_returns.size),
            "rolling_cagr": [[y, c] for y, c in self.rolling_cagr],
        }, indent=2, sort_keys=True)

    def wealth_to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "year", "wealth", "return", "reward"])
            writer.writerow([0, "", repr(float(self.wealth_curve[0])), "", ""])
            for i in range(self.per_step_returns.size):
                year = self.years[i] if i < len(self.years) else ""
                writer.writerow([
                    i + 1, year, repr(float(self.wealth_curve[i + 1])),
                    repr(float(self.per_step_returns[i])),
                    repr(float(self.reward_trace[i])),
                ])

    def cagr_to_csv(self, path, crisis_years: list[int] | None = None) -> None:
        crisis = set(crisis_years or [])
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["start_year", "cagr", "stress_period"])
            for year, cagr in self.rolling_cagr:
                writer.writerow([year, repr(cagr), int(year in crisis)])


def build_report(
    wealth_curve,
    per_step_returns,
    reward_trace,
    years,
    cagr_window: int = 10,
) -> BacktestReport:
    """Assemble the full report; undefined ratio metrics come back as None."""
    wealth_curve = np.asarray(wealth_curve, dtype=float)
    per_step_returns = np.asarray(per_step_returns, dtype=float)
    try:
        sharpe_val = sharpe(per_step_returns)
    except MetricError:
        sharpe_val = None
    try:
        sortino_val = sortino(per_step_returns)
    except MetricError:
        sortino_val = None
    window = min(cagr_window, max(wealth_curve.size - 1, 1))
    cagr = (
        rolling_cagr(wealth_curve, years, window)
        if wealth_curve.size > window
        else []
    )
    return BacktestReport(
        wealth_curve=wealth_curve,
        per_step_returns=per_step_returns,
        sharpe=sharpe_val,
        sortino=sortino_val,
        max_drawdown=max_drawdown(wealth_curve),
        final_log_value=float(np.log(wealth_curve[-1] / wealth_curve[0])),
        rolling_cagr=cagr,
        reward_trace=np.asarray(reward_trace, dtype=float),
        years=list(years),
    )


def backtest(policy, env, cagr_window: int = 10) -> BacktestReport:
    """Deterministic rollout of a policy over a fresh environment.

    The wealth curve compounds gross portfolio returns only (shock/reset
    capital events live in the environment's own capital trace).
    """
    from .agents import policy_act

    obs = env.reset()
    wealth = [env.cfg.initial_capital]
    step_returns = []
    rewards = []
    done = False
    while not done:
        action = policy_act(policy, obs, deterministic=True)
        obs, reward, done, breakdown = env.step(action)
        step_returns.append(breakdown.gross_return)
        rewards.append(reward)
        wealth.append(wealth[-1] * (1.0 + breakdown.gross_return))
    return build_report(wealth, step_returns, rewards, env.panel.years, cagr_window)
