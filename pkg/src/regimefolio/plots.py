"""Figure rendering for CLI reports.

Every report-emitting command writes PNG figures next to its delimited
output. The Agg backend is forced and PNG metadata is stripped so repeated
runs produce byte-identical files.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_SAVEKW = {"dpi": 110, "metadata": {"Software": None, "Date": None}}


def save_posterior_heatmap(path, probs: np.ndarray, years, labels) -> None:
    fig, (ax0, ax1) = plt.subplots(
        2, 1, figsize=(10, 5), sharex=True, height_ratios=[3, 1]
    )
    ax0.imshow(
        probs.T, aspect="auto", cmap="viridis", interpolation="nearest",
        extent=[years[0], years[-1], probs.shape[1] - 0.5, -0.5],
    )
    ax0.set_yticks(range(probs.shape[1]))
    ax0.set_ylabel("regime")
    ax0.set_title("Regime posterior probabilities")
    ax1.step(years, labels, where="mid")
    ax1.set_ylabel("label")
    ax1.set_xlabel("year")
    fig.tight_layout()
    fig.savefig(path, **_SAVEKW)
    plt.close(fig)


def save_terminal_histogram(path, terminals: np.ndarray, horizon: int) -> None:
    fig, ax = plt.subplots(figsize=(8, 5))
    ax.hist(terminals, bins=min(60, max(10, terminals.size // 50)), color="steelblue")
    ax.axvline(float(np.mean(terminals)), color="black", linestyle="--", label="mean")
    ax.axvline(float(np.quantile(terminals, 0.05)), color="crimson",
               linestyle=":", label="5% quantile")
    ax.set_xlabel(f"terminal cumulative return ({horizon}y)")
    ax.set_ylabel("paths")
    ax.legend()
    ax.set_title("Monte Carlo terminal return distribution")
    fig.tight_layout()
    fig.savefig(path, **_SAVEKW)
    plt.close(fig)


def save_wealth_curve(path, curves: dict[str, np.ndarray], years) -> None:
    fig, ax = plt.subplots(figsize=(9, 5))
    x = [years[0] - 1] + list(years)
    for name, wealth in curves.items():
        ax.plot(x[: len(wealth)], wealth, label=name)
    ax.set_yscale("log")
    ax.set_xlabel("year")
    ax.set_ylabel("wealth (log scale)")
    ax.legend()
    ax.set_title("Backtest wealth curves")
    fig.tight_layout()
    fig.savefig(path, **_SAVEKW)
    plt.close(fig)


def save_rolling_cagr(path, series: dict[str, list[tuple[int, float]]],
                      crisis_years=None) -> None:
    fig, ax = plt.subplots(figsize=(9, 5))
    for name, pairs in series.items():
        if pairs:
            xs, ys = zip(*pairs)
            ax.plot(xs, ys, label=name)
    for cy in crisis_years or []:
        ax.axvspan(cy - 0.5, cy + 0.5, color="lightcoral", alpha=0.3)
    ax.axhline(0.0, color="gray", linewidth=0.8)
    ax.set_xlabel("window start year")
    ax.set_ylabel("rolling CAGR")
    ax.legend()
    ax.set_title("Rolling CAGR")
    fig.tight_layout()
    fig.savefig(path, **_SAVEKW)
    plt.close(fig)


def save_training_progress(path, rows) -> None:
    """rows: iterable of (iteration, mean_return, penalty, norm)."""
    rows = list(rows)
    if not rows:
        return
    its = [r[0] for r in rows]
    fig, (ax0, ax1) = plt.subplots(2, 1, figsize=(8, 6), sharex=True)
    ax0.plot(its, [r[1] for r in rows])
    ax0.set_ylabel("mean episode reward")
    ax1.plot(its, [r[2] for r in rows], color="darkorange")
    ax1.set_ylabel("utility-path penalty")
    ax1.set_xlabel("iteration")
    fig.tight_layout()
    fig.savefig(path, **_SAVEKW)
    plt.close(fig)
