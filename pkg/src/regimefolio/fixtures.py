"""Synthetic annual return panels.

The original study's dataset is proprietary, so experiments here run on
generated panels: a persistent two-state market (calm/stress) drives the
conditional distribution of a small asset universe whose names match the
spread-pair detection in dataio.
"""

from __future__ import annotations

import csv

import numpy as np

from .dataio import ReturnPanel
from .rng import child_stream

DEFAULT_ASSETS = ["SP500", "SmallCap", "T10Y", "Baa", "TBill", "Gold"]

# Per-regime (mean, std) for each default asset: calm then stress.
_CALM = {
    "SP500": (0.11, 0.12), "SmallCap": (0.13, 0.16), "T10Y": (0.04, 0.06),
    "Baa": (0.06, 0.05), "TBill": (0.03, 0.01), "Gold": (0.04, 0.12),
}
_STRESS = {
    "SP500": (-0.12, 0.22), "SmallCap": (-0.18, 0.28), "T10Y": (0.07, 0.09),
    "Baa": (0.00, 0.10), "TBill": (0.02, 0.01), "Gold": (0.10, 0.18),
}


def synthetic_panel(
    n_years: int = 70,
    seed: int = 0,
    start_year: int = 1950,
    stay_calm: float = 0.9,
    stay_stress: float = 0.6,
    assets: list[str] | None = None,
) -> tuple[ReturnPanel, np.ndarray]:
    """Generate a panel plus the true regime labels that produced it."""
    assets = assets or DEFAULT_ASSETS
    rng = child_stream(seed, "fixtures.panel")
    labels = np.empty(n_years, dtype=int)
    labels[0] = 0
    for t in range(1, n_years):
        stay = stay_calm if labels[t - 1] == 0 else stay_stress
        labels[t] = labels[t - 1] if rng.random() < stay else 1 - labels[t - 1]

    returns = np.empty((n_years, len(assets)))
    for t in range(n_years):
        table = _CALM if labels[t] == 0 else _STRESS
        for j, asset in enumerate(assets):
            mean, std = table.get(asset, (0.05, 0.10))
            returns[t, j] = max(rng.normal(mean, std), -0.95)

    panel = ReturnPanel(
        years=list(range(start_year, start_year + n_years)),
        asset_names=list(assets),
        returns=returns,
    )
    return panel, labels


def write_panel_csv(panel: ReturnPanel, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["year"] + panel.asset_names)
        for year, row in zip(panel.years, panel.returns):
            writer.writerow([year] + [repr(float(v)) for v in row])
