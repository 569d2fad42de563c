"""Annual return panel ingestion and regime-detection features.

Returns are decimal fractions (0.07 means 7%). The feature set derived here
feeds the regime models: per-asset rolling volatility, rolling drawdown of
compounded wealth, trailing mean return, and cross-asset spreads.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np


class PanelError(ValueError):
    """Malformed or invalid return panel input."""


@dataclass(frozen=True)
class ReturnPanel:
    """T x N matrix of annual asset returns with year index."""

    years: list[int]
    asset_names: list[str]
    returns: np.ndarray  # shape (T, N), decimal fractions

    def __post_init__(self):
        returns = np.asarray(self.returns, dtype=float)
        object.__setattr__(self, "returns", returns)
        if returns.ndim != 2:
            raise PanelError("returns must be a 2-D matrix")
        if returns.shape != (len(self.years), len(self.asset_names)):
            raise PanelError(
                f"shape mismatch: returns {returns.shape} vs "
                f"{len(self.years)} years x {len(self.asset_names)} assets"
            )
        if len(set(self.years)) != len(self.years):
            raise PanelError("duplicate years in panel")
        if any(b <= a for a, b in zip(self.years, self.years[1:])):
            raise PanelError("years must be strictly increasing")
        if not np.all(np.isfinite(returns)):
            raise PanelError("non-finite return value")
        if np.any(returns <= -1.0):
            raise PanelError("return <= -1.0 (loss exceeding total capital)")

    @property
    def n_years(self) -> int:
        return len(self.years)

    @property
    def n_assets(self) -> int:
        return len(self.asset_names)

    def column(self, asset: str) -> np.ndarray:
        try:
            j = self.asset_names.index(asset)
        except ValueError:
            raise PanelError(f"unknown asset {asset!r}") from None
        return self.returns[:, j]


@dataclass(frozen=True)
class FeatureMatrix:
    """T' x F matrix of regime-detection features, aligned to trailing years."""

    years: list[int]
    feature_names: list[str]
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", values)
        if values.shape != (len(self.years), len(self.feature_names)):
            raise PanelError("feature matrix shape mismatch")
        if not np.all(np.isfinite(values)):
            raise PanelError("non-finite feature value")

    @property
    def n_rows(self) -> int:
        return len(self.years)

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["year"] + self.feature_names)
            for year, row in zip(self.years, self.values):
                writer.writerow([year] + [repr(float(v)) for v in row])


def load_return_panel(path) -> ReturnPanel:
    """Load a CSV panel: header `year,<asset>,...`, decimal-fraction cells.

    Rows are sorted by year; validation errors carry row/column context.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise PanelError(f"{path}: empty file") from None
        if not header or header[0].strip() != "year":
            raise PanelError(f"{path}: first column header must be 'year'")
        asset_names = [h.strip() for h in header[1:]]
        if not asset_names:
            raise PanelError(f"{path}: no asset columns")

        rows = []
        for lineno, cells in enumerate(reader, start=2):
            if not cells:
                continue
            if len(cells) != len(header):
                raise PanelError(
                    f"{path}:{lineno}: ragged row ({len(cells)} cells, expected {len(header)})"
                )
            try:
                year = int(cells[0])
            except ValueError:
                raise PanelError(f"{path}:{lineno}: bad year {cells[0]!r}") from None
            values = []
            for j, cell in enumerate(cells[1:], start=1):
                try:
                    values.append(float(cell))
                except ValueError:
                    raise PanelError(
                        f"{path}:{lineno}: column {header[j]!r}: bad value {cell!r}"
                    ) from None
            rows.append((year, values))

    if not rows:
        raise PanelError(f"{path}: no data rows")
    rows.sort(key=lambda r: r[0])
    years = [r[0] for r in rows]
    returns = np.array([r[1] for r in rows], dtype=float)
    return ReturnPanel(years=years, asset_names=asset_names, returns=returns)


def default_spread_pairs(asset_names: list[str]) -> list[tuple[str, str]]:
    """Corporate-vs-long-treasury and equity-vs-bill spreads when present."""
    lowered = {name.lower(): name for name in asset_names}

    def find(*keys):
        for key in keys:
            for low, orig in lowered.items():
                if key in low:
                    return orig
        return None

    pairs = []
    corp = find("baa", "corp")
    long_tsy = find("t10", "10y", "treas", "bond")
    if corp and long_tsy and corp != long_tsy:
        pairs.append((corp, long_tsy))
    equity = find("sp500", "s&p", "stock", "equit")
    bill = find("tbill", "t-bill", "bill", "cash")
    if equity and bill and equity != bill:
        pairs.append((equity, bill))
    return pairs


def _window_drawdown(window_returns: np.ndarray) -> float:
    # Wealth compounds from 1.0 at the window start; the base is part of
    # the running peak, so a first-step loss already registers.
    wealth = np.cumprod(1.0 + window_returns)
    peaks = np.maximum.accumulate(np.concatenate(([1.0], wealth)))[1:]
    return float(np.min(wealth / peaks - 1.0))


def compute_features(
    panel: ReturnPanel,
    window: int = 5,
    spread_pairs: list[tuple[str, str]] | None = None,
) -> FeatureMatrix:
    """Derive rolling features; row t uses only rows <= t of the panel.

    Emits per asset: sample std, worst within-window drawdown, trailing mean,
    each over `window` years; plus one column per spread pair (a minus b).
    The first window-1 rows are dropped.
    """
    if window < 2:
        raise PanelError("window must be >= 2")
    if window > panel.n_years:
        raise PanelError(f"window {window} exceeds panel length {panel.n_years}")
    if spread_pairs is None:
        spread_pairs = default_spread_pairs(panel.asset_names)
    for a, b in spread_pairs:
        panel.column(a), panel.column(b)

    T, N = panel.returns.shape
    out_years = panel.years[window - 1:]
    names: list[str] = []
    cols: list[np.ndarray] = []

    for j, asset in enumerate(panel.asset_names):
        series = panel.returns[:, j]
        vol = np.array([np.std(series[t - window + 1: t + 1], ddof=1) for t in range(window - 1, T)])
        dd = np.array([_window_drawdown(series[t - window + 1: t + 1]) for t in range(window - 1, T)])
        mean = np.array([np.mean(series[t - window + 1: t + 1]) for t in range(window - 1, T)])
        names += [f"{asset}_vol", f"{asset}_drawdown", f"{asset}_mean"]
        cols += [vol, dd, mean]

    for a, b in spread_pairs:
        spread = (panel.column(a) - panel.column(b))[window - 1:]
        names.append(f"spread_{a}_{b}")
        cols.append(spread)

    values = np.column_stack(cols)
    return FeatureMatrix(years=list(out_years), feature_names=names, values=values)
