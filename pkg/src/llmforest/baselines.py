"""Mean, mode and KNN imputers used as comparison points."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataset import Cell, FeatureSpec, Table, format_number, mode_of


@dataclass(frozen=True)
class KnnConfig:
    k: int = 5
    distance: str = "hamming_overlap"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.distance != "hamming_overlap":
            raise ValueError(f"unknown distance {self.distance!r}")


def grid_decimals(values, cap: int = 6) -> int:
    """Decimal places needed to write every value in ``values`` (at most ``cap``)."""
    places = 0
    for v in values:
        text = format_number(float(v))
        if "e" in text or "E" in text:
            return cap
        if "." in text:
            places = max(places, len(text.split(".")[1]))
    return min(places, cap)


def round_half_up(x: float, decimals: int = 0) -> float:
    scale = 10.0 ** decimals
    return math.floor(x * scale + 0.5) / scale


def _check_complete(table: Table) -> None:
    for j, spec in enumerate(table.columns):
        if table.mask[:, j].all():
            raise ValueError(f"column {spec.name!r} is fully missing")


def _fill(table: Table, fills: dict[tuple[int, int], Cell]) -> Table:
    if not fills:
        return table
    grid = table.values.copy()
    for (i, j), v in fills.items():
        grid[i, j] = v
    return table.with_values(grid.tolist())


def _column_mean(spec: FeatureSpec, observed: list) -> float:
    mean = float(np.mean(np.asarray(observed, dtype=float)))
    if grid_decimals(spec.distinct_values) == 0:
        return round_half_up(mean)
    return mean


def impute_mode(table: Table) -> Table:
    """Each missing cell takes its column mode (ties to the smallest value)."""
    _check_complete(table)
    fills = {}
    for j in range(table.d):
        rows = np.flatnonzero(table.mask[:, j])
        if rows.size:
            mode = mode_of(table.observed(j))
            fills.update({(int(i), j): mode for i in rows})
    return _fill(table, fills)


def impute_mean(table: Table) -> Table:
    """Numeric columns take the observed mean, rounded half-up on integer columns.

    Non-numeric columns fall back to the mode.
    """
    _check_complete(table)
    fills = {}
    for j, spec in enumerate(table.columns):
        rows = np.flatnonzero(table.mask[:, j])
        if not rows.size:
            continue
        obs = table.observed(j)
        value = _column_mean(spec, obs) if spec.numeric else mode_of(obs)
        fills.update({(int(i), j): value for i in rows})
    return _fill(table, fills)


def _comparison_codes(table: Table) -> np.ndarray:
    """Integer code per cell for equality tests, -1 where missing.

    Numbers compare after rounding to 4 significant digits.
    """
    codes = np.full((table.n, table.d), -1, dtype=np.int64)
    for j, spec in enumerate(table.columns):
        lookup: dict = {}
        for i, v in enumerate(table.values[:, j]):
            if v is None:
                continue
            key = format_number(v, sig=4) if spec.numeric else v
            codes[i, j] = lookup.setdefault(key, len(lookup))
    return codes


def knn_distances(table: Table) -> np.ndarray:
    """Overlap-normalised Hamming distance between every pair of rows.

    The share of co-observed features on which two rows disagree; 1 when
    they share no observed feature.
    """
    codes = _comparison_codes(table)
    n = table.n
    mismatch = np.zeros((n, n), dtype=np.int32)
    overlap = np.zeros((n, n), dtype=np.int32)
    for j in range(table.d):
        col = codes[:, j]
        seen = col >= 0
        both = seen[:, None] & seen[None, :]
        overlap += both
        mismatch += both & (col[:, None] != col[None, :])
    with np.errstate(invalid="ignore", divide="ignore"):
        dist = np.where(overlap > 0, mismatch / np.maximum(overlap, 1), 1.0)
    return dist


def knn_neighbors(table: Table, q: int, dist: np.ndarray | None = None) -> np.ndarray:
    """``n x q`` nearest rows for every row, excluding itself; ties to the lower index."""
    if not 1 <= q <= table.n - 1:
        raise ValueError(f"q must lie in [1, n-1] = [1, {table.n - 1}], got {q}")
    dist = knn_distances(table) if dist is None else dist.copy()
    np.fill_diagonal(dist, np.inf)
    order = np.argsort(dist, axis=1, kind="stable")
    return order[:, :q]


def impute_knn(table: Table, config: KnnConfig | int = KnnConfig()) -> Table:
    """Impute from the ``k`` nearest rows that observe the missing feature.

    Categorical donors vote by mode; numeric donors are averaged, and
    integer columns are rounded half-up.
    """
    config = KnnConfig(config) if isinstance(config, int) else config
    if config.k > table.n - 1:
        raise ValueError(f"k={config.k} exceeds n-1={table.n - 1}")
    _check_complete(table)
    dist = knn_distances(table)
    fills = {}
    for j, spec in enumerate(table.columns):
        rows = np.flatnonzero(table.mask[:, j])
        if not rows.size:
            continue
        donors = np.flatnonzero(~table.mask[:, j])
        integer = spec.numeric and grid_decimals(spec.distinct_values) == 0
        for i in rows:
            pick = donors[np.argsort(dist[i, donors], kind="stable")[:config.k]]
            values = [table.values[r, j] for r in pick]
            if spec.numeric:
                mean = float(np.mean(values))
                fills[(int(i), j)] = round_half_up(mean) if integer else mean
            else:
                fills[(int(i), j)] = mode_of(values)
    return _fill(table, fills)


IMPUTERS = {"mean": impute_mean, "mode": impute_mode, "knn": impute_knn}
