"""Typed tables, CSV ingestion, missingness injection and splitting.

A cell is one of three things:

* ``None`` -- missing,
* ``str`` -- a category,
* ``float`` -- a finite number.

Tables are immutable. Every masking operation returns a new table whose
column statistics are recomputed from the cells that remain observed, so an
in-memory masked table is indistinguishable from the same table written to
CSV and loaded back.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

Cell = Union[str, float, None]

DEFAULT_MISSING_TOKENS = ("", "na", "nan", "null")


class SchemaError(ValueError):
    """Raised when data does not conform to its declared schema."""


class Kind(str, Enum):
    CATEGORICAL = "categorical"
    NORMAL = "normal"
    EMPIRICAL = "empirical"
    NUMERIC_BINNED = "numeric-binned"


@dataclass(frozen=True)
class FeatureSpec:
    """Per-column metadata.

    ``distinct_values`` is the ordered set of observed values: first
    appearance order for categories, ascending for numbers. ``mean`` and
    ``std`` are only populated for normal and numeric-binned columns.
    ``lower``/``upper`` bound the observed numeric range.
    """

    name: str
    kind: Kind = Kind.CATEGORICAL
    description: str = ""
    distinct_values: tuple = ()
    mean: float | None = None
    std: float | None = None
    numeric: bool = False
    lower: float | None = None
    upper: float | None = None

    @property
    def gaussian(self) -> bool:
        return self.kind in (Kind.NORMAL, Kind.NUMERIC_BINNED)


@dataclass(frozen=True)
class Schema:
    features: tuple[FeatureSpec, ...]
    label: str | None = None
    description: str = ""
    missing_tokens: tuple[str, ...] = DEFAULT_MISSING_TOKENS

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.features]

    def to_dict(self) -> dict:
        return {
            "description": self.description,
            "label": self.label,
            "missing_tokens": list(self.missing_tokens),
            "columns": [
                {"name": f.name, "kind": f.kind.value, "description": f.description}
                for f in self.features
            ],
        }


def schema_from_dict(payload: Mapping) -> Schema:
    columns = payload.get("columns")
    if not columns:
        raise SchemaError("schema has no columns")
    features = []
    label = payload.get("label")
    for col in columns:
        try:
            kind = Kind(col.get("kind", "categorical"))
        except ValueError as exc:
            raise SchemaError(f"unknown kind {col.get('kind')!r} for {col['name']!r}") from exc
        features.append(FeatureSpec(col["name"], kind, col.get("description", "")))
        if col.get("label"):
            if label is not None and label != col["name"]:
                raise SchemaError("more than one label column declared")
            label = col["name"]
    names = [f.name for f in features]
    if len(set(names)) != len(names):
        raise SchemaError("duplicate column names in schema")
    if label is not None and label not in names:
        raise SchemaError(f"label {label!r} is not a schema column")
    tokens = tuple(t.lower() for t in payload.get("missing_tokens", DEFAULT_MISSING_TOKENS))
    return Schema(tuple(features), label, payload.get("description", ""), tokens)


def load_schema(path: str | Path) -> Schema:
    with open(path, encoding="utf-8") as fh:
        return schema_from_dict(json.load(fh))


def format_number(value: float, sig: int | None = None) -> str:
    """Render a number without a trailing ``.0`` for integers.

    With ``sig`` the value is rounded to that many significant digits and
    printed positionally; otherwise the shortest round-tripping form is used.
    """
    if float(value).is_integer() and abs(value) < 1e15:
        return str(int(value))
    if sig is None:
        return repr(float(value))
    return np.format_float_positional(value, precision=sig, unique=True, fractional=False, trim="-")


def format_cell(value: Cell, sig: int | None = None) -> str:
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    return format_number(value, sig)


def value_key(value: Cell):
    """Total order used for every "lexicographically smallest" tie-break."""
    if isinstance(value, str):
        return (1, 0.0, value)
    return (0, float(value), "")


def mode_of(values: Iterable[Cell]) -> Cell:
    counts = Counter(v for v in values if v is not None)
    if not counts:
        raise ValueError("mode of an empty collection")
    best = max(counts.values())
    return min((v for v, c in counts.items() if c == best), key=value_key)


def as_float(value: Cell) -> float | None:
    """Numeric view of a cell; categories that spell a number are accepted."""
    if value is None:
        return None
    if isinstance(value, str):
        try:
            out = float(value)
        except ValueError:
            return None
        return out if math.isfinite(out) else None
    return float(value)


def _derive_spec(spec: FeatureSpec, column: np.ndarray, notes: list[str]) -> tuple[FeatureSpec, np.ndarray]:
    observed = [v for v in column if v is not None]
    if spec.kind is Kind.CATEGORICAL:
        if any(not isinstance(v, str) for v in observed):
            column = np.array([None if v is None else format_cell(v) for v in column], dtype=object)
            observed = [v for v in column if v is not None]
        distinct = tuple(dict.fromkeys(observed))
        return replace(spec, distinct_values=distinct, mean=None, std=None, numeric=False,
                       lower=None, upper=None), column

    numeric = all(not isinstance(v, str) for v in observed)
    if spec.kind is Kind.EMPIRICAL and not numeric:
        column = np.array([None if v is None else format_cell(v) for v in column], dtype=object)
        observed = [v for v in column if v is not None]
        return replace(spec, distinct_values=tuple(dict.fromkeys(observed)), mean=None, std=None,
                       numeric=False, lower=None, upper=None), column
    if not numeric:
        raise SchemaError(f"column {spec.name!r} of kind {spec.kind.value} holds non-numeric cells")

    arr = np.asarray(observed, dtype=float)
    if arr.size == 0:
        return replace(spec, distinct_values=(), mean=None, std=None, numeric=True,
                       lower=None, upper=None), column
    lower, upper = float(arr.min()), float(arr.max())
    if spec.kind is Kind.EMPIRICAL:
        return replace(spec, distinct_values=tuple(float(v) for v in np.unique(arr)), mean=None,
                       std=None, numeric=True, lower=lower, upper=upper), column
    mean, std = float(arr.mean()), float(arr.std())
    if not std > 0.0:
        notes.append(f"column {spec.name!r} has zero variance; re-kinded from {spec.kind.value} to categorical")
        warnings.warn(notes[-1], stacklevel=3)
        return _derive_spec(replace(spec, kind=Kind.CATEGORICAL), column, notes)
    return replace(spec, distinct_values=tuple(float(v) for v in np.unique(arr)), mean=mean,
                   std=std, numeric=True, lower=lower, upper=upper), column


@dataclass(frozen=True, eq=False)
class Table:
    """An ``n x d`` cell matrix with its missingness mask.

    ``shadow`` maps ``(row, col)`` of every cell masked by an injector to
    its ground-truth value. ``row_ids`` tracks original row numbers across
    splits. Build instances with :meth:`Table.build`.
    """

    columns: tuple[FeatureSpec, ...]
    values: np.ndarray
    mask: np.ndarray
    label: int | None = None
    shadow: Mapping[tuple[int, int], Cell] = field(default_factory=dict)
    row_ids: np.ndarray | None = None
    description: str = ""
    notes: tuple[str, ...] = ()
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def build(
        cls,
        columns: Sequence[FeatureSpec],
        values,
        label: int | str | None = None,
        shadow: Mapping[tuple[int, int], Cell] | None = None,
        row_ids: np.ndarray | None = None,
        description: str = "",
        notes: Sequence[str] = (),
    ) -> "Table":
        """Validate cells and derive per-column statistics."""
        grid = np.empty((len(values), len(columns)), dtype=object)
        for i, row in enumerate(values):
            if len(row) != len(columns):
                raise SchemaError(f"row {i} has {len(row)} cells, expected {len(columns)}")
            for j, v in enumerate(row):
                if v is None or isinstance(v, str):
                    grid[i, j] = v
                else:
                    v = float(v)
                    if not math.isfinite(v):
                        raise SchemaError(f"non-finite number at row {i}, column {j}")
                    grid[i, j] = v
        notes = list(notes)
        specs = []
        for j, spec in enumerate(columns):
            spec, grid[:, j] = _derive_spec(spec, grid[:, j], notes)
            specs.append(spec)
        if isinstance(label, str):
            names = [s.name for s in specs]
            if label not in names:
                raise SchemaError(f"label {label!r} is not a column")
            label = names.index(label)
        n = grid.shape[0]
        mask = np.frompyfunc(lambda v: v is None, 1, 1)(grid).astype(bool) if n else np.zeros(grid.shape, bool)
        mask.setflags(write=False)
        grid.setflags(write=False)
        ids = np.arange(n) if row_ids is None else np.asarray(row_ids, dtype=int)
        return cls(tuple(specs), grid, mask, label, dict(shadow or {}), ids, description, tuple(notes))

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    def column_index(self, name: str) -> int:
        return self.names.index(name)

    def observed(self, j: int) -> list:
        return [v for v in self.values[:, j] if v is not None]

    def codes(self, j: int) -> tuple[np.ndarray, tuple]:
        """Integer codes of column ``j`` (-1 where missing) and their levels.

        Levels follow ``distinct_values`` order.
        """
        key = ("codes", j)
        if key not in self._cache:
            levels = self.columns[j].distinct_values
            lookup = {v: k for k, v in enumerate(levels)}
            codes = np.fromiter((lookup.get(v, -1) if v is not None else -1 for v in self.values[:, j]),
                                dtype=np.int64, count=self.n)
            self._cache[key] = (codes, levels)
        return self._cache[key]

    def with_values(self, values, shadow: Mapping | None = None, notes: Sequence[str] = ()) -> "Table":
        return Table.build(
            self.columns, values, self.label,
            self.shadow if shadow is None else shadow,
            self.row_ids, self.description, self.notes + tuple(notes),
        )

    def take(self, rows: Sequence[int]) -> "Table":
        """Sub-table of ``rows`` (in the given order); shadow keys are remapped."""
        rows = list(rows)
        position = {r: k for k, r in enumerate(rows)}
        shadow = {(position[r], c): v for (r, c), v in self.shadow.items() if r in position}
        return Table.build(self.columns, self.values[rows].tolist(), self.label, shadow,
                           self.row_ids[rows], self.description, self.notes)

    def truth(self) -> "Table":
        """The table with every shadowed cell restored."""
        grid = self.values.copy()
        for (r, c), v in self.shadow.items():
            grid[r, c] = v
        return Table.build(self.columns, grid.tolist(), self.label, {}, self.row_ids,
                           self.description, self.notes)


def _parse_cell(raw: str, spec: FeatureSpec, tokens: set[str], where: str) -> Cell:
    text = raw.strip()
    if text.lower() in tokens:
        return None
    if spec.kind is Kind.CATEGORICAL:
        return text
    try:
        value = float(text)
    except ValueError:
        if spec.kind is Kind.EMPIRICAL:
            return text
        raise SchemaError(f"unparseable numeric cell {raw!r} at {where}") from None
    if not math.isfinite(value):
        raise SchemaError(f"non-finite numeric cell {raw!r} at {where}")
    return value


def load_csv(path: str | Path, schema: Schema) -> Table:
    """Read a headered CSV against ``schema``.

    Cells spelled as one of ``schema.missing_tokens`` (case-insensitive)
    are missing.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if header != schema.names:
        raise SchemaError(f"{path}: header {header} does not match schema {schema.names}")
    tokens = set(schema.missing_tokens)
    values = []
    for r, row in enumerate(rows[1:], start=2):
        if not row:
            if len(header) > 1:
                continue
            row = [""]  # a blank line is a missing cell in a one-column file
        if len(row) != len(header):
            raise SchemaError(f"{path}:{r}: expected {len(header)} cells, found {len(row)}")
        values.append([
            _parse_cell(raw, spec, tokens, f"{path}:{r}:{spec.name}")
            for raw, spec in zip(row, schema.features)
        ])
    return Table.build(schema.features, values, schema.label, description=schema.description)


def write_csv(table: Table, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(table.names)
        for row in table.values:
            writer.writerow([format_cell(v) for v in row])


def write_shadow(table: Table, path: str | Path) -> None:
    """Write ground truth as sparse ``row,col,value`` lines, sorted."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["row", "col", "value"])
        for (r, c), v in sorted(table.shadow.items()):
            writer.writerow([r, c, format_cell(v)])


def read_shadow(path: str | Path, schema: Schema | Table) -> dict[tuple[int, int], Cell]:
    features = schema.columns if isinstance(schema, Table) else schema.features
    shadow = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["row", "col", "value"]:
            raise SchemaError(f"{path}: not a shadow file")
        for line in reader:
            r, c, raw = int(line[0]), int(line[1]), line[2]
            spec = features[c]
            value = raw if not spec.numeric else float(raw)
            if spec.kind is Kind.EMPIRICAL and not spec.numeric:
                value = raw
            shadow[(r, c)] = value
    return shadow


def attach_shadow(table: Table, shadow: Mapping[tuple[int, int], Cell]) -> Table:
    for (r, c) in shadow:
        if not (0 <= r < table.n and 0 <= c < table.d) or not table.mask[r, c]:
            raise SchemaError(f"shadow entry ({r}, {c}) does not point at a missing cell")
    return replace(table, shadow=dict(shadow), _cache={})


def _mask_cells(table: Table, cells: Iterable[tuple[int, int]]) -> Table:
    grid = table.values.copy()
    shadow = dict(table.shadow)
    for r, c in cells:
        if grid[r, c] is not None:
            shadow[(int(r), int(c))] = grid[r, c]
            grid[r, c] = None
    return table.with_values(grid.tolist(), shadow)


def _exact_count(rate: float, observed: int) -> int:
    # guard against 0.29 * 100 == 28.999...
    return int(math.floor(rate * observed + 1e-9))


def apply_mcar(table: Table, rate: float, seed: int, columns: Sequence[int] | None = None) -> Table:
    """Mask exactly ``floor(rate * observed)`` cells per column, uniformly."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"rate must lie in [0, 1), got {rate}")
    rng = np.random.default_rng(seed)
    cells = []
    for j in range(table.d) if columns is None else columns:
        obs = np.flatnonzero(~table.mask[:, j])
        k = _exact_count(rate, obs.size)
        if k:
            cells.extend((int(r), j) for r in np.sort(rng.choice(obs, size=k, replace=False)))
    return _mask_cells(table, cells)


def _ordering_values(table: Table, j: int) -> np.ndarray:
    """Float keys for percentile rules; NaN where missing.

    Numeric-looking categories compare numerically, other categories by
    their sorted position.
    """
    col = table.values[:, j]
    nums = [as_float(v) for v in col]
    if all(x is not None for v, x in zip(col, nums) if v is not None):
        return np.array([np.nan if x is None else x for x in nums])
    order = {v: k for k, v in enumerate(sorted({v for v in col if v is not None}, key=value_key))}
    return np.array([np.nan if v is None else float(order[v]) for v in col])


def lower_percentile_rows(keys: np.ndarray, percentile: float) -> np.ndarray:
    """Rows whose key is at or below the nearest-rank ``percentile`` cutoff."""
    observed = np.sort(keys[~np.isnan(keys)])
    k = _exact_count(percentile, observed.size)
    if k == 0:
        return np.zeros(keys.shape, dtype=bool)
    cutoff = observed[k - 1]
    with np.errstate(invalid="ignore"):
        return ~np.isnan(keys) & (keys <= cutoff)


def apply_mar(table: Table, percentile: float, rate: float, seed: int) -> Table:
    """Mask ``rate`` of the non-label cells of rows in the label's lower percentile.

    Counts are exact per column among the qualifying rows.
    """
    if table.label is None:
        raise SchemaError("MAR masking needs a label column")
    if not (0.0 < percentile < 1.0 and 0.0 < rate < 1.0):
        raise ValueError("percentile and rate must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    rows = lower_percentile_rows(_ordering_values(table, table.label), percentile)
    cells = []
    for j in range(table.d):
        if j == table.label:
            continue
        obs = np.flatnonzero(rows & ~table.mask[:, j])
        k = _exact_count(rate, obs.size)
        if k:
            cells.extend((int(r), j) for r in np.sort(rng.choice(obs, size=k, replace=False)))
    return _mask_cells(table, cells)


def is_binary(table: Table, j: int) -> bool:
    observed = {as_float(v) for v in table.observed(j)}
    return bool(observed) and observed <= {0.0, 1.0}


def apply_mnar(
    table: Table,
    seed: int,
    self_rate: float = 0.3,
    cross_rate: float = 0.4,
    percentile: float = 0.3,
) -> Table:
    """Value-dependent masking.

    Binary columns: each observed 1 is masked with probability ``self_rate``;
    any observed cell is masked with probability ``cross_rate`` when the
    next column holds 0 in the same row (the last column has no next).
    Other columns: cells in the lower ``percentile`` of the column are masked.
    Every rule reads the input table, never partially masked output.
    """
    rng = np.random.default_rng(seed)
    u_self = rng.random((table.n, table.d))
    u_cross = rng.random((table.n, table.d))
    hit = np.zeros((table.n, table.d), dtype=bool)
    as_num = np.array([[np.nan if x is None else x for x in map(as_float, row)] for row in table.values]
                      ).reshape(table.n, table.d)
    for j in range(table.d):
        observed = ~table.mask[:, j]
        if is_binary(table, j):
            hit[:, j] |= observed & (as_num[:, j] == 1.0) & (u_self[:, j] < self_rate)
            if j + 1 < table.d:
                hit[:, j] |= observed & (as_num[:, j + 1] == 0.0) & (u_cross[:, j] < cross_rate)
        else:
            hit[:, j] |= lower_percentile_rows(_ordering_values(table, j), percentile)
    return _mask_cells(table, zip(*np.nonzero(hit)))


def split(table: Table, ratio: float, seed: int) -> tuple[Table, Table]:
    """Seeded row partition into ``floor(ratio * n)`` and the rest.

    Rows keep their relative order inside each part.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    if table.n < 2:
        raise ValueError("need at least two rows to split")
    perm = np.random.default_rng(seed).permutation(table.n)
    cut = _exact_count(ratio, table.n)
    return table.take(np.sort(perm[:cut])), table.take(np.sort(perm[cut:]))


def inject(table: Table, mechanism: str, seed: int, rate: float = 0.4, percentile: float = 0.3) -> Table:
    if mechanism == "mcar":
        return apply_mcar(table, rate, seed)
    if mechanism == "mar":
        return apply_mar(table, percentile, rate, seed)
    if mechanism == "mnar":
        return apply_mnar(table, seed)
    raise ValueError(f"unknown missingness mechanism {mechanism!r}")


def mask_and_split(
    table: Table,
    mechanism: str,
    seed: int,
    ratio: float = 0.8,
    order: str = "mask_then_split",
    rate: float = 0.4,
    percentile: float = 0.3,
) -> tuple[Table, np.ndarray]:
    """Inject missingness and choose a train/test partition.

    Returns the masked full table and a boolean ``is_train`` vector. With
    ``split_then_mask`` each part is masked separately, so per-column exact
    counts hold within each part.
    """
    perm = np.random.default_rng(seed).permutation(table.n)
    is_train = np.zeros(table.n, dtype=bool)
    is_train[perm[:_exact_count(ratio, table.n)]] = True
    if order == "mask_then_split":
        return inject(table, mechanism, seed, rate, percentile), is_train
    if order != "split_then_mask":
        raise ValueError(f"unknown order {order!r}")
    grid = table.values.copy()
    shadow = {}
    for part, part_seed in ((np.flatnonzero(is_train), seed), (np.flatnonzero(~is_train), seed + 1)):
        masked = inject(table.take(part), mechanism, part_seed, rate, percentile)
        grid[part] = masked.values
        shadow.update({(int(part[r]), c): v for (r, c), v in masked.shadow.items()})
    return table.with_values(grid.tolist(), shadow), is_train


@dataclass(frozen=True)
class FeatureStats:
    names: tuple[str, ...]
    modes: tuple[Cell, ...]
    mode_shares: tuple[float, ...]
    means: tuple[float | None, ...]
    stds: tuple[float | None, ...]
    histograms: tuple[dict, ...]
    numeric: tuple[bool, ...]
    correlation: np.ndarray


def coded_matrix(table: Table) -> np.ndarray:
    """Float matrix with NaN for missing; categories become first-appearance codes."""
    out = np.full((table.n, table.d), np.nan)
    for j, spec in enumerate(table.columns):
        if spec.numeric:
            out[:, j] = [np.nan if v is None else v for v in table.values[:, j]]
        else:
            lookup = {v: float(k) for k, v in enumerate(dict.fromkeys(table.observed(j)))}
            out[:, j] = [np.nan if v is None else lookup[v] for v in table.values[:, j]]
    return out


def pairwise_pearson(x: np.ndarray) -> np.ndarray:
    """Pearson correlation over pairwise-complete rows; 0 when undefined."""
    d = x.shape[1]
    obs = ~np.isnan(x)
    corr = np.zeros((d, d))
    for a in range(d):
        for b in range(a, d):
            both = obs[:, a] & obs[:, b]
            if both.sum() < 2:
                continue
            u, v = x[both, a], x[both, b]
            u, v = u - u.mean(), v - v.mean()
            denom = math.sqrt(float(u @ u) * float(v @ v))
            if denom > 0:
                corr[a, b] = corr[b, a] = float(np.clip((u @ v) / denom, -1.0, 1.0))
    return corr


def feature_stats(table: Table) -> FeatureStats:
    modes, shares, means, stds, hists = [], [], [], [], []
    for j, spec in enumerate(table.columns):
        obs = table.observed(j)
        if not obs:
            raise ValueError(f"column {spec.name!r} is fully missing")
        hist = Counter(obs)
        mode = mode_of(obs)
        modes.append(mode)
        shares.append(hist[mode] / len(obs))
        hists.append(dict(sorted(hist.items(), key=lambda kv: value_key(kv[0]))))
        if spec.numeric:
            arr = np.asarray(obs, dtype=float)
            means.append(float(arr.mean()))
            stds.append(float(arr.std()))
        else:
            means.append(None)
            stds.append(None)
    return FeatureStats(
        tuple(table.names), tuple(modes), tuple(shares), tuple(means), tuple(stds),
        tuple(hists), tuple(c.numeric for c in table.columns), pairwise_pearson(coded_matrix(table)),
    )
