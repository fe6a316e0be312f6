"""Accuracy metrics, a downstream classifier and the neighbour-search benchmark.

Numeric cells count as correct when the imputed and true values agree after
rounding both to the decimal grid of the column's originally observed cells.
"""
from __future__ import annotations

import csv
import gc
import io
import json
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .baselines import grid_decimals, knn_neighbors, round_half_up
from .dataset import Cell, FeatureSpec, Kind, Table, as_float, value_key
from .forest import VoteLedger
from .infograph import build_all
from .merge import MergeThreshold, max_levels, merge_hierarchy
from .walk import WalkConfig, select_all_neighbors


def _column_grids(table: Table, shadow: Mapping) -> list[int | None]:
    """Decimal grid per numeric column from cells that were never masked."""
    grids = []
    for j, spec in enumerate(table.columns):
        if not spec.numeric:
            grids.append(None)
            continue
        kept = [v for i, v in enumerate(table.values[:, j]) if v is not None and (i, j) not in shadow]
        grids.append(grid_decimals(kept))
    return grids


def cell_correct(predicted: Cell, truth: Cell, decimals: int | None) -> bool:
    if predicted is None:
        return False
    if decimals is None:
        return predicted == truth
    p, t = as_float(predicted), as_float(truth)
    if p is None or t is None:
        return False
    return round_half_up(p, decimals) == round_half_up(t, decimals)


def _per_cell(imputed: Table, shadow: Mapping) -> dict[tuple[int, int], bool]:
    grids = _column_grids(imputed, shadow)
    return {(r, c): cell_correct(imputed.values[r, c], truth, grids[c]) for (r, c), truth in shadow.items()}


def imputation_accuracy(imputed: Table, shadow: Mapping[tuple[int, int], Cell],
                        mask: np.ndarray | None = None) -> float:
    """Share of masked cells whose imputed value matches the truth.

    ``mask`` selects the scored cells (default: every shadow entry) and each
    of them must have a shadow value.
    """
    if mask is not None:
        cells = [tuple(int(x) for x in rc) for rc in np.argwhere(mask)]
        missing = [rc for rc in cells if rc not in shadow]
        if missing:
            raise KeyError(f"no ground truth for cell {missing[0]}")
        shadow = {rc: shadow[rc] for rc in cells}
    if not shadow:
        raise ValueError("no masked cells to score")
    correct = _per_cell(imputed, shadow)
    return sum(correct.values()) / len(correct)


def accuracy_by_confidence(ledger: VoteLedger, shadow: Mapping, imputed: Table) -> dict[str, float]:
    """Accuracy within each aggregate-confidence bucket of voted cells.

    Fallback cells carry no confidence and are left out; empty buckets are
    absent from the result.
    """
    grids = _column_grids(imputed, shadow)
    hits: dict[str, list[bool]] = defaultdict(list)
    for rec in ledger:
        if rec.confidence is None:
            continue
        j = imputed.column_index(rec.feature)
        hits[rec.confidence.value].append(cell_correct(rec.winner, shadow[(rec.row, j)], grids[j]))
    order = ("High", "Medium", "Low")
    return {k: sum(hits[k]) / len(hits[k]) for k in order if hits[k]}


@dataclass
class EvalReport:
    accuracy: float
    per_feature: dict[str, float]
    cells: int
    accuracy_by_confidence: dict[str, float] = field(default_factory=dict)
    unimputed_rate: float | None = None
    invalid_rate: float | None = None
    fallback_rate: float | None = None
    downstream: dict | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        rows = [("overall accuracy", f"{self.accuracy:.4f}"), ("masked cells", str(self.cells))]
        rows += [(f"accuracy[{k}]", f"{v:.4f}") for k, v in self.per_feature.items()]
        rows += [(f"confidence {k}", f"{v:.4f}") for k, v in self.accuracy_by_confidence.items()]
        for name in ("unimputed_rate", "invalid_rate", "fallback_rate"):
            value = getattr(self, name)
            if value is not None:
                rows.append((name.replace("_", " "), f"{value:.4f}"))
        for k, v in (self.downstream or {}).items():
            rows.append((f"downstream {k}", f"{v:.4f}"))
        width = max(len(r[0]) for r in rows)
        return "".join(f"{k:<{width}}  {v}\n" for k, v in rows)


def evaluate(imputed: Table, shadow: Mapping, ledger: VoteLedger | None = None,
             trees: int | None = None) -> EvalReport:
    correct = _per_cell(imputed, shadow)
    if not correct:
        raise ValueError("no masked cells to score")
    by_col: dict[int, list[bool]] = defaultdict(list)
    for (_, c), ok in correct.items():
        by_col[c].append(ok)
    per_feature = {imputed.names[c]: sum(v) / len(v) for c, v in sorted(by_col.items())}
    report = EvalReport(sum(correct.values()) / len(correct), per_feature, len(correct))
    if ledger is not None and len(ledger):
        slots = len(ledger) * (trees or 1)
        report.accuracy_by_confidence = accuracy_by_confidence(ledger, shadow, imputed)
        report.unimputed_rate = sum(len(r.unimputed_trees) for r in ledger) / slots
        report.invalid_rate = sum(len(r.invalid_trees) for r in ledger) / slots
        report.fallback_rate = sum(r.fallback is not None for r in ledger) / len(ledger)
    return report


# ---------------------------------------------------------------- downstream


@dataclass(frozen=True)
class Encoder:
    """One-hot for categorical columns, z-scores for numeric ones."""

    columns: tuple[int, ...]
    numeric: tuple[bool, ...]
    levels: tuple[tuple, ...]
    means: tuple[float, ...]
    stds: tuple[float, ...]

    @classmethod
    def fit(cls, table: Table, exclude: int) -> "Encoder":
        cols, numeric, levels, means, stds = [], [], [], [], []
        for j, spec in enumerate(table.columns):
            if j == exclude:
                continue
            obs = table.observed(j)
            cols.append(j)
            numeric.append(spec.numeric)
            if spec.numeric:
                arr = np.asarray(obs, dtype=float)
                levels.append(())
                means.append(float(arr.mean()) if arr.size else 0.0)
                stds.append((float(arr.std()) or 1.0) if arr.size else 1.0)
            else:
                levels.append(tuple(sorted(set(obs), key=value_key)))
                means.append(0.0)
                stds.append(1.0)
        return cls(tuple(cols), tuple(numeric), tuple(levels), tuple(means), tuple(stds))

    def transform(self, table: Table) -> np.ndarray:
        blocks = []
        for j, num, lev, mu, sd in zip(self.columns, self.numeric, self.levels, self.means, self.stds):
            col = table.values[:, j]
            if num:
                x = np.array([0.0 if v is None else (float(v) - mu) / sd for v in col])
                blocks.append(x[:, None])
            else:
                index = {v: k for k, v in enumerate(lev)}
                x = np.zeros((table.n, len(lev)))
                for i, v in enumerate(col):
                    if v in index:
                        x[i, index[v]] = 1.0
                blocks.append(x)
        blocks.append(np.ones((table.n, 1)))
        return np.hstack(blocks)


@dataclass(frozen=True)
class LogisticModel:
    encoder: Encoder
    label: int
    classes: tuple
    coef: np.ndarray
    losses: tuple[float, ...]

    def predict(self, table: Table) -> list:
        z = self.encoder.transform(table) @ self.coef
        return [self.classes[1] if s > 0 else self.classes[0] for s in z]

    def accuracy(self, table: Table) -> float:
        truth = table.values[:, self.label]
        pred = self.predict(table)
        pairs = [(p, t) for p, t in zip(pred, truth) if t is not None]
        return sum(p == t for p, t in pairs) / len(pairs)


def train_logreg(table: Table, label: int | str | None = None, epochs: int = 500, lr: float = 0.5,
                 l2: float = 0.0, seed: int = 0) -> LogisticModel:
    """Full-batch gradient-descent logistic regression on ``table``.

    The larger of the two label values is the positive class.
    """
    label = table.label if label is None else label
    if isinstance(label, str):
        label = table.column_index(label)
    if label is None:
        raise ValueError("no label column")
    rows = np.flatnonzero(~table.mask[:, label])
    classes = tuple(sorted(set(table.values[rows, label]), key=value_key))
    if len(classes) != 2:
        raise ValueError(f"the label must be binary, found {len(classes)} classes")
    encoder = Encoder.fit(table, label)
    x = encoder.transform(table)[rows]
    y = np.array([v == classes[1] for v in table.values[rows, label]], dtype=float)
    coef = np.random.default_rng(seed).normal(0.0, 0.01, x.shape[1])
    losses = []
    for _ in range(epochs):
        p = 1.0 / (1.0 + np.exp(-(x @ coef)))
        eps = 1e-12
        losses.append(float(-np.mean(y * np.log(p + eps) + (1 - y) * np.log(1 - p + eps))
                            + 0.5 * l2 * coef[:-1] @ coef[:-1]))
        grad = x.T @ (p - y) / len(y)
        grad[:-1] += l2 * coef[:-1]
        coef = coef - lr * grad
    return LogisticModel(encoder, label, classes, coef, tuple(losses))


def downstream_scores(imputed_train: Table, test_truth: Table, label: int | str | None = None,
                      **kwargs) -> dict[str, float]:
    """Train on the imputed training rows, score on the true test rows."""
    model = train_logreg(imputed_train, label, **kwargs)
    return {"train_accuracy": model.accuracy(imputed_train), "test_accuracy": model.accuracy(test_truth)}


# ---------------------------------------------------------------- benchmark


def synthetic_table(n: int, d: int, seed: int = 0, clusters: int = 8, levels: int = 6,
                    noise: float = 0.2) -> Table:
    """Categorical table with planted cluster structure."""
    rng = np.random.default_rng(seed)
    proto = rng.integers(0, levels, size=(clusters, d))
    member = rng.integers(0, clusters, size=n)
    grid = proto[member]
    flip = rng.random((n, d)) < noise
    grid = np.where(flip, rng.integers(0, levels, size=(n, d)), grid)
    columns = [FeatureSpec(f"x{j}", Kind.CATEGORICAL) for j in range(d)]
    return Table.build(columns, [[f"c{v}" for v in row] for row in grid])


def planted_clusters(n: int = 100, d: int = 10, clusters: int = 4, keep: int = 8,
                     seed: int = 0) -> tuple[Table, np.ndarray]:
    """Rows in ``clusters`` groups sharing ``keep`` of ``d`` prototype values.

    Row ``i`` belongs to cluster ``i % clusters``. Its other ``d - keep``
    cells take the prototype value of a different cluster, so no column
    separates the clusters by itself.
    """
    rng = np.random.default_rng(seed)
    rows, member = [], np.arange(n) % clusters
    for c in member:
        row = [f"v{c}_{j}" for j in range(d)]
        for j in rng.choice(d, d - keep, replace=False):
            other = rng.choice([x for x in range(clusters) if x != c])
            row[j] = f"v{other}_{j}"
        rows.append(row)
    columns = [FeatureSpec(f"f{j}", Kind.CATEGORICAL) for j in range(d)]
    return Table.build(columns, rows), member


def graph_neighbors(table: Table, q: int, seed: int = 0, levels: int | None = None,
                    sigma: MergeThreshold | str = "jaccard:0.3", workers: int = 1) -> dict:
    graphs = build_all(table, workers=workers)
    levels = max_levels(table.d) if levels is None else min(levels, max_levels(table.d))
    _, merged = merge_hierarchy(graphs, levels, sigma, seed, workers)
    return select_all_neighbors(merged, range(table.n), WalkConfig(rounds=q, seed=seed))


@dataclass
class BenchReport:
    sizes: list[int]
    d: int
    q: int
    knn_seconds: list[float]
    graph_seconds: list[float]
    knn_samples: list[list[float]]
    graph_samples: list[list[float]]
    knn_slope: float
    graph_slope: float

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.sizes, self.sizes[1:])):
            raise ValueError("sizes must be strictly increasing")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_text(self) -> str:
        lines = [f"{'n':>8}  {'knn_s':>10}  {'graph_s':>10}"]
        lines += [f"{n:>8}  {k:>10.4f}  {g:>10.4f}" for n, k, g in
                  zip(self.sizes, self.knn_seconds, self.graph_seconds)]
        lines.append(f"{'slope':>8}  {self.knn_slope:>10.3f}  {self.graph_slope:>10.3f}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["n", "method", "repetition", "seconds"])
        for n, ks, gs in zip(self.sizes, self.knn_samples, self.graph_samples):
            for method, samples in (("knn", ks), ("graph", gs)):
                for r, s in enumerate(samples):
                    writer.writerow([n, method, r, repr(s)])
        return out.getvalue()

    def write(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "bench.json").write_text(self.to_json(), encoding="utf-8")
        (directory / "bench.txt").write_text(self.to_text(), encoding="utf-8")
        (directory / "bench.csv").write_text(self.to_csv(), encoding="utf-8")


def loglog_slope(sizes: Sequence[float], seconds: Sequence[float]) -> float:
    return float(np.polyfit(np.log(sizes), np.log(seconds), 1)[0])


def bench_neighbor_search(sizes: Sequence[int], d: int = 22, q: int = 5, repetitions: int = 3,
                          seed: int = 0, workers: int = 1) -> BenchReport:
    """Time all-rows top-``q`` search by KNN and by the graph pipeline.

    Only neighbour search is timed; table generation is excluded. Each
    size gets one untimed warm-up call, and the fastest repetition is
    reported since timing noise only ever adds time.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be at least 1")
    tables = [synthetic_table(n, d, seed) for n in sizes]
    for table in tables:
        knn_neighbors(table, q)
        graph_neighbors(table, q, seed, workers=workers)
    knn_samples = [[] for _ in sizes]
    graph_samples = [[] for _ in sizes]
    # sizes are interleaved within each repetition so a slow spell on the
    # host is spread across all of them rather than skewing one
    gc_was_on = gc.isenabled()
    gc.disable()
    try:
        for _ in range(repetitions):
            for k, table in enumerate(tables):
                start = time.perf_counter()
                knn_neighbors(table, q)
                knn_samples[k].append(time.perf_counter() - start)
                start = time.perf_counter()
                graph_neighbors(table, q, seed, workers=workers)
                graph_samples[k].append(time.perf_counter() - start)
    finally:
        if gc_was_on:
            gc.enable()
    knn_best = [min(s) for s in knn_samples]
    graph_best = [min(s) for s in graph_samples]
    slopes = (loglog_slope(sizes, knn_best), loglog_slope(sizes, graph_best)) if len(sizes) > 1 else (float("nan"),) * 2
    return BenchReport(list(sizes), d, q, knn_best, graph_best, knn_samples, graph_samples, *slopes)
