"""Per-feature bipartite information graphs.

For feature ``j`` the left side is every entry (row) and the right side is
one value node per distinct observed value. Entry ``i`` links to the node of
its value with weight ``log(1 + p)``, where ``p`` is the probability of that
value under the column's model (uniform, Gaussian density or empirical).
Rows missing feature ``j`` stay isolated in that graph.

Edge weights live in a sparse ``entries x nodes`` matrix. Every weight is
strictly positive, so the sparsity pattern is exactly the edge set.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from typing import IO, Iterator, Sequence

import numpy as np
import scipy.sparse as sp

from .dataset import Cell, FeatureSpec, Kind, Table, format_cell

DEFAULT_BINS = 10
MAX_DISTINCT_UNBINNED = 50


@dataclass(frozen=True)
class ValueNode:
    id: int
    members: frozenset

    def __post_init__(self):
        if not self.members:
            raise ValueError("a value node needs at least one (feature, value) member")


@dataclass(frozen=True, eq=False)
class BipartiteGraph:
    """Entries on the left, value nodes on the right.

    ``weights[i, k]`` is the weight of the edge between entry ``i`` and
    ``nodes[k]``; node ids equal their position.
    """

    nodes: tuple[ValueNode, ...]
    weights: sp.csr_matrix
    feature_cover: frozenset

    @property
    def n_entries(self) -> int:
        return self.weights.shape[0]

    @cached_property
    def by_node(self) -> sp.csc_matrix:
        return self.weights.tocsc()

    def entry_edges(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """Node ids and weights incident to entry ``i``."""
        w = self.weights
        lo, hi = w.indptr[i], w.indptr[i + 1]
        return w.indices[lo:hi], w.data[lo:hi]

    def node_edges(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Entries and weights incident to node ``k``."""
        w = self.by_node
        lo, hi = w.indptr[k], w.indptr[k + 1]
        return w.indices[lo:hi], w.data[lo:hi]

    def neighbors(self, k: int) -> frozenset:
        return frozenset(int(i) for i in self.node_edges(k)[0])

    def is_isolated(self, i: int) -> bool:
        return self.weights.indptr[i] == self.weights.indptr[i + 1]

    def total_weight(self) -> float:
        return float(self.weights.data.sum())

    def edges(self) -> Iterator[tuple[int, int, float]]:
        coo = self.weights.tocoo()
        order = np.lexsort((coo.col, coo.row))
        for r, c, v in zip(coo.row[order], coo.col[order], coo.data[order]):
            yield int(r), int(c), float(v)

    def dump(self, fh: IO[str]) -> None:
        """Line-oriented debug dump: ``node`` lines, then ``edge`` triples."""
        fh.write(f"# features {','.join(str(j) for j in sorted(self.feature_cover))}\n")
        for node in self.nodes:
            members = "|".join(f"{j}={format_cell(v)}" for j, v in sorted(node.members, key=_member_key))
            fh.write(f"node {node.id} {members}\n")
        for i, k, w in self.edges():
            fh.write(f"edge {i} {k} {w!r}\n")


def _member_key(member):
    j, v = member
    return (j, isinstance(v, str), v if isinstance(v, str) else float(v))


def edge_weight(p: float) -> float:
    """``log(1 + p)``, natural log."""
    if p < 0:
        raise ValueError(f"probability must be non-negative, got {p}")
    return math.log1p(p)


def gaussian_density(x, mean: float, std: float):
    z = (np.asarray(x, dtype=float) - mean) / std
    return np.exp(-0.5 * z * z) / (std * math.sqrt(2.0 * math.pi))


def value_probability(spec: FeatureSpec, value: Cell, column: Sequence[Cell]) -> float:
    """Probability of ``value`` in an observed ``column`` under ``spec.kind``.

    Categorical columns are uniform over their distinct values, normal and
    numeric-binned columns use the Gaussian density at the value, empirical
    columns use the observed frequency.
    """
    observed = [v for v in column if v is not None]
    if value is None:
        raise ValueError("cannot score a missing value")
    if spec.kind is Kind.CATEGORICAL:
        return 1.0 / len(set(observed))
    if spec.gaussian:
        if not spec.std:
            raise ValueError(f"column {spec.name!r} has no positive standard deviation")
        return float(gaussian_density(value, spec.mean, spec.std))
    count = sum(1 for v in observed if v == value)
    if count == 0:
        raise ValueError(f"value {value!r} never observed in column {spec.name!r}")
    return count / len(observed)


def _bin_edges(values: np.ndarray, bins: int) -> np.ndarray:
    return np.unique(np.quantile(values, np.linspace(0.0, 1.0, bins + 1)))


def uses_bins(spec: FeatureSpec, max_distinct: int = MAX_DISTINCT_UNBINNED) -> bool:
    if spec.kind is Kind.NUMERIC_BINNED:
        return True
    return spec.kind is Kind.NORMAL and len(spec.distinct_values) > max_distinct


def build_bipartite(
    table: Table,
    j: int,
    bins: int = DEFAULT_BINS,
    max_distinct: int = MAX_DISTINCT_UNBINNED,
) -> BipartiteGraph:
    """Graph of feature ``j`` in one pass over the column."""
    spec = table.columns[j]
    codes, levels = table.codes(j)
    rows = np.flatnonzero(codes >= 0)
    if rows.size == 0:
        raise ValueError(f"column {spec.name!r} is fully missing")
    level_codes = codes[rows]

    if spec.kind is Kind.CATEGORICAL:
        p = np.full(rows.size, 1.0 / len(levels))
    elif spec.gaussian:
        p = gaussian_density(np.asarray(levels, dtype=float)[level_codes], spec.mean, spec.std)
    else:
        counts = np.bincount(level_codes, minlength=len(levels))
        p = counts[level_codes] / rows.size

    if uses_bins(spec, max_distinct):
        level_values = np.asarray(levels, dtype=float)
        edges = _bin_edges(level_values[level_codes], bins)
        level_bin = np.searchsorted(edges[1:-1], level_values, side="right")
        used = np.unique(level_bin[level_codes])
        remap = np.full(level_bin.max() + 1, -1)
        remap[used] = np.arange(used.size)
        node_of_level = remap[level_bin]
        present = np.zeros(len(levels), dtype=bool)
        present[level_codes] = True
        groups = [[] for _ in range(used.size)]
        for k, v in enumerate(levels):
            if present[k]:
                groups[node_of_level[k]].append((j, v))
        nodes = tuple(ValueNode(k, frozenset(g)) for k, g in enumerate(groups))
        cols = node_of_level[level_codes]
    else:
        nodes = tuple(ValueNode(k, frozenset({(j, v)})) for k, v in enumerate(levels))
        cols = level_codes

    weights = sp.csr_matrix((np.log1p(p), (rows, cols)), shape=(table.n, len(nodes)))
    weights.sort_indices()
    return BipartiteGraph(nodes, weights, frozenset({j}))


def build_all(
    table: Table,
    bins: int = DEFAULT_BINS,
    max_distinct: int = MAX_DISTINCT_UNBINNED,
    workers: int = 1,
) -> list[BipartiteGraph]:
    """One graph per column, in column order."""
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(lambda j: build_bipartite(table, j, bins, max_distinct), range(table.d)))
    return [build_bipartite(table, j, bins, max_distinct) for j in range(table.d)]
