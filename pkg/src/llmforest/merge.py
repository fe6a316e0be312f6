"""Hierarchical merging of bipartite graphs.

Two graphs over the same entries are merged by fusing value nodes whose
entry sets overlap strongly. A fused node's edge weight for an entry is the
sum of the entry's weights to the two original nodes (an absent edge counts
as zero), so merging only regroups weight and never creates or destroys it.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .infograph import BipartiteGraph, ValueNode


@dataclass(frozen=True)
class MergeThreshold:
    """When two value nodes are similar enough to fuse.

    ``jaccard`` compares the Jaccard coefficient of the two entry sets with
    ``value`` in [0, 1]; ``shared_count`` requires at least ``value`` shared
    entries.
    """

    unit: str = "shared_count"
    value: float = 20

    def __post_init__(self):
        if self.unit not in ("jaccard", "shared_count"):
            raise ValueError(f"unknown threshold unit {self.unit!r}")
        if self.unit == "jaccard" and not 0.0 <= self.value <= 1.0:
            raise ValueError("a Jaccard threshold must lie in [0, 1]")
        if self.value < 0:
            raise ValueError("threshold must be non-negative")

    @classmethod
    def parse(cls, text: "str | MergeThreshold | dict") -> "MergeThreshold":
        if isinstance(text, MergeThreshold):
            return text
        if isinstance(text, dict):
            return cls(text["unit"], float(text["value"]))
        unit, _, value = str(text).partition(":")
        if not value:
            raise ValueError(f"threshold must look like 'jaccard:0.5' or 'shared_count:20', got {text!r}")
        return cls(unit.strip(), float(value))

    def __str__(self) -> str:
        return f"{self.unit}:{self.value:g}"

    def admits(self, shared: np.ndarray, similarity: np.ndarray) -> np.ndarray:
        if self.unit == "jaccard":
            return similarity >= self.value
        return shared >= self.value


@dataclass(frozen=True)
class MergePlan:
    levels: int
    sigma: MergeThreshold
    pairing: tuple[tuple[tuple[int, int], ...], ...]
    seed: int

    def to_dict(self) -> dict:
        return {
            "levels": self.levels,
            "sigma": str(self.sigma),
            "pairing": [[list(p) for p in level] for level in self.pairing],
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "MergePlan":
        return cls(
            payload["levels"], MergeThreshold.parse(payload["sigma"]),
            tuple(tuple(tuple(p) for p in level) for level in payload["pairing"]), payload["seed"],
        )


def jaccard(left: set | frozenset, right: set | frozenset) -> float:
    union = len(left | right)
    return len(left & right) / union if union else 0.0


def node_similarity(ga: BipartiteGraph, gb: BipartiteGraph) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Shared-entry counts and Jaccard coefficients for every cross pair
    with at least one shared entry.

    Returns ``(rows, cols, shared, similarity)`` where ``rows`` index
    ``ga.nodes`` and ``cols`` index ``gb.nodes``.
    """
    ia = (ga.weights > 0).astype(np.float64)
    ib = (gb.weights > 0).astype(np.float64)
    size_a = np.asarray(ia.sum(axis=0)).ravel()
    size_b = np.asarray(ib.sum(axis=0)).ravel()
    shared = (ia.T @ ib).tocoo()
    rows, cols, count = shared.row, shared.col, shared.data
    union = size_a[rows] + size_b[cols] - count
    return rows, cols, count, count / union


def _dense_similarity(ga: BipartiteGraph, gb: BipartiteGraph):
    ia = (ga.weights > 0).astype(np.float64)
    ib = (gb.weights > 0).astype(np.float64)
    size_a = np.asarray(ia.sum(axis=0)).ravel()
    size_b = np.asarray(ib.sum(axis=0)).ravel()
    count = np.asarray((ia.T @ ib).todense())
    union = size_a[:, None] + size_b[None, :] - count
    with np.errstate(invalid="ignore", divide="ignore"):
        sim = np.where(union > 0, count / union, 0.0)
    rows, cols = np.indices(count.shape)
    return rows.ravel(), cols.ravel(), count.ravel(), sim.ravel()


def fusion_pairs(ga: BipartiteGraph, gb: BipartiteGraph, sigma: MergeThreshold) -> list[tuple[int, int, float]]:
    """Greedy one-pass matching in descending similarity.

    Ties fall back to node ids. Each node is fused at most once.
    """
    if sigma.value <= 0:
        rows, cols, shared, sim = _dense_similarity(ga, gb)
    else:
        rows, cols, shared, sim = node_similarity(ga, gb)
    keep = sigma.admits(shared, sim)
    rows, cols, sim = rows[keep], cols[keep], sim[keep]
    order = np.lexsort((cols, rows, -sim))
    used_a, used_b, fused = set(), set(), []
    for k in order:
        a, b = int(rows[k]), int(cols[k])
        if a in used_a or b in used_b:
            continue
        used_a.add(a)
        used_b.add(b)
        fused.append((a, b, float(sim[k])))
    return fused


def _assignment(n_old: int, targets: Sequence[int], n_new: int) -> sp.csr_matrix:
    return sp.csr_matrix((np.ones(n_old), (np.arange(n_old), np.asarray(targets))), shape=(n_old, n_new))


def merge_pair(ga: BipartiteGraph, gb: BipartiteGraph, sigma: MergeThreshold) -> BipartiteGraph:
    """Merge two graphs; nodes of ``ga`` keep their relative order and
    unfused nodes of ``gb`` follow."""
    if ga.n_entries != gb.n_entries:
        raise ValueError("graphs must share the same entry set")
    partner = {a: b for a, b, _ in fusion_pairs(ga, gb, MergeThreshold.parse(sigma))}
    fused_b = set(partner.values())
    target_a = list(range(len(ga.nodes)))
    target_b = [0] * len(gb.nodes)
    members = [set(node.members) for node in ga.nodes]
    for a, b in partner.items():
        target_b[b] = a
        members[a] |= gb.nodes[b].members
    for b, node in enumerate(gb.nodes):
        if b not in fused_b:
            target_b[b] = len(members)
            members.append(set(node.members))
    n_new = len(members)
    weights = ga.weights @ _assignment(len(ga.nodes), target_a, n_new)
    weights = weights + gb.weights @ _assignment(len(gb.nodes), target_b, n_new)
    weights = sp.csr_matrix(weights)
    weights.sort_indices()
    nodes = tuple(ValueNode(k, frozenset(m)) for k, m in enumerate(members))
    return BipartiteGraph(nodes, weights, ga.feature_cover | gb.feature_cover)


def max_levels(d: int) -> int:
    return math.ceil(math.log2(d)) if d > 1 else 0


def _pair_level(sizes: Sequence[int], rng: np.random.Generator) -> tuple[tuple[int, int], ...]:
    ties = rng.random(len(sizes))
    order = sorted(range(len(sizes)), key=lambda k: (sizes[k], ties[k]))
    if len(order) % 2:
        order.pop()  # the largest graph waits for the next level
    return tuple((order[k], order[k + 1]) for k in range(0, len(order), 2))


def _apply_level(graphs, pairs, sigma, workers):
    paired = {k for p in pairs for k in p}
    if workers > 1 and len(pairs) > 1:
        with ThreadPoolExecutor(workers) as pool:
            merged = list(pool.map(lambda p: merge_pair(graphs[p[0]], graphs[p[1]], sigma), pairs))
    else:
        merged = [merge_pair(graphs[a], graphs[b], sigma) for a, b in pairs]
    return merged + [g for k, g in enumerate(graphs) if k not in paired]


def merge_hierarchy(
    graphs: Sequence[BipartiteGraph],
    levels: int,
    sigma: MergeThreshold | str,
    seed: int,
    workers: int = 1,
) -> tuple[MergePlan, list[BipartiteGraph]]:
    """Plan and execute ``levels`` rounds of balanced pairwise merging.

    At each level graphs are sorted by right-side size (random tie-break)
    and adjacent ones are paired. Pairs within a level are independent and
    run on ``workers`` threads.
    """
    sigma = MergeThreshold.parse(sigma)
    if levels < 0:
        raise ValueError("levels must be non-negative")
    if levels > max_levels(len(graphs)):
        raise ValueError(f"at most {max_levels(len(graphs))} levels for {len(graphs)} graphs, got {levels}")
    rng = np.random.default_rng(seed)
    current = list(graphs)
    pairing = []
    for _ in range(levels):
        pairs = _pair_level([len(g.nodes) for g in current], rng)
        pairing.append(pairs)
        current = _apply_level(current, pairs, sigma, workers)
    return MergePlan(levels, sigma, tuple(pairing), seed), current


def plan_hierarchy(graphs: Sequence[BipartiteGraph], levels: int, sigma: MergeThreshold | str, seed: int) -> MergePlan:
    """The pairing :func:`merge_hierarchy` would use.

    Sizes at deeper levels depend on earlier merges, so those merges are run.
    """
    return merge_hierarchy(graphs, levels, sigma, seed)[0]


def run_merge(graphs: Sequence[BipartiteGraph], plan: MergePlan, workers: int = 1) -> list[BipartiteGraph]:
    current = list(graphs)
    for pairs in plan.pairing:
        for a, b in pairs:
            if not (0 <= a < len(current) and 0 <= b < len(current)) or a == b:
                raise ValueError(f"invalid pair ({a}, {b}) for {len(current)} graphs")
        current = _apply_level(current, pairs, plan.sigma, workers)
    return current
