"""Random-walk neighbour retrieval on (merged) bipartite graphs.

A walk starts at a target entry and alternates entry -> value node ->
entry. Both moves pick an incident edge with probability proportional to
``exp(weight / temperature)``. A walk's score is the mean weight of the
edges it crossed, and a candidate keeps the best score of any walk that
reached it.

Sampling uses per-row cumulative softmax tables built once per graph, so a
step costs ``O(log degree)`` regardless of how many entries share a value.
All walks for a batch of targets run as vectorised numpy operations; every
target draws from its own generator seeded by ``(seed, target)``, which
keeps results independent of batching and of worker count.
"""
from __future__ import annotations

import weakref
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .infograph import BipartiteGraph


class IsolatedEntry(LookupError):
    """The entry has no edges in this graph."""


@dataclass(frozen=True)
class WalkConfig:
    steps: int = 2
    rounds: int = 5
    seed: int = 0
    temperature: float = 1.0
    budget_factor: int = 5

    def __post_init__(self):
        if self.steps not in (2, 4):
            raise ValueError(f"steps must be 2 or 4, got {self.steps}")
        if self.rounds < 1:
            raise ValueError("rounds must be at least 1")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.budget_factor < 1:
            raise ValueError("budget_factor must be at least 1")

    @property
    def budget(self) -> int:
        return self.budget_factor * self.rounds


@dataclass(frozen=True)
class NeighborSet:
    target: int
    ranked: tuple[tuple[int, float], ...] = ()
    per_graph_provenance: dict = field(default_factory=dict)

    @property
    def entries(self) -> list[int]:
        return [i for i, _ in self.ranked]

    def __len__(self) -> int:
        return len(self.ranked)

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "ranked": [[i, s] for i, s in self.ranked],
            "per_graph_provenance": {str(g): list(v) for g, v in self.per_graph_provenance.items()},
        }


def _cumulative_softmax(indptr: np.ndarray, data: np.ndarray, temperature: float) -> np.ndarray:
    """Per-row cumulative softmax, offset by the row number.

    Row ``r``'s keys lie in ``(r, r + 1]`` and end exactly at ``r + 1``, so
    one ``searchsorted`` over the whole array samples any row.
    """
    counts = np.diff(indptr)
    rows = np.repeat(np.arange(counts.size), counts)
    if data.size == 0:
        return np.zeros(0)
    scaled = data / temperature
    starts = indptr[:-1][counts > 0]
    row_max = np.zeros(counts.size)
    row_max[counts > 0] = np.maximum.reduceat(scaled, starts)
    e = np.exp(scaled - row_max[rows])
    csum = np.cumsum(e)
    offset = np.concatenate(([0.0], csum))[indptr[:-1]]
    within = csum - offset[rows]
    ends = indptr[1:][counts > 0] - 1
    total = np.zeros(counts.size)
    total[counts > 0] = within[ends]
    cum = within / total[rows]
    cum[ends] = 1.0
    return cum + rows


class WalkKernel:
    """Sampling tables for one graph at one temperature."""

    def __init__(self, graph: BipartiteGraph, temperature: float = 1.0):
        fwd, bwd = graph.weights, graph.by_node
        self.entry_ptr, self.entry_nodes, self.entry_w = fwd.indptr, fwd.indices, fwd.data
        self.node_ptr, self.node_entries, self.node_w = bwd.indptr, bwd.indices, bwd.data
        self.entry_key = _cumulative_softmax(fwd.indptr, fwd.data, temperature)
        self.node_key = _cumulative_softmax(bwd.indptr, bwd.data, temperature)
        self.degree = np.diff(fwd.indptr)

    @staticmethod
    def _sample(ptr, key, rows, u):
        pos = np.searchsorted(key, rows + u, side="right")
        return np.clip(pos, ptr[rows], ptr[rows + 1] - 1)

    def forward(self, entries: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Next value nodes and crossed weights for ``entries``."""
        edge = self._sample(self.entry_ptr, self.entry_key, entries, u)
        return self.entry_nodes[edge], self.entry_w[edge]

    def backward(self, nodes: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        edge = self._sample(self.node_ptr, self.node_key, nodes, u)
        return self.node_entries[edge], self.node_w[edge]

    def forward_probabilities(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.entry_ptr[i], self.entry_ptr[i + 1]
        return self.entry_nodes[lo:hi], np.diff(np.concatenate(([i], self.entry_key[lo:hi])))

    def backward_probabilities(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.node_ptr[k], self.node_ptr[k + 1]
        return self.node_entries[lo:hi], np.diff(np.concatenate(([k], self.node_key[lo:hi])))

    def walk(self, starts: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Run one walk per start; ``u`` has one uniform per step."""
        pos, total = starts, np.zeros(starts.shape)
        for s in range(u.shape[-1]):
            pos, w = (self.forward if s % 2 == 0 else self.backward)(pos, u[..., s])
            total = total + w
        return pos, total / u.shape[-1]


_kernels: "weakref.WeakKeyDictionary[BipartiteGraph, dict]" = weakref.WeakKeyDictionary()


def kernel_for(graph: BipartiteGraph, temperature: float = 1.0) -> WalkKernel:
    per_graph = _kernels.setdefault(graph, {})
    if temperature not in per_graph:
        per_graph[temperature] = WalkKernel(graph, temperature)
    return per_graph[temperature]


def forward_step(graph: BipartiteGraph, i: int, rng: np.random.Generator, temperature: float = 1.0) -> int:
    """Value node reached from entry ``i``."""
    kernel = kernel_for(graph, temperature)
    if kernel.degree[i] == 0:
        raise IsolatedEntry(i)
    node, _ = kernel.forward(np.array([i]), np.array([rng.random()]))
    return int(node[0])


def backward_step(graph: BipartiteGraph, node: int, rng: np.random.Generator, temperature: float = 1.0) -> int:
    """Entry reached from value node ``node``."""
    kernel = kernel_for(graph, temperature)
    entry, _ = kernel.backward(np.array([node]), np.array([rng.random()]))
    return int(entry[0])


def walk_once(
    graph: BipartiteGraph, target: int, steps: int, rng: np.random.Generator, temperature: float = 1.0
) -> tuple[int, float]:
    """Endpoint and mean crossed weight of one walk from ``target``."""
    kernel = kernel_for(graph, temperature)
    if kernel.degree[target] == 0:
        raise IsolatedEntry(target)
    end, score = kernel.walk(np.array([target]), rng.random((1, steps)))
    return int(end[0]), float(score[0])


def _first_occurrence(endpoints: np.ndarray, n: int) -> np.ndarray:
    """Mask of the first time each value appears in its row."""
    rows = np.repeat(np.arange(endpoints.shape[0]), endpoints.shape[1])
    key = rows * (n + 1) + (endpoints.ravel() + 1)
    order = np.argsort(key, kind="stable")
    sorted_key = key[order]
    first = np.ones(key.size, dtype=bool)
    first[1:] = sorted_key[1:] != sorted_key[:-1]
    out = np.empty(key.size, dtype=bool)
    out[order] = first
    return out.reshape(endpoints.shape)


def select_all_neighbors(
    graphs: Sequence[BipartiteGraph], targets: Sequence[int], config: WalkConfig
) -> dict[int, NeighborSet]:
    """Top-``rounds`` neighbours for every target.

    Per graph, a target's walks are consumed in order until ``rounds``
    distinct non-target endpoints are found or ``budget`` walks are spent.
    Candidates from every graph are ranked by their best walk score, ties
    going to the lower entry index.
    """
    targets = np.asarray(list(targets), dtype=np.int64)
    q, budget, steps = config.rounds, config.budget, config.steps
    if targets.size == 0:
        return {}
    n = graphs[0].n_entries if graphs else 0
    draws = np.stack([
        np.random.default_rng([config.seed, int(t)]).random((len(graphs), budget, steps)) for t in targets
    ]) if graphs else np.zeros((targets.size, 0, budget, steps))

    cand_t, cand_e, cand_s = [], [], []
    provenance: dict[int, dict[int, tuple[int, ...]]] = {int(t): {} for t in targets}
    for g, graph in enumerate(graphs):
        kernel = kernel_for(graph, config.temperature)
        active = np.flatnonzero(kernel.degree[targets] > 0)
        if active.size == 0:
            continue
        starts = np.repeat(targets[active], budget)
        ends, scores = kernel.walk(starts, draws[active, g].reshape(-1, steps))
        ends, scores = ends.reshape(active.size, budget), scores.reshape(active.size, budget)
        owner = targets[active][:, None]
        valid = ends != owner
        new = _first_occurrence(np.where(valid, ends, -1), n) & valid
        found_before = np.cumsum(new, axis=1) - new
        consumed = valid & (found_before < q)
        kept = new & consumed
        for row in np.flatnonzero(kept.any(axis=1)):
            provenance[int(targets[active[row]])][g] = tuple(sorted(int(e) for e in ends[row][kept[row]]))
        rr, cc = np.nonzero(consumed)
        cand_t.append(active[rr])
        cand_e.append(ends[rr, cc])
        cand_s.append(scores[rr, cc])

    result = {int(t): NeighborSet(int(t), (), provenance[int(t)]) for t in targets}
    if not cand_t:
        return result
    t_idx = np.concatenate(cand_t)
    ent = np.concatenate(cand_e)
    score = np.concatenate(cand_s)
    if t_idx.size == 0:
        return result
    # best score per (target, entry), then rank within each target
    order = np.lexsort((-score, ent, t_idx))
    t_idx, ent, score = t_idx[order], ent[order], score[order]
    head = np.ones(t_idx.size, dtype=bool)
    head[1:] = (t_idx[1:] != t_idx[:-1]) | (ent[1:] != ent[:-1])
    t_idx, ent, score = t_idx[head], ent[head], score[head]
    order = np.lexsort((ent, -score, t_idx))
    t_idx, ent, score = t_idx[order], ent[order], score[order]
    group_start = np.ones(t_idx.size, dtype=bool)
    group_start[1:] = t_idx[1:] != t_idx[:-1]
    start_pos = np.maximum.accumulate(np.where(group_start, np.arange(t_idx.size), 0))
    keep = (np.arange(t_idx.size) - start_pos) < q
    t_idx, ent, score = t_idx[keep], ent[keep], score[keep]
    lows = np.flatnonzero(np.r_[True, t_idx[1:] != t_idx[:-1]])
    for lo, hi in zip(lows, np.r_[lows[1:], t_idx.size]):
        t = int(targets[t_idx[lo]])
        ranked = tuple((int(e), float(s)) for e, s in zip(ent[lo:hi], score[lo:hi]))
        result[t] = NeighborSet(t, ranked, provenance[t])
    return result


def select_neighbors(graphs: Sequence[BipartiteGraph], target: int, config: WalkConfig) -> NeighborSet:
    return select_all_neighbors(graphs, [target], config)[int(target)]
