"""The forest: several graph-retrieval + prompt + backend trees, voted together.

Trees differ only in their seeds. Each tree plans its own merge hierarchy
(random tie-breaks in the balanced pairing) and runs its own walks, so each
sees a different neighbour set for the same target.
"""
from __future__ import annotations

import json
import logging
import math
import threading
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .dataset import Cell, FeatureStats, Table, feature_stats, mode_of, value_key
from .infograph import DEFAULT_BINS, BipartiteGraph, build_all
from .llm import BackendError, Confidence, ImputationVote, parse_response
from .merge import MergePlan, MergeThreshold, max_levels, merge_hierarchy
from .prompt import DEFAULT_MAX_CHARS, NoUsableNeighbors, PromptTemplate, build_prompt
from .walk import NeighborSet, WalkConfig, select_all_neighbors

logger = logging.getLogger(__name__)

DEFAULT_WEIGHTS = {Confidence.HIGH: 1.0, Confidence.MEDIUM: 0.6, Confidence.LOW: 0.3}
MAJORITY_WEIGHTS = {Confidence.HIGH: 1.0, Confidence.MEDIUM: 1.0, Confidence.LOW: 1.0}
_RANK = {Confidence.HIGH: 2, Confidence.MEDIUM: 1, Confidence.LOW: 0}


def _as_weights(weights: Mapping) -> dict[Confidence, float]:
    return {Confidence(k) if not isinstance(k, Confidence) else k: float(v) for k, v in weights.items()}


@dataclass(frozen=True)
class ForestConfig:
    trees: int = 3
    neighbors: int = 5
    merge_levels: int = 3
    sigma: MergeThreshold = MergeThreshold("shared_count", 20)
    steps: int = 2
    temperature: float = 1.0
    voting: str = "confidence_weighted"
    confidence_weights: Mapping = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))
    seed: int = 0
    bins: int = DEFAULT_BINS
    max_prompt_chars: int = DEFAULT_MAX_CHARS

    def __post_init__(self):
        object.__setattr__(self, "sigma", MergeThreshold.parse(self.sigma))
        object.__setattr__(self, "confidence_weights", _as_weights(self.confidence_weights))
        w = self.confidence_weights
        if self.trees < 1:
            raise ValueError("a forest needs at least one tree")
        if self.neighbors < 1:
            raise ValueError("neighbors must be at least 1")
        if set(w) != set(Confidence):
            raise ValueError("confidence_weights needs High, Medium and Low")
        if min(w.values()) <= 0 or not w[Confidence.HIGH] >= w[Confidence.MEDIUM] >= w[Confidence.LOW]:
            raise ValueError("confidence weights must be positive and ordered High >= Medium >= Low")
        if self.voting not in ("confidence_weighted", "majority"):
            raise ValueError(f"unknown voting mode {self.voting!r}")
        WalkConfig(self.steps, self.neighbors, 0, self.temperature)

    @property
    def weights(self) -> dict[Confidence, float]:
        return dict(MAJORITY_WEIGHTS) if self.voting == "majority" else dict(self.confidence_weights)

    def walk_config(self, seed: int) -> WalkConfig:
        return WalkConfig(self.steps, self.neighbors, seed, self.temperature)

    def to_dict(self) -> dict:
        return {
            "trees": self.trees, "neighbors": self.neighbors, "merge_levels": self.merge_levels,
            "sigma": str(self.sigma), "steps": self.steps, "temperature": self.temperature,
            "voting": self.voting,
            "confidence_weights": {k.value: v for k, v in self.confidence_weights.items()},
            "seed": self.seed, "bins": self.bins, "max_prompt_chars": self.max_prompt_chars,
        }

    @classmethod
    def from_dict(cls, payload: Mapping) -> "ForestConfig":
        unknown = set(payload) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown forest settings: {sorted(unknown)}")
        return cls(**payload)


def tree_seed(base: int, tree_id: int) -> int:
    return int(np.random.SeedSequence([base, tree_id]).generate_state(1)[0])


@dataclass(frozen=True)
class TreeResult:
    tree_id: int
    plan: MergePlan
    neighbors: Mapping[int, NeighborSet]


def grow_tree(
    table: Table,
    tree_id: int,
    config: ForestConfig,
    graphs: Sequence[BipartiteGraph] | None = None,
    targets: Sequence[int] | None = None,
    workers: int = 1,
) -> TreeResult:
    """Merge plan and neighbour sets of one tree.

    ``merge_levels`` is capped at the depth the column count allows.
    """
    graphs = build_all(table, config.bins) if graphs is None else graphs
    seed = tree_seed(config.seed, tree_id)
    levels = min(config.merge_levels, max_levels(len(graphs)))
    plan, merged = merge_hierarchy(graphs, levels, config.sigma, seed, workers)
    if targets is None:
        targets = np.flatnonzero(table.mask.any(axis=1))
    neighbors = select_all_neighbors(merged, targets, config.walk_config(seed))
    return TreeResult(tree_id, plan, neighbors)


def weighted_vote(votes: Sequence[ImputationVote], weights: Mapping | None = None) -> tuple[Cell, Confidence]:
    """Winning value and its strongest supporting confidence.

    Each candidate scores the summed weight of its votes. Ties go to the
    candidate holding the single most confident vote, then to the smallest
    value.
    """
    if not votes:
        raise ValueError("cannot vote on an empty list")
    weights = _as_weights(weights or DEFAULT_WEIGHTS)
    score: dict = defaultdict(float)
    strongest: dict = {}
    for vote in votes:
        score[vote.value] += weights[vote.confidence]
        if vote.value not in strongest or _RANK[vote.confidence] > _RANK[strongest[vote.value]]:
            strongest[vote.value] = vote.confidence
    best = max(score.values())
    tied = [v for v, s in score.items() if math.isclose(s, best, rel_tol=1e-9)]
    winner = min(tied, key=lambda v: (-_RANK[strongest[v]], value_key(v)))
    return winner, strongest[winner]


@dataclass
class CellRecord:
    row: int
    feature: str
    votes: list[ImputationVote] = field(default_factory=list)
    unimputed_trees: list[int] = field(default_factory=list)
    invalid_trees: list[int] = field(default_factory=list)
    winner: Cell = None
    confidence: Confidence | None = None
    fallback: str | None = None

    def to_dict(self) -> dict:
        return {
            "row": self.row,
            "feature": self.feature,
            "votes": [v.to_dict() for v in self.votes],
            "unimputed_trees": self.unimputed_trees,
            "invalid_trees": self.invalid_trees,
            "winner": self.winner,
            "confidence": self.confidence.value if self.confidence else None,
            "fallback": self.fallback,
        }

    @classmethod
    def from_dict(cls, payload: Mapping) -> "CellRecord":
        votes = [ImputationVote(payload["feature"], v["value"], Confidence(v["confidence"]), v["tree"])
                 for v in payload["votes"]]
        conf = payload.get("confidence")
        return cls(payload["row"], payload["feature"], votes, list(payload["unimputed_trees"]),
                   list(payload["invalid_trees"]), payload["winner"],
                   Confidence(conf) if conf else None, payload.get("fallback"))


@dataclass
class VoteLedger:
    records: list[CellRecord] = field(default_factory=list)

    def __iter__(self):
        return iter(self.records)

    def __len__(self) -> int:
        return len(self.records)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r.to_dict()) + "\n" for r in self.records)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")

    @classmethod
    def read(cls, path: str | Path) -> "VoteLedger":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([CellRecord.from_dict(json.loads(line)) for line in lines if line.strip()])


class ForestAborted(RuntimeError):
    """A backend failed for good; finished targets are in the checkpoint."""

    def __init__(self, message: str, checkpoint: str | Path | None):
        super().__init__(message)
        self.checkpoint = checkpoint


def _read_checkpoint(path: Path) -> dict[int, list[CellRecord]]:
    done = {}
    if path.exists():
        for line in path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                entry = json.loads(line)
                done[entry["target"]] = [CellRecord.from_dict(c) for c in entry["cells"]]
    return done


def _finish_cell(record: CellRecord, weights, table: Table, j: int, neighbor_pool: Sequence[int],
                 stats: FeatureStats) -> None:
    if record.votes:
        record.winner, record.confidence = weighted_vote(record.votes, weights)
        return
    donors = [table.values[i, j] for i in neighbor_pool if not table.mask[i, j]]
    if donors:
        record.winner, record.fallback = mode_of(donors), "neighbor_mode"
    else:
        record.winner, record.fallback = stats.modes[j], "global_mode"


def impute_all(
    table: Table,
    config: ForestConfig,
    backend,
    workers: int = 1,
    checkpoint: str | Path | None = None,
    resume: bool = False,
    template: PromptTemplate | None = None,
    trees: Sequence[TreeResult] | None = None,
) -> tuple[Table, VoteLedger]:
    """Impute every missing cell of ``table``.

    Cells with no valid vote from any tree fall back to the mode of the
    target's neighbours in that column, then to the column mode. With a
    ``checkpoint`` path every finished target is appended there, and
    ``resume`` skips targets already recorded.
    """
    stats = feature_stats(table)
    targets = [int(t) for t in np.flatnonzero(table.mask.any(axis=1))]
    if trees is None:
        graphs = build_all(table, config.bins, workers=workers)
        trees = [grow_tree(table, t, config, graphs, targets, workers) for t in range(config.trees)]
    template = template or PromptTemplate.default()
    weights = config.weights
    names = table.names

    ckpt = Path(checkpoint) if checkpoint else None
    done = _read_checkpoint(ckpt) if (ckpt and resume) else {}
    if ckpt and not resume and ckpt.exists():
        ckpt.unlink()
    lock = threading.Lock()

    def run_target(target: int) -> list[CellRecord]:
        missing = [j for j in range(table.d) if table.mask[target, j]]
        records = {j: CellRecord(target, names[j]) for j in missing}
        pool: list[int] = []
        for tree in trees:
            neighbors = tree.neighbors.get(target, NeighborSet(target))
            pool.extend(i for i in neighbors.entries if i not in pool)
            try:
                bundle = build_prompt(target, neighbors, stats, table, template, config.max_prompt_chars)
            except NoUsableNeighbors:
                for j in missing:
                    records[j].unimputed_trees.append(tree.tree_id)
                continue
            text = backend.complete(bundle, tree_id=tree.tree_id)
            parsed = parse_response(text, bundle.missing_features, table.columns, tree.tree_id)
            for vote in parsed.votes:
                records[table.column_index(vote.feature)].votes.append(vote)
            for name in parsed.unimputed:
                records[table.column_index(name)].unimputed_trees.append(tree.tree_id)
            for name in parsed.invalid:
                records[table.column_index(name)].invalid_trees.append(tree.tree_id)
        for j in missing:
            _finish_cell(records[j], weights, table, j, pool, stats)
        out = [records[j] for j in missing]
        if ckpt:
            with lock, open(ckpt, "a", encoding="utf-8") as fh:
                fh.write(json.dumps({"target": target, "cells": [r.to_dict() for r in out]}) + "\n")
        return out

    pending = [t for t in targets if t not in done]
    results = dict(done)
    try:
        if workers > 1:
            with ThreadPoolExecutor(workers) as ex:
                for t, recs in zip(pending, ex.map(run_target, pending)):
                    results[t] = recs
        else:
            for t in pending:
                results[t] = run_target(t)
    except BackendError as exc:
        raise ForestAborted(f"backend failed: {exc}", ckpt) from exc

    ledger = VoteLedger([r for t in targets for r in results[t]])
    grid = table.values.copy()
    for record in ledger:
        grid[record.row, table.column_index(record.feature)] = record.winner
    return table.with_values(grid.tolist()), ledger
