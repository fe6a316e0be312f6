import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_table
from llmforest.dataset import apply_mcar, feature_stats
from llmforest.evalbench import imputation_accuracy, planted_clusters
from llmforest.forest import (
    DEFAULT_WEIGHTS, MAJORITY_WEIGHTS, CellRecord, ForestAborted, ForestConfig, VoteLedger, grow_tree, impute_all,
    tree_seed, weighted_vote,
)
from llmforest.llm import BackendConfig, BackendError, Confidence, ImputationVote, MockBackend

H, M, L = Confidence.HIGH, Confidence.MEDIUM, Confidence.LOW


def _votes(*pairs):
    return [ImputationVote("F", v, c, k) for k, (v, c) in enumerate(pairs)]


def test_weighted_vote_examples():
    votes = _votes(("A", H), ("B", M), ("B", L))
    assert weighted_vote(votes) == ("A", H)
    assert weighted_vote(votes, MAJORITY_WEIGHTS) == ("B", M)
    assert weighted_vote(_votes(("x", L), ("x", L), ("x", L))) == ("x", L)
    with pytest.raises(ValueError):
        weighted_vote([])


def test_vote_tie_breaks():
    # equal scores: the candidate with the strongest single vote wins
    assert weighted_vote(_votes(("A", M), ("B", H)), MAJORITY_WEIGHTS) == ("B", H)
    # same strength: smallest value
    assert weighted_vote(_votes(("b", M), ("a", M))) == ("a", M)
    assert weighted_vote(_votes((2.0, H), (10.0, H))) == (2.0, H)


vote_lists = st.lists(st.tuples(st.sampled_from(["a", "b", "c"]), st.sampled_from(list(Confidence))),
                      min_size=1, max_size=7)


@settings(max_examples=200)
@given(vote_lists, st.floats(0.01, 100.0))
def test_argmax_invariance(pairs, scale):
    votes = _votes(*pairs)
    scaled = {k: v * scale for k, v in DEFAULT_WEIGHTS.items()}
    assert weighted_vote(votes, scaled)[0] == weighted_vote(votes)[0]


def test_config_validation():
    with pytest.raises(ValueError):
        ForestConfig(trees=0)
    with pytest.raises(ValueError):
        ForestConfig(confidence_weights={"High": 0.5, "Medium": 0.6, "Low": 0.3})
    with pytest.raises(ValueError):
        ForestConfig(voting="plurality")
    with pytest.raises(ValueError):
        ForestConfig.from_dict({"forest_size": 3})
    cfg = ForestConfig(sigma="jaccard:0.3", seed=4)
    assert ForestConfig.from_dict(cfg.to_dict()) == cfg


def _masked(seed=0, n=60):
    table, _ = planted_clusters(n=n, seed=seed)
    return apply_mcar(table, 0.4, seed)


def test_tree_ids_vary_pairing():
    table = make_table([[f"v{(i + j) % 3}" for j in range(6)] for i in range(12)])
    config = ForestConfig(merge_levels=1, sigma="jaccard:0.5")
    plans = {grow_tree(table, t, ForestConfig(merge_levels=1, sigma="jaccard:0.5", seed=s), targets=[]).plan.pairing
             for s in range(20) for t in (0, 1)}
    assert len(plans) >= 2
    assert tree_seed(0, 0) != tree_seed(0, 1)
    assert grow_tree(table, 0, config, targets=[]).plan.levels == 1


def test_levels_clamped_and_neighbor_cap():
    table = _masked()
    tree = grow_tree(table, 0, ForestConfig(merge_levels=99, neighbors=4))
    assert tree.plan.levels == 4  # ceil(log2 10)
    assert all(len(ns) <= 4 for ns in tree.neighbors.values())


def test_single_tree_voting_modes_agree():
    table = _masked(3)
    a, _ = impute_all(table, ForestConfig(trees=1, merge_levels=1, sigma="shared_count:10"), MockBackend())
    b, _ = impute_all(table, ForestConfig(trees=1, merge_levels=1, sigma="shared_count:10", voting="majority"),
                      MockBackend())
    assert (a.values == b.values).all()


def test_completeness_conservation_determinism():
    table = _masked(1)
    config = ForestConfig(merge_levels=1, sigma="shared_count:10")
    imputed, ledger = impute_all(table, config, MockBackend())
    again, ledger2 = impute_all(table, config, MockBackend(), workers=4)
    assert not imputed.mask.any()
    assert (imputed.values == again.values).all() and ledger.to_jsonl() == ledger2.to_jsonl()
    assert len(ledger) == table.mask.sum()
    for rec in ledger:
        assert len(rec.votes) + len(rec.unimputed_trees) + len(rec.invalid_trees) == config.trees
        assert rec.fallback is None or not rec.votes


def test_beats_global_mode_on_clusters():
    table = _masked(2, n=100)
    imputed, _ = impute_all(table, ForestConfig(merge_levels=1, sigma="shared_count:10"), MockBackend())
    modes = feature_stats(table).modes
    baseline = np.mean([modes[c] == v for (r, c), v in table.shadow.items()])
    assert imputation_accuracy(imputed, table.shadow) > baseline


def test_fallback_chain():
    # every tree answers "{}": cells fall back to neighbour mode, or to the global mode when no
    # neighbour observes the feature
    table = make_table([["a", "x"], ["a", None], ["a", "y"], ["b", None], ["b", None], ["c", "y"]])
    silent = MockBackend(BackendConfig(mock_policy="echo_fixture"))
    _, ledger = impute_all(table, ForestConfig(trees=2, merge_levels=0, neighbors=2), silent)
    by_row = {r.row: r for r in ledger}
    assert set(by_row[1].unimputed_trees) == {0, 1}
    assert by_row[1].fallback == "neighbor_mode" and by_row[1].winner in ("x", "y")
    rec = CellRecord.from_dict(by_row[3].to_dict())
    assert rec.to_dict() == by_row[3].to_dict()
    assert all(r.fallback in ("neighbor_mode", "global_mode") for r in ledger)
    lonely = make_table([["a", "x"], ["b", None]])
    _, ledger = impute_all(lonely, ForestConfig(trees=1, merge_levels=0), silent)
    (rec,) = ledger
    assert rec.fallback == "global_mode" and rec.winner == "x"


def test_invalid_votes_counted():
    table = make_table([["a", "x"], ["a", None], ["a", "y"]])
    junk = MockBackend(BackendConfig(mock_policy="echo_fixture", fixtures={"1": '{"c1": "zzz"}'}))
    _, ledger = impute_all(table, ForestConfig(trees=3, merge_levels=0, neighbors=2), junk)
    (rec,) = ledger
    assert rec.invalid_trees == [0, 1, 2] and rec.votes == []


class _Flaky:
    def __init__(self, fail_after):
        self.calls, self.fail_after, self.inner = 0, fail_after, MockBackend()

    def complete(self, bundle, tree_id=0):
        self.calls += 1
        if self.calls > self.fail_after:
            raise BackendError("gone")
        return self.inner.complete(bundle, tree_id)


def test_abort_and_resume(tmp_path):
    table = _masked(4, n=40)
    config = ForestConfig(merge_levels=1, sigma="shared_count:5")
    ckpt = tmp_path / "ckpt.jsonl"
    with pytest.raises(ForestAborted) as info:
        impute_all(table, config, _Flaky(fail_after=30), checkpoint=ckpt)
    assert info.value.checkpoint == ckpt
    done = [json.loads(line)["target"] for line in ckpt.read_text().splitlines()]
    assert len(done) == 10
    resumed_backend = _Flaky(fail_after=10**6)
    resumed, ledger = impute_all(table, config, resumed_backend, checkpoint=ckpt, resume=True)
    fresh, fresh_ledger = impute_all(table, config, MockBackend())
    assert ledger.to_jsonl() == fresh_ledger.to_jsonl()
    assert (resumed.values == fresh.values).all()
    assert resumed_backend.calls < 3 * 40


def test_ledger_file_roundtrip(tmp_path):
    table = _masked(5, n=30)
    _, ledger = impute_all(table, ForestConfig(merge_levels=1, sigma="shared_count:5"), MockBackend())
    ledger.write(tmp_path / "l.jsonl")
    assert VoteLedger.read(tmp_path / "l.jsonl").to_jsonl() == ledger.to_jsonl()
