import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_table, random_table
from llmforest.baselines import (
    KnnConfig, grid_decimals, impute_knn, impute_mean, impute_mode, knn_distances, knn_neighbors, round_half_up,
)
from llmforest.dataset import Kind, mode_of


def _col(values, kind=Kind.EMPIRICAL):
    return make_table([[v] for v in values], kinds=[kind])


def test_mode_examples():
    assert impute_mode(_col([1.0, 1.0, 2.0, None])).values[3, 0] == 1.0
    assert impute_mode(_col([1.0, 2.0, None])).values[2, 0] == 1.0
    full = _col([1.0, 2.0])
    assert impute_mode(full) is full


def test_mean_examples():
    assert impute_mean(_col([1.0, 2.0, 3.0, None])).values[3, 0] == 2.0
    assert impute_mean(_col([1.0, 2.0, None])).values[2, 0] == 2.0  # 1.5 rounds half up
    assert impute_mean(_col([0.5, 1.0, None])).values[2, 0] == 0.75
    cat = make_table([["a", "x"], ["a", None], [None, "y"], ["b", "y"]])
    assert (impute_mean(cat).values == impute_mode(cat).values).all()


def test_fully_missing_column():
    table = make_table([["a", None], ["b", None]])
    for fn in (impute_mode, impute_mean, impute_knn):
        with pytest.raises(ValueError):
            fn(table) if fn is not impute_knn else fn(table, 1)


def test_rounding_helpers():
    assert round_half_up(2.5) == 3.0 and round_half_up(-0.5) == 0.0
    assert round_half_up(1.25, 1) == 1.3
    assert grid_decimals([1.0, 2.5, 3.25]) == 2 and grid_decimals([4.0]) == 0


def _oracle_distance(a, b):
    both = [(x, y) for x, y in zip(a, b) if x is not None and y is not None]
    if not both:
        return 1.0
    return sum(x != y for x, y in both) / len(both)


SIX = [
    ["a", "x", "p", "m"],
    ["a", "x", None, "m"],
    ["b", "y", "p", None],
    [None, "x", "q", "n"],
    ["a", "y", "q", "m"],
    [None, None, None, "n"],
]


def test_six_row_distances_match_oracle():
    dist = knn_distances(make_table(SIX))
    for i, j in itertools.product(range(6), repeat=2):
        assert dist[i, j] == pytest.approx(_oracle_distance(SIX[i], SIX[j]))


def _oracle_knn(rows, k):
    out = [list(r) for r in rows]
    for i, j in itertools.product(range(len(rows)), range(len(rows[0]))):
        if rows[i][j] is None:
            donors = sorted((_oracle_distance(rows[i], rows[r]), r) for r in range(len(rows))
                            if rows[r][j] is not None)
            out[i][j] = mode_of(rows[r][j] for _, r in donors[:k])
    return out


@pytest.mark.parametrize("k", [1, 2, 3])
def test_six_row_imputation_matches_oracle(k):
    assert impute_knn(make_table(SIX), KnnConfig(k)).values.tolist() == _oracle_knn(SIX, k)


def test_duplicate_row_is_chosen():
    rows = [["a", "b", "c"], ["a", "b", None], ["z", "z", "q"], ["z", "y", "q"]]
    assert impute_knn(make_table(rows), 1).values[1, 2] == "c"


def test_numeric_knn_mean_and_rounding():
    rows = [[1.0, 10.0], [1.0, 12.0], [1.0, None], [5.0, 0.0]]
    table = make_table(rows, kinds=[Kind.EMPIRICAL, Kind.EMPIRICAL])
    assert impute_knn(table, 2).values[2, 1] == 11.0
    assert impute_knn(table, 3).values[2, 1] == 7.0  # 22/3 rounds to 7


def test_knn_config_errors():
    with pytest.raises(ValueError):
        KnnConfig(0)
    with pytest.raises(ValueError):
        impute_knn(make_table([["a"], [None]]), 2)
    with pytest.raises(ValueError):
        knn_neighbors(make_table([["a"], ["b"]]), 2)


def test_uniform_distances_reduce_to_mode():
    rows = [["a", "p"], ["a", "q"], ["b", "r"], [None, "s"]]
    table = make_table(rows)
    assert impute_knn(table, 3).values[3, 0] == impute_mode(table).values[3, 0]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_imputers_complete_and_deterministic(seed):
    table = random_table(np.random.default_rng(seed), 15, 3, missing=0.3)
    for fn in (impute_mode, impute_mean, lambda t: impute_knn(t, 3)):
        out = fn(table)
        assert not out.mask.any()
        assert (out.values == fn(table).values).all()
