import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_table
from llmforest.dataset import (
    FeatureSpec, Kind, Schema, SchemaError, Table, apply_mar, apply_mcar, apply_mnar, feature_stats,
    format_number, load_csv, lower_percentile_rows, mask_and_split, mode_of, read_shadow, schema_from_dict,
    split, write_csv, write_shadow,
)


def _schema(names, kinds=None, label=None):
    kinds = kinds or [Kind.CATEGORICAL] * len(names)
    return Schema(tuple(FeatureSpec(n, k) for n, k in zip(names, kinds)), label)


def test_load_csv_mask_mirrors_empty_cells(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("a,b\n1,x\n2,\n3,y\n")
    table = load_csv(path, _schema(["a", "b"], [Kind.NORMAL, Kind.CATEGORICAL]))
    assert table.mask.sum() == 1 and table.mask[1, 1]
    assert table.values[0, 0] == 1.0
    assert table.columns[1].distinct_values == ("x", "y")


@pytest.mark.parametrize("token", ["NA", "nan", "NULL", ""])
def test_missing_tokens_case_insensitive(tmp_path, token):
    path = tmp_path / "t.csv"
    path.write_text(f"a\nx\n{token}\n")
    assert load_csv(path, _schema(["a"])).mask.tolist() == [[False], [True]]


def test_load_csv_errors(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("a,c\n1,2\n")
    with pytest.raises(SchemaError):
        load_csv(path, _schema(["a", "b"]))
    path.write_text("a\nabc\n")
    with pytest.raises(SchemaError):
        load_csv(path, _schema(["a"], [Kind.NORMAL]))
    path.write_text("")
    with pytest.raises(SchemaError):
        load_csv(path, _schema(["a"]))


def test_zero_variance_normal_is_rekinded():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        table = make_table([[5.0], [5.0], [5.0]], kinds=[Kind.NORMAL])
    assert table.columns[0].kind is Kind.CATEGORICAL
    assert table.notes and caught


def test_diabetes_shape(tmp_path):
    rng = np.random.default_rng(0)
    names = [f"f{j}" for j in range(22)]
    path = tmp_path / "d.csv"
    lines = [",".join(names)] + [",".join(str(v) for v in rng.integers(0, 3, 22)) for _ in range(800)]
    path.write_text("\n".join(lines) + "\n")
    table = load_csv(path, _schema(names))
    assert (table.n, table.d) == (800, 22)


def test_schema_dict_label_flag():
    schema = schema_from_dict({"columns": [{"name": "a"}, {"name": "y", "label": True}]})
    assert schema.label == "y"
    with pytest.raises(SchemaError):
        schema_from_dict({"columns": [{"name": "a", "kind": "weird"}]})


def test_format_number():
    assert format_number(63.0) == "63"
    assert format_number(1.23456, sig=4) == "1.235"
    assert format_number(0.5) == "0.5"


def test_mode_ties_go_to_smallest():
    assert mode_of([1.0, 2.0]) == 1.0
    assert mode_of(["b", "a"]) == "a"
    assert mode_of([1.0, 1.0, 2.0]) == 1.0


# ---------------------------------------------------------------- MCAR


def _column_table(n, d=1):
    return make_table([[f"v{(i * 7 + j) % 5}" for j in range(d)] for i in range(n)])


def test_mcar_rate_zero_is_noop():
    table = _column_table(30, 3)
    assert (apply_mcar(table, 0.0, 1).mask == table.mask).all()


def test_mcar_exact_count_and_shadow():
    table = _column_table(1000)
    out = apply_mcar(table, 0.4, 7)
    assert out.mask.sum() == 400
    assert len(out.shadow) == 400
    for (r, c), v in out.shadow.items():
        assert table.values[r, c] == v


def test_mcar_deterministic_and_range():
    table = _column_table(50, 2)
    assert (apply_mcar(table, 0.3, 4).mask == apply_mcar(table, 0.3, 4).mask).all()
    with pytest.raises(ValueError):
        apply_mcar(table, 1.0, 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 60), st.floats(0.0, 0.95), st.integers(0, 2**31), st.floats(0.0, 0.5))
def test_mcar_properties(n, rate, seed, pre):
    rng = np.random.default_rng(seed)
    rows = [[None if (i and rng.random() < pre) else f"v{rng.integers(3)}" for _ in range(3)] for i in range(n)]
    table = make_table(rows)
    out = apply_mcar(table, rate, seed)
    assert (out.mask | ~table.mask).all()  # monotone
    for j in range(3):
        observed = (~table.mask[:, j]).sum()
        added = out.mask[:, j].sum() - table.mask[:, j].sum()
        assert added == math.floor(rate * observed + 1e-9)


# ---------------------------------------------------------------- MAR


def _labelled(n, seed=0):
    rng = np.random.default_rng(seed)
    rows = [[f"a{rng.integers(4)}", f"b{rng.integers(4)}", float(i)] for i in range(n)]
    rng.shuffle(rows)
    return Table.build([FeatureSpec("a"), FeatureSpec("b"), FeatureSpec("y", Kind.EMPIRICAL)], rows, "y")


def test_mar_only_bottom_percentile_rows():
    table = _labelled(500)
    out = apply_mar(table, 0.3, 0.4, seed=3)
    label = np.array([v for v in table.values[:, 2]], dtype=float)
    qualifying = label <= 149
    touched = out.mask.any(axis=1)
    assert not touched[~qualifying].any()
    assert not out.mask[:, 2].any()
    # exact per-column count among the 150 qualifying rows
    assert out.mask[:, 0].sum() == out.mask[:, 1].sum() == 60
    assert abs(out.mask[qualifying][:, :2].mean() - 0.4) < 1e-9


def test_mar_zero_qualifying_rows_and_errors():
    table = _labelled(3)
    assert not apply_mar(table, 0.2, 0.4, 0).mask.any()
    with pytest.raises(SchemaError):
        apply_mar(_column_table(10), 0.3, 0.4, 0)


def test_lower_percentile_inclusive_ties():
    keys = np.array([1.0, 2.0, 2.0, 3.0, np.nan])
    assert lower_percentile_rows(keys, 0.5).tolist() == [True, True, True, False, False]


# ---------------------------------------------------------------- MNAR


def test_mnar_numeric_percentile():
    table = make_table([[float(v)] for v in range(1, 101)], kinds=[Kind.EMPIRICAL])
    out = apply_mnar(table, 0)
    masked = sorted(v for v in out.shadow.values())
    assert masked == [float(v) for v in range(1, 31)]


def test_mnar_no_self_masking_without_ones():
    rows = [["0", "1"] for _ in range(200)]
    out = apply_mnar(make_table(rows), 0)
    assert not out.mask[:, 0].any()


def test_mnar_rate_on_all_ones():
    rows = [["1", "1"] for _ in range(10000)]
    out = apply_mnar(make_table(rows), 5)
    assert abs(out.mask[:, 0].mean() - 0.3) < 0.02


def test_mnar_cross_rule():
    # column 0 has no ones, column 1 is all zero: only the cross rule fires on column 0
    rows = [["0", "0"] for _ in range(10000)]
    out = apply_mnar(make_table(rows), 2)
    assert abs(out.mask[:, 0].mean() - 0.4) < 0.02
    assert not out.mask[:, 1].any()


# ---------------------------------------------------------------- split


def test_split_sizes():
    table = _column_table(571)
    train, test = split(table, 0.8, 0)
    assert (train.n, test.n) == (456, 115)
    ids = sorted(train.row_ids.tolist() + test.row_ids.tolist())
    assert ids == list(range(571))
    a, b = split(_column_table(2), 0.5, 0)
    assert (a.n, b.n) == (1, 1)
    with pytest.raises(ValueError):
        split(_column_table(1), 0.5, 0)


def test_mask_and_split_orders():
    table = _column_table(100, 2)
    masked, is_train = mask_and_split(table, "mcar", 0, 0.8)
    assert is_train.sum() == 80 and masked.mask.sum() == 80
    masked, is_train = mask_and_split(table, "mcar", 0, 0.8, order="split_then_mask")
    assert masked.mask[is_train].sum() == 2 * 32 and masked.mask[~is_train].sum() == 2 * 8
    for (r, c), v in masked.shadow.items():
        assert table.values[r, c] == v


def test_csv_and_shadow_roundtrip(tmp_path):
    table = make_table([[f"v{i % 3}", float(i)] for i in range(20)], kinds=[Kind.CATEGORICAL, Kind.NORMAL])
    masked = apply_mcar(table, 0.4, 1)
    write_csv(masked, tmp_path / "m.csv")
    write_shadow(masked, tmp_path / "s.csv")
    schema = Schema(tuple(FeatureSpec(c.name, c.kind) for c in table.columns))
    loaded = load_csv(tmp_path / "m.csv", schema)
    assert (loaded.mask == masked.mask).all()
    assert loaded.columns == masked.columns
    assert read_shadow(tmp_path / "s.csv", loaded) == masked.shadow


# ---------------------------------------------------------------- stats


def test_feature_stats_examples():
    table = make_table([[1.0, 3.0, 1.0, 7.0], [1.0, 5.0, 1.0, 7.0], [2.0, 4.0, 2.0, 7.0]],
                       kinds=[Kind.EMPIRICAL] * 3 + [Kind.CATEGORICAL])
    stats = feature_stats(table)
    assert stats.modes[0] == 1.0 and stats.means[0] == pytest.approx(4 / 3)
    assert stats.correlation[0, 2] == pytest.approx(1.0)
    assert stats.correlation[0, 3] == 0.0
    assert stats.correlation[0, 0] == pytest.approx(1.0)


def test_feature_stats_fully_missing():
    table = make_table([["a", None], ["b", None]])
    with pytest.raises(ValueError):
        feature_stats(table)
