import json

import numpy as np
import pytest

from llmforest.dataset import FeatureSpec, Kind, Table


def make_table(rows, kinds=None, names=None, label=None):
    d = len(rows[0])
    names = names or [f"c{j}" for j in range(d)]
    kinds = kinds or [Kind.CATEGORICAL] * d
    return Table.build([FeatureSpec(n, k) for n, k in zip(names, kinds)], rows, label)


def random_table(rng, n, d, levels=3, missing=0.0):
    """Categorical table; every column keeps at least one observed cell."""
    grid = rng.integers(0, levels, size=(n, d)).astype(object)
    rows = [[f"x{v}" for v in row] for row in grid]
    for i in range(1, n):
        for j in range(d):
            if rng.random() < missing:
                rows[i][j] = None
    return make_table(rows)


@pytest.fixture
def cluster_csv(tmp_path):
    from llmforest.dataset import write_csv
    from llmforest.evalbench import planted_clusters

    table, _ = planted_clusters(seed=1)
    write_csv(table, tmp_path / "data.csv")
    schema = {"columns": [{"name": n, "kind": "categorical"} for n in table.names]}
    (tmp_path / "schema.json").write_text(json.dumps(schema))
    return tmp_path


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
