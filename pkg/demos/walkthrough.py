"""Walk through the pipeline on a table with planted clusters.

Masks 40% of every column, looks at the neighbours retrieved for one row,
then compares the mock-backed forest with the three baselines.

    python3 demos/walkthrough.py
"""
from collections import Counter

from llmforest import BackendConfig, ForestConfig, WalkConfig, build_all, impute_all, make_backend, merge_hierarchy
from llmforest.baselines import IMPUTERS
from llmforest.dataset import apply_mcar
from llmforest.evalbench import evaluate, planted_clusters
from llmforest.walk import select_all_neighbors

SEED = 3

table, member = planted_clusters(n=100, d=10, clusters=4, keep=8, seed=SEED)
masked = apply_mcar(table, 0.4, SEED)
print(f"{masked.n} rows x {masked.d} features, {len(masked.shadow)} cells masked")

# one tree, by hand
graphs = build_all(masked)
plan, merged = merge_hierarchy(graphs, 1, "shared_count:10", SEED)
print(f"{len(graphs)} feature graphs merged into {len(merged)}")
found = select_all_neighbors(merged, [0], WalkConfig(rounds=5, seed=SEED))[0]
print(f"row 0 is in cluster {member[0]}; neighbours {list(found.entries)} "
      f"come from clusters {dict(Counter(int(member[e]) for e in found.entries))}")

# the whole forest against the baselines
config = ForestConfig(trees=3, neighbors=5, merge_levels=1, sigma="shared_count:10", seed=SEED)
imputed, ledger = impute_all(masked, config, make_backend(BackendConfig()))
report = evaluate(imputed, masked.shadow, ledger, trees=config.trees)
print(f"\n{'method':<8} accuracy")
print(f"{'forest':<8} {report.accuracy:.3f}")
for name, imputer in IMPUTERS.items():
    print(f"{name:<8} {evaluate(imputer(masked), masked.shadow).accuracy:.3f}")
print("\nforest accuracy by vote confidence:", {k: round(v, 3) for k, v in report.accuracy_by_confidence.items()})
