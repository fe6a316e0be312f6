"""Missing-value imputation with graph-retrieved neighbours and an LLM forest."""
from .dataset import FeatureSpec, Kind, Schema, Table, load_csv, load_schema, mask_and_split
from .forest import ForestConfig, VoteLedger, grow_tree, impute_all, weighted_vote
from .infograph import BipartiteGraph, build_all, build_bipartite
from .llm import BackendConfig, Confidence, ImputationVote, make_backend, parse_response
from .merge import MergePlan, MergeThreshold, merge_hierarchy
from .prompt import PromptBundle, PromptTemplate, build_prompt
from .walk import NeighborSet, WalkConfig, select_neighbors

__version__ = "0.1.0"

__all__ = [
    "BackendConfig", "BipartiteGraph", "Confidence", "FeatureSpec", "ForestConfig", "ImputationVote",
    "Kind", "MergePlan", "MergeThreshold", "NeighborSet", "PromptBundle", "PromptTemplate", "Schema",
    "Table", "VoteLedger", "WalkConfig", "build_all", "build_bipartite", "build_prompt", "grow_tree",
    "impute_all", "load_csv", "load_schema", "make_backend", "mask_and_split", "merge_hierarchy",
    "parse_response", "select_neighbors", "weighted_vote",
]
