"""Token-based coordinate descent for feature-partitioned (vertical) learning.

Simulates one or several tokens roaming a client communication graph, each
client updating its own parameter block from the token, with optional
periodic server syncs.
"""

from .data import FeatureDataset, generate_synthetic_ridge, load_svmlight, partition_even, write_svmlight
from .engine import RunConfig, RunResult, run_mtcd, run_stcd, run_svfl_baseline
from .graph import ClusterPartition, CommGraph, GraphError, build_topology, walk_analytics
from .metrics import CostModel, accumulate_cost, export_csv, suboptimality, theorem_constants
from .objective import GlmSpec, ModelParams, evaluate, smoothness_constant, solve_reference

__version__ = "0.1.0"

__all__ = [
    "FeatureDataset",
    "generate_synthetic_ridge",
    "load_svmlight",
    "partition_even",
    "write_svmlight",
    "RunConfig",
    "RunResult",
    "run_mtcd",
    "run_stcd",
    "run_svfl_baseline",
    "ClusterPartition",
    "CommGraph",
    "GraphError",
    "build_topology",
    "walk_analytics",
    "CostModel",
    "accumulate_cost",
    "export_csv",
    "suboptimality",
    "theorem_constants",
    "GlmSpec",
    "ModelParams",
    "evaluate",
    "smoothness_constant",
    "solve_reference",
]
