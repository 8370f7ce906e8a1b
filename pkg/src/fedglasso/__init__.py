"""Group-Lasso feature selection over horizontally partitioned data.

Single-node solvers, safe and heuristic screening, a local-query-model
wire protocol, distributed screening and block coordinate descent, a
genotype ingestion path and the selection / benchmarking pipeline.
"""
from ._kernels import BACKEND
from .data import (GroupedDesign, GroupMeta, GroupPartition, PowerIterationError, SiteShard, lambda_max,
                   load_dataset, make_partition, save_dataset, shard_dataset)
from .distributed import FederatedEngine, SolveAborted, dbcd_solve, ddpp_gl_path, dsr_mask, residual_audit
from .lqm import LqmError, LqmFrame, Master, in_process_master, tcp_master
from .path import run_path
from .pathcore import PathModels, lambda_grid
from .screening import ScreenMask, edpp_screen_step, kkt_violations, strong_rule_mask
from .selection import frequency_select, generate_synthetic, stability_select
from .solvers import Solution, SolveOptions, admm_solve, bcd_solve, duality_gap, fista_solve, objective

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "GroupedDesign", "GroupMeta", "GroupPartition", "PowerIterationError", "SiteShard", "lambda_max",
    "load_dataset", "make_partition", "save_dataset", "shard_dataset", "FederatedEngine", "SolveAborted",
    "dbcd_solve", "ddpp_gl_path", "dsr_mask", "residual_audit", "LqmError", "LqmFrame", "Master",
    "in_process_master", "tcp_master", "run_path", "PathModels", "lambda_grid", "ScreenMask",
    "edpp_screen_step", "kkt_violations", "strong_rule_mask", "frequency_select", "generate_synthetic",
    "stability_select", "Solution", "SolveOptions", "admm_solve", "bcd_solve", "duality_gap", "fista_solve",
    "objective",
]
