"""Single-node regularisation paths and the engine behind them."""
from __future__ import annotations

from dataclasses import replace

import numpy as np

from . import _kernels as kern
from .data import GroupedDesign, GroupPartition, lambda_max, lipschitz_constants
from .pathcore import PathModels, lambda_grid, solve_path
from .screening import edpp_screen_step
from .solvers import SolveOptions, admm_solve, bcd_solve, fista_solve

SOLVERS = ("bcd", "fista", "admm", "dbcd")


class LocalEngine:
    """Screening and solving on one in-memory design."""

    def __init__(self, design: GroupedDesign, partition: GroupPartition, solver="bcd", opts=None,
                 gap_tol=1e-8, admm_rho=1.0, admm_tol=1e-10, admm_max_iter=100_000):
        if solver not in ("bcd", "fista", "admm"):
            raise ValueError(f"unknown single-node solver {solver!r}")
        self.design = design
        if partition.lipschitz is None:
            partition = partition.with_lipschitz(lipschitz_constants(design, partition))
        self.partition = partition
        self.solver = solver
        self.opts = opts or SolveOptions(gap_tol=gap_tol)
        if self.opts.gap_tol is None:
            self.opts = replace(self.opts, gap_tol=gap_tol)
        self.gap_tol = gap_tol
        self.admm = dict(rho=admm_rho, tol_abs=admm_tol, tol_rel=admm_tol, max_iter=admm_max_iter)
        self.correlations = partition.norms(design.matrix.T @ design.response)
        self.lam_max, self.g_star = lambda_max(self.correlations, partition)
        self.group_norms = np.sqrt(partition.lipschitz)

    def edpp(self, x_prev, lam_prev, lam_next, gap_prev):
        mask, _ = edpp_screen_step(self.design, self.partition, x_prev, lam_prev, lam_next, self.group_norms,
                                   lam_max=self.lam_max, g_star=self.g_star, gap_prev=gap_prev)
        return mask

    def solve(self, lam, kept, x0):
        kept = np.asarray(kept, dtype=np.int64)
        if self.solver == "bcd":
            return bcd_solve(self.design, self.partition, lam, self.opts, kept=kept, x0=x0)
        cols = self.partition.columns(kept)
        sub_d = self.design.take_columns(cols)
        sub_p = self.partition.subset(kept)
        if self.solver == "fista":
            sol = fista_solve(sub_d, sub_p, lam, self.gap_tol, x0=x0[cols], relative=True)
        else:
            sol = admm_solve(sub_d, sub_p, lam, x0=x0[cols], **self.admm)
        x = np.zeros(self.design.cols)
        x[cols] = sol.x
        sol.x = x
        return sol

    def full_stats(self, x):
        R = self.design.matrix @ x - self.design.response
        rr, ry = kern.residual_stats(R, self.design.response)
        return self.partition.norms(kern.residual_corr(self.design.matrix, R, self.partition.offsets)), rr, ry


def run_path(source, partition: GroupPartition, count=100, lmin_ratio=0.1, screen="ddpp", solver="bcd",
             opts: SolveOptions | None = None, gap_tol=1e-8, max_groups=None, progress=None,
             feature_ids=None, **engine_kw) -> PathModels:
    """Solve the group Lasso along ``count`` lambdas from lambda_max to ``lmin_ratio * lambda_max``.

    ``source`` is a :class:`GroupedDesign` (single node) or a
    :class:`~fedglasso.lqm.Master` (federated; solver must be ``"dbcd"``).
    """
    if solver not in SOLVERS:
        raise ValueError(f"unknown solver {solver!r}")
    if isinstance(source, GroupedDesign):
        if solver == "dbcd":
            raise ValueError("dbcd needs a federated session; pass a Master or use solver='bcd'")
        engine = LocalEngine(source, partition, solver, opts, gap_tol, **engine_kw)
        where = "single-node"
    else:
        from .distributed import FederatedEngine
        if solver != "dbcd":
            raise ValueError("federated sessions only support solver='dbcd'")
        engine = FederatedEngine(source, partition, opts, gap_tol)
        where = source.describe()
    lambdas = lambda_grid(engine.lam_max, count, lmin_ratio)
    seed = engine.opts.seed if engine.opts is not None else None
    prov = {"solver": solver, "screen": screen, "seed": seed, "topology": where,
            "count": count, "lmin_ratio": lmin_ratio, "gap_tol": gap_tol, "backend": kern.BACKEND}
    pm = solve_path(engine, engine.partition, lambdas, screen, gap_tol, max_groups, progress, prov)
    pm.feature_ids = feature_ids
    return pm
