"""Federated screening and block coordinate descent on top of :mod:`fedglasso.lqm`.

Every global quantity is assembled by the master from site partials; the
per-site residual ``R_i = A_i x - y_i`` and the dual slices never leave the
sites.
"""
from __future__ import annotations

import math
from dataclasses import replace

import numpy as np

from . import _kernels as kern
from .data import GroupPartition, lambda_max, robust_spectral_norm_sq
from .lqm import LqmError, Master, Op
from .pathcore import PathModels, solve_path
from .screening import ScreenMask, edpp_bounds, strong_rule_mask
from .solvers import Solution, SolveOptions, run_bcd


class SolveAborted(RuntimeError):
    """A site failed mid-solve; ``partial`` holds the unconverged iterate."""

    def __init__(self, partial: Solution, cause):
        super().__init__(f"distributed solve aborted: {cause}")
        self.partial = partial
        self.cause = cause


def federated_correlations(master: Master) -> np.ndarray:
    """``Q = sum_i A_i^T y_i``, broadcast back to every site."""
    return master.lqm_sum(Op.CORRELATION)


def dsr_mask(master: Master, partition: GroupPartition, lam, Q=None) -> ScreenMask:
    """Distributed strong rule: aggregate correlations, then apply the strong rule."""
    Q = federated_correlations(master) if Q is None else Q
    c = partition.norms(Q)
    lam_max, _ = lambda_max(c, partition)
    return strong_rule_mask(c, partition, lam, lam_max)


def federated_lipschitz(master: Master, partition: GroupPartition, tol=1e-10) -> np.ndarray:
    """``L_g`` from aggregated Gram blocks (p_g x p_g partials only)."""
    out = np.empty(partition.group_count)
    for g in range(partition.group_count):
        s, e = int(partition.offsets[g]), int(partition.offsets[g + 1])
        gram = master.lqm_sum(Op.GROUP_GRAM, [s, e], broadcast=False).reshape(e - s, e - s)
        out[g] = robust_spectral_norm_sq(gram, tol)
    return np.maximum(out, np.finfo(float).tiny)


class _FederatedBackend:
    """BCD residual bookkeeping spread over the sites."""

    def __init__(self, master, partition, x):
        self.master = master
        self.offsets = partition.offsets
        self.weights = partition.weights
        master.control(Op.SET_MODEL, x)

    def epoch(self, x, order, lam, lips):
        m = self.master
        for g in order:
            s, e = int(self.offsets[g]), int(self.offsets[g + 1])
            grad = m.lqm_sum(Op.GRADIENT, [s, e], broadcast=False)
            new = kern.prox_step(x[s:e], grad, lips[g], lam * self.weights[g] / lips[g])
            delta = new - x[s:e]
            if np.any(delta != 0.0):
                x[s:e] = new
                m.control(Op.APPLY_BLOCK, np.concatenate([[s, e], new]))

    def stats(self):
        rr, ry = self.master.lqm_sum(Op.RESIDUAL_STATS, broadcast=False)
        return float(rr), float(ry)

    def corr_norms(self, groups):
        full = self.master.lqm_sum(Op.RESIDUAL_CORR, broadcast=False)
        sub, sub_off = kern.gather_blocks(full, self.offsets, groups)
        return kern.group_norms(sub, sub_off)


def dbcd_solve(master: Master, partition: GroupPartition, lam, mask: ScreenMask | None = None, warm_start=None,
               opts: SolveOptions | None = None, lipschitz=None) -> Solution:
    """Distributed block coordinate descent.

    The master draws the group, sums the sites' gradient partials, applies
    the proximal step and broadcasts the new block; sites update their
    residuals locally.  With one site and the same seed this reproduces
    :func:`fedglasso.solvers.bcd_solve` exactly.
    """
    if lam <= 0:
        raise ValueError("lambda must be positive")
    opts = opts or SolveOptions()
    lips = lipschitz if lipschitz is not None else (
        partition.lipschitz if partition.lipschitz is not None else federated_lipschitz(master, partition))
    x = np.zeros(partition.n_features) if warm_start is None else np.array(warm_start, dtype=np.float64)
    kept = np.arange(partition.group_count) if mask is None else np.asarray(mask.kept, dtype=np.int64)
    try:
        backend = _FederatedBackend(master, partition, x)
        return run_bcd(backend, partition, lam, opts, kept, x, lips)
    except LqmError as exc:
        obj = math.nan
        raise SolveAborted(Solution(x, obj, math.nan, 0, False), exc) from exc


def residual_audit(master: Master) -> float:
    """Largest site-local drift between the maintained residual and a recomputation."""
    return float(max(p[0] for p in master.query(Op.AUDIT)))


class FederatedEngine:
    """Path engine whose every step goes through the LQM master."""

    def __init__(self, master: Master, partition: GroupPartition, opts=None, gap_tol=1e-8):
        self.master = master
        self.opts = opts or SolveOptions(gap_tol=gap_tol)
        if self.opts.gap_tol is None:
            self.opts = replace(self.opts, gap_tol=gap_tol)
        master.control(Op.SET_MODEL, np.zeros(partition.n_features))
        self.Q = federated_correlations(master)
        self.correlations = partition.norms(self.Q)
        self.lam_max, self.g_star = lambda_max(self.correlations, partition)
        if partition.lipschitz is None:
            partition = partition.with_lipschitz(federated_lipschitz(master, partition))
        self.partition = partition
        self.group_norms = np.sqrt(partition.lipschitz)
        self.last_scores = None

    def edpp(self, x_prev, lam_prev, lam_next, gap_prev):
        """Distributed dual polytope projection screening for one lambda step.

        Sites must hold the residual of ``x_prev`` (they do after a solve).
        Inner products and norms are aggregated globally before use.
        """
        p, m = self.partition, self.master
        at_max = lam_prev >= self.lam_max
        payload = [lam_prev, lam_next, 1.0 if at_max else 0.0, self.lam_max]
        if at_max:
            sl = p.group_slice(self.g_star)
            payload += [sl.start, sl.stop, *self.Q[sl]]
        v1_sq, inner = m.lqm_sum(Op.DUAL_SETUP, payload, broadcast=False)
        if v1_sq == 0.0:
            self.last_scores = None
            return ScreenMask.keep_all(lam_next, p.group_count, "edpp", "v1 vanished; nothing discarded")
        (perp_sq,) = m.lqm_sum(Op.PROJECT, [inner / v1_sq], broadcast=False)
        perp_norm = math.sqrt(perp_sq)
        scores = p.norms(m.lqm_sum(Op.SCREEN_CORR, broadcast=False))
        bounds = edpp_bounds(p, perp_norm, self.group_norms)
        self.last_scores = (scores, bounds)
        safe = at_max or gap_prev <= 1e-9
        return ScreenMask.from_discard_flags(lam_next, scores < bounds, "edpp", safe=safe)

    def solve(self, lam, kept, x0):
        return dbcd_solve(self.master, self.partition, lam, ScreenMask(lam, tuple(kept), ()), x0, self.opts,
                          self.partition.lipschitz)

    def full_stats(self, x):
        corr = self.master.lqm_sum(Op.RESIDUAL_CORR, broadcast=False)
        rr, ry = self.master.lqm_sum(Op.RESIDUAL_STATS, broadcast=False)
        return self.partition.norms(corr), float(rr), float(ry)


def ddpp_gl_path(master: Master, partition: GroupPartition, lambdas, opts=None, gap_tol=1e-8, screen="ddpp",
                 progress=None) -> PathModels:
    """Federated path with DDPP screening and DBCD as the inner solver.

    ``lambdas`` must start at lambda_max (as computed from the aggregated
    correlations) and decrease strictly.
    """
    engine = FederatedEngine(master, partition, opts, gap_tol)
    lambdas = np.asarray(lambdas, dtype=np.float64)
    if not np.isclose(lambdas[0], engine.lam_max, rtol=1e-12):
        raise ValueError(f"path must start at lambda_max={engine.lam_max}")
    lambdas = lambdas.copy()
    lambdas[0] = engine.lam_max
    prov = {"solver": "dbcd", "screen": screen, "seed": engine.opts.seed, "topology": master.describe(),
            "gap_tol": gap_tol, "backend": kern.BACKEND}
    return solve_path(engine, engine.partition, lambdas, screen, gap_tol, None, progress, prov)
