"""Single-node group Lasso solvers and certificates.

Problem::

    min_x  0.5 * ||y - A x||^2 + lam * sum_g w_g ||x_g||_2

``bcd_solve`` is the production solver (randomised proximal block
coordinate descent on contiguous groups); ``fista_solve`` and ``admm_solve``
are independent oracles / baselines.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import _kernels as kern
from .data import GroupedDesign, GroupPartition, lipschitz_constants, robust_spectral_norm_sq


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class SolveOptions:
    """Knobs for block coordinate descent.

    With ``gap_tol`` unset the solver stops when the objective decreases by
    less than ``tol`` (relative) over one epoch; with ``gap_tol`` set it
    stops once ``gap <= gap_tol * (1 + |objective|)``.
    """

    max_epochs: int = 10_000
    tol: float = 1e-8
    seed: int = 0
    selection: str = "random"
    gap_tol: float | None = None

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.selection not in ("random", "cyclic"):
            raise ValueError(f"unknown selection {self.selection!r}")


@dataclass
class Solution:
    x: np.ndarray
    objective: float
    gap: float
    epochs_used: int
    converged: bool
    history: list = field(default_factory=list)


def objective(design: GroupedDesign, partition: GroupPartition, x, lam) -> float:
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (design.cols,) or partition.n_features != design.cols:
        raise ValueError("dimension mismatch between design, partition and x")
    r = design.response - design.matrix @ x
    return 0.5 * float(r @ r) + lam * partition.penalty(x)


def group_prox(u, t):
    """Group soft-threshold ``(1 - t/||u||)_+ u``; exact zeros when ``||u|| <= t``."""
    u = np.asarray(u, dtype=np.float64)
    if t < 0:
        raise ValueError("threshold must be non-negative")
    nrm = math.sqrt(float(u @ u))
    if nrm <= t:
        return np.zeros_like(u)
    return (1.0 - t / nrm) * u


def prox_all(u, partition: GroupPartition, thresholds):
    """Blockwise group soft-threshold of a full length-P vector."""
    norms = partition.norms(u)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(norms > thresholds, 1.0 - thresholds / norms, 0.0)
    return u * np.repeat(scale, partition.sizes)


def gap_from_stats(rr, ry, corr_norms, weights, lam, penalty):
    """Duality gap from residual statistics.

    ``rr = ||R||^2`` and ``ry = <R, y>`` with ``R = A x - y``;
    ``corr_norms[g] = ||A_g^T R||``.  The dual point is the residual rescaled
    into the dual feasible set.
    """
    ratio = float(np.max(corr_norms / weights)) if len(corr_norms) else 0.0
    s = 1.0 if ratio == 0.0 else min(1.0, lam / ratio)
    primal = 0.5 * rr + lam * penalty
    dual = -0.5 * s * s * rr - s * ry
    return primal - dual


def duality_gap(design: GroupedDesign, partition: GroupPartition, x, lam, groups=None) -> float:
    """Gap between the primal objective at ``x`` and a feasible dual value.

    ``groups`` restricts the problem to a subset of groups (the reduced
    problem after screening); ``x`` must then be zero outside them.
    """
    if lam <= 0:
        raise ValueError("lambda must be positive")
    R = design.matrix @ x - design.response
    rr, ry = kern.residual_stats(R, design.response)
    norms = partition.norms(kern.residual_corr(design.matrix, R, partition.offsets))
    w = partition.weights
    if groups is not None:
        norms, w = norms[groups], w[groups]
    return gap_from_stats(rr, ry, norms, w, lam, partition.penalty(x))


# ---------------------------------------------------------------------------
# block coordinate descent
# ---------------------------------------------------------------------------

class _LocalBackend:
    """Residual bookkeeping for a single in-memory design."""

    def __init__(self, design, partition, x):
        self.A = design.matrix
        self.y = design.response
        self.offsets = partition.offsets
        self.weights = partition.weights
        self.R = self.A @ x - self.y

    def epoch(self, x, order, lam, lips):
        kern.bcd_epoch(self.A, self.R, x, order, self.offsets, self.weights, lips, lam)

    def stats(self):
        return kern.residual_stats(self.R, self.y)

    def corr_norms(self, groups):
        sub = kern.blocks_corr(self.A, self.R, self.offsets, groups)
        return kern.group_norms(sub, kern.block_offsets(self.offsets, groups))


def run_bcd(backend, partition: GroupPartition, lam, opts: SolveOptions, kept, x, lips) -> Solution:
    """Epoch loop shared by the single-node and the distributed solver.

    ``backend`` owns the residual ``R = A x - y`` and exposes ``epoch``,
    ``stats`` and ``corr_norms``; ``x`` is updated in place.
    """
    kept = np.asarray(kept, dtype=np.int64)
    rng = np.random.default_rng(opts.seed)
    w = partition.weights

    def gap_now(rr, ry, pen):
        norms = backend.corr_norms(kept)
        return gap_from_stats(rr, ry, norms, w[kept], lam, pen)

    rr, ry = backend.stats()
    pen = partition.penalty(x)
    obj = 0.5 * rr + lam * pen
    history = [obj]
    if len(kept) == 0:
        return Solution(x, obj, gap_now(rr, ry, pen), 0, True, history)

    converged = False
    gap = math.nan
    epoch = 0
    for epoch in range(1, opts.max_epochs + 1):
        if opts.selection == "random":
            order = rng.permutation(kept)
        else:
            order = kept
        backend.epoch(x, order, lam, lips)
        rr, ry = backend.stats()
        pen = partition.penalty(x)
        new_obj = 0.5 * rr + lam * pen
        history.append(new_obj)
        if opts.gap_tol is not None:
            gap = gap_now(rr, ry, pen)
            converged = gap <= opts.gap_tol * (1.0 + abs(new_obj))
        else:
            gap = math.nan
            base = abs(obj) if obj != 0 else 1.0
            converged = (obj - new_obj) / base < opts.tol
        obj = new_obj
        if converged:
            break
    if math.isnan(gap):
        gap = gap_now(rr, ry, pen)
    return Solution(x, obj, gap, epoch, converged, history)


def bcd_solve(design: GroupedDesign, partition: GroupPartition, lam, opts: SolveOptions | None = None,
              *, kept=None, x0=None) -> Solution:
    """Randomised proximal block coordinate descent.

    ``kept`` restricts updates to a subset of groups (everything else stays
    at its ``x0`` value, normally zero).  Lipschitz constants are taken from
    ``partition.lipschitz`` when present.
    """
    if lam <= 0:
        raise ValueError("lambda must be positive")
    opts = opts or SolveOptions()
    lips = partition.lipschitz if partition.lipschitz is not None else lipschitz_constants(design, partition)
    x = np.zeros(design.cols) if x0 is None else np.array(x0, dtype=np.float64)
    kept = np.arange(partition.group_count) if kept is None else np.asarray(kept, dtype=np.int64)
    backend = _LocalBackend(design, partition, x)
    return run_bcd(backend, partition, lam, opts, kept, x, lips)


# ---------------------------------------------------------------------------
# FISTA oracle
# ---------------------------------------------------------------------------

def global_lipschitz(design: GroupedDesign) -> float:
    A = design.matrix
    gram = A @ A.T if A.shape[0] < A.shape[1] else A.T @ A
    return robust_spectral_norm_sq(gram)


def fista_solve(design: GroupedDesign, partition: GroupPartition, lam, tol_gap=1e-10, *,
                max_iter=200_000, x0=None, relative=False, check_every=10, lipschitz=None) -> Solution:
    """Accelerated proximal gradient with gradient-based adaptive restart.

    Runs until the duality gap drops to ``tol_gap`` (times ``1 + |obj|`` when
    ``relative``).
    """
    if lam <= 0:
        raise ValueError("lambda must be positive")
    A, y = design.matrix, design.response
    L = lipschitz or global_lipschitz(design)
    if L <= 0:
        L = 1.0
    thresholds = lam * partition.weights / L
    x = np.zeros(design.cols) if x0 is None else np.array(x0, dtype=np.float64)
    z = x.copy()
    t = 1.0

    def certify(v):
        gap = duality_gap(design, partition, v, lam)
        obj = objective(design, partition, v, lam)
        limit = tol_gap * (1.0 + abs(obj)) if relative else tol_gap
        return obj, gap, gap <= limit

    obj, gap, done = certify(x)
    it = 0
    while not done and it < max_iter:
        it += 1
        grad = A.T @ (A @ z - y)
        x_new = prox_all(z - grad / L, partition, thresholds)
        if (z - x_new) @ (x_new - x) > 0:
            t = 1.0
            z = x_new.copy()
        else:
            t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
            z = x_new + ((t - 1.0) / t_new) * (x_new - x)
            t = t_new
        x = x_new
        if it % check_every == 0:
            obj, gap, done = certify(x)
    if not done:
        obj, gap, done = certify(x)
    return Solution(x, obj, gap, it, done, [obj])


# ---------------------------------------------------------------------------
# ADMM baseline
# ---------------------------------------------------------------------------

class _NormalSolver:
    """Cached solve of ``(A^T A + rho I) v = q`` (Woodbury form when P > N)."""

    def __init__(self, A, rho):
        self.A = A
        self.rho = rho
        n, p = A.shape
        self.wide = p > n
        M = A @ A.T if self.wide else A.T @ A
        M = M + rho * np.eye(M.shape[0])
        try:
            self.factor = scipy.linalg.cho_factor(M)
        except np.linalg.LinAlgError as exc:
            raise SolverError(f"factorisation of the ADMM normal matrix failed: {exc}") from exc

    def solve(self, q):
        if self.wide:
            inner = scipy.linalg.cho_solve(self.factor, self.A @ q)
            return (q - self.A.T @ inner) / self.rho
        return scipy.linalg.cho_solve(self.factor, q)


def admm_solve(design: GroupedDesign, partition: GroupPartition, lam, rho=1.0, tol_abs=1e-8, tol_rel=1e-8, *,
               max_iter=100_000, x0=None) -> Solution:
    """Consensus-split ADMM (x = z) with group soft-thresholding on z."""
    if rho <= 0:
        raise ValueError("rho must be positive")
    if lam <= 0:
        raise ValueError("lambda must be positive")
    A, y = design.matrix, design.response
    P = design.cols
    normal = _NormalSolver(A, rho)
    Aty = A.T @ y
    thresholds = lam * partition.weights / rho
    z = np.zeros(P) if x0 is None else np.array(x0, dtype=np.float64)
    u = np.zeros(P)
    sqrt_p = math.sqrt(P)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        x = normal.solve(Aty + rho * (z - u))
        z_old = z
        z = prox_all(x + u, partition, thresholds)
        u = u + x - z
        r_norm = np.linalg.norm(x - z)
        s_norm = rho * np.linalg.norm(z - z_old)
        eps_pri = sqrt_p * tol_abs + tol_rel * max(np.linalg.norm(x), np.linalg.norm(z))
        eps_dual = sqrt_p * tol_abs + tol_rel * rho * np.linalg.norm(u)
        if r_norm <= eps_pri and s_norm <= eps_dual:
            converged = True
            break
    obj = objective(design, partition, z, lam)
    return Solution(z, obj, duality_gap(design, partition, z, lam), it, converged, [obj])
