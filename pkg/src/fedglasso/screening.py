"""Group screening: the basic strong rule, the sequential dual polytope
projection (EDPP) safe rule, and KKT post-checks."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import GroupedDesign, GroupPartition, group_correlations, lambda_max

log = logging.getLogger(__name__)

SAFE_GAP = 1e-9
KKT_RTOL = 1e-8


@dataclass(frozen=True)
class ScreenMask:
    """Outcome of screening at one lambda.

    ``safe`` is False when the rule is heuristic (strong rule) or when the
    previous solution was not accurate enough for the safe rule's guarantee;
    such masks must be followed by :func:`kkt_violations`.
    """

    lam: float
    kept: tuple
    discarded: tuple
    rule: str = "none"
    safe: bool = True
    note: str = ""

    def __post_init__(self):
        kept = tuple(sorted(int(g) for g in self.kept))
        disc = tuple(sorted(int(g) for g in self.discarded))
        if set(kept) & set(disc):
            raise ValueError("kept and discarded overlap")
        if self.rule == "none" and disc:
            raise ValueError("rule 'none' cannot discard groups")
        object.__setattr__(self, "kept", kept)
        object.__setattr__(self, "discarded", disc)
        object.__setattr__(self, "safe", bool(self.safe))
        object.__setattr__(self, "lam", float(self.lam))

    @classmethod
    def from_discard_flags(cls, lam, flags, rule, safe=True, note=""):
        flags = np.asarray(flags, dtype=bool)
        return cls(lam, tuple(np.flatnonzero(~flags)), tuple(np.flatnonzero(flags)), rule, safe, note)

    @classmethod
    def keep_all(cls, lam, group_count, rule="none", note=""):
        return cls(lam, tuple(range(group_count)), (), rule, True, note)

    @property
    def group_count(self) -> int:
        return len(self.kept) + len(self.discarded)

    @property
    def rejection_rate(self) -> float:
        return len(self.discarded) / self.group_count

    def readmit(self, groups) -> ScreenMask:
        groups = set(int(g) for g in groups)
        return ScreenMask(self.lam, tuple(set(self.kept) | groups),
                          tuple(g for g in self.discarded if g not in groups), self.rule, False,
                          (self.note + "; " if self.note else "") + f"readmitted {sorted(groups)}")


@dataclass
class DualState:
    """Geometry of one sequential screening step.

    ``scores[g] = ||A_g^T (theta + v2_perp/2)||`` and ``bounds[g]`` is the
    right-hand side of the rejection test; a group is discarded iff
    ``scores[g] < bounds[g]``.
    """

    theta: np.ndarray
    v1: np.ndarray
    v2: np.ndarray
    v2_perp: np.ndarray
    lambda_prev: float
    lambda_next: float
    scores: np.ndarray = field(default=None)
    bounds: np.ndarray = field(default=None)


def strong_rule_mask(correlations, partition: GroupPartition, lam, lam_max) -> ScreenMask:
    """Discard g iff ``c_g <= w_g (2 lam - lam_max)``.

    When ``2 lam - lam_max < 0`` only zero-correlation groups qualify.
    """
    if lam > lam_max:
        raise ValueError(f"lambda {lam} exceeds lambda_max {lam_max}")
    if lam <= 0:
        raise ValueError("lambda must be positive")
    c = np.asarray(correlations, dtype=np.float64)
    bound = 2.0 * lam - lam_max
    if bound >= 0:
        flags = c <= partition.weights * bound
    else:
        flags = c == 0.0
    return ScreenMask.from_discard_flags(lam, flags, "strong", safe=False)


def edpp_init(design: GroupedDesign, partition: GroupPartition, g_star: int) -> np.ndarray:
    """``v1`` at lambda_max: ``A_{g*} A_{g*}^T y``."""
    Ag = design.matrix[:, partition.group_slice(g_star)]
    return Ag @ (Ag.T @ design.response)


def project_out(v1, v2, v1_sq=None, inner=None):
    """Component of ``v2`` orthogonal to ``v1`` (inner products may be precomputed)."""
    v1_sq = float(v1 @ v1) if v1_sq is None else v1_sq
    inner = float(v1 @ v2) if inner is None else inner
    return v2 - (inner / v1_sq) * v1


def edpp_bounds(partition: GroupPartition, v2_perp_norm, group_norms):
    return partition.weights - 0.5 * v2_perp_norm * np.asarray(group_norms)


def edpp_screen_step(design: GroupedDesign, partition: GroupPartition, x_prev, lam_prev, lam_next, group_norms,
                     *, lam_max=None, g_star=None, gap_prev=None) -> tuple[ScreenMask, DualState]:
    """Sequential safe screening from the solution at ``lam_prev`` to ``lam_next``.

    ``group_norms`` are spectral norms ``||A_g||_2`` (an upper bound such as
    the Frobenius norm also works, just discards less).  ``gap_prev`` is the
    duality gap of ``x_prev``; above :data:`SAFE_GAP` the mask is labelled
    heuristic.
    """
    if not (0 < lam_next <= lam_prev):
        raise ValueError("need 0 < lam_next <= lam_prev")
    A, y = design.matrix, design.response
    if lam_max is None or g_star is None:
        lam_max, g_star = lambda_max(group_correlations(design, partition), partition)
    if lam_prev > lam_max * (1 + 1e-12):
        raise ValueError("lam_prev exceeds lambda_max")
    at_max = lam_prev >= lam_max
    if at_max:
        theta = y / lam_max
        v1 = edpp_init(design, partition, g_star)
    else:
        theta = (y - A @ x_prev) / lam_prev
        v1 = y / lam_prev - theta
    v2 = y / lam_next - theta
    v1_sq = float(v1 @ v1)
    G = partition.group_count
    if v1_sq == 0.0:
        note = "v1 vanished; nothing discarded"
        log.info("screening step %g -> %g: %s", lam_prev, lam_next, note)
        state = DualState(theta, v1, v2, np.zeros_like(v2), lam_prev, lam_next)
        return ScreenMask.keep_all(lam_next, G, "edpp", note), state
    v2_perp = project_out(v1, v2, v1_sq)
    perp_norm = float(np.sqrt(v2_perp @ v2_perp))
    scores = partition.norms(A.T @ (theta + 0.5 * v2_perp))
    bounds = edpp_bounds(partition, perp_norm, group_norms)
    safe = at_max or (gap_prev is not None and gap_prev <= SAFE_GAP)
    state = DualState(theta, v1, v2, v2_perp, lam_prev, lam_next, scores, bounds)
    return ScreenMask.from_discard_flags(lam_next, scores < bounds, "edpp", safe=safe), state


def kkt_violations(design: GroupedDesign, partition: GroupPartition, x, lam, mask: ScreenMask,
                   corr_norms=None) -> set:
    """Discarded groups whose optimality condition fails at ``x``.

    An empty result certifies that the reduced solution (padded with zeros)
    solves the full problem.
    """
    if not mask.discarded:
        return set()
    if corr_norms is None:
        r = design.response - design.matrix @ x
        corr_norms = partition.norms(design.matrix.T @ r)
    disc = np.asarray(mask.discarded)
    bad = corr_norms[disc] > lam * partition.weights[disc] * (1.0 + KKT_RTOL)
    return set(int(g) for g in disc[bad])
