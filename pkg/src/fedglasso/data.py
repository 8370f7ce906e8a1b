"""Grouped design matrices, group partitions, row sharding and the global
quantities derived from them (group correlations, lambda_max, group Gram
matrices and Lipschitz constants).
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels as kern

log = logging.getLogger(__name__)

GLFS_MAGIC = b"GLFS"
GLFS_VERSION = 1
_GLFS_HEADER = struct.Struct("<4sIQQ")

WEIGHT_RULES = ("unit", "sqrt_size", "explicit")


class PowerIterationError(RuntimeError):
    """Power iteration hit its iteration cap; ``estimate`` is the last Rayleigh quotient."""

    def __init__(self, estimate, iterations):
        super().__init__(f"power iteration did not converge in {iterations} iterations "
                         f"(best estimate {estimate!r})")
        self.estimate = estimate
        self.iterations = iterations


@dataclass(frozen=True)
class GroupPartition:
    """Contiguous, non-overlapping column groups with weights.

    ``offsets`` has length ``G + 1``; group ``g`` covers columns
    ``offsets[g]:offsets[g+1]``.
    """

    offsets: np.ndarray
    weights: np.ndarray
    lipschitz: np.ndarray | None = None

    def __post_init__(self):
        off = np.asarray(self.offsets, dtype=np.int64)
        w = np.asarray(self.weights, dtype=np.float64)
        if off.ndim != 1 or len(off) < 2:
            raise ValueError("a partition needs at least one group")
        if off[0] != 0 or np.any(np.diff(off) <= 0):
            raise ValueError("group offsets must start at 0 and be strictly increasing")
        if len(w) != len(off) - 1:
            raise ValueError("need one weight per group")
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise ValueError("group weights must be positive")
        object.__setattr__(self, "offsets", off)
        object.__setattr__(self, "weights", w)
        if self.lipschitz is not None:
            lip = np.asarray(self.lipschitz, dtype=np.float64)
            if lip.shape != w.shape or np.any(lip <= 0):
                raise ValueError("Lipschitz constants must be positive, one per group")
            object.__setattr__(self, "lipschitz", lip)

    @property
    def group_count(self) -> int:
        return len(self.offsets) - 1

    @property
    def n_features(self) -> int:
        return int(self.offsets[-1])

    @property
    def sizes(self) -> np.ndarray:
        return np.diff(self.offsets)

    def group_slice(self, g: int) -> slice:
        return slice(int(self.offsets[g]), int(self.offsets[g + 1]))

    def columns(self, groups) -> np.ndarray:
        """Column indices covered by ``groups`` (in the given order)."""
        if len(groups) == 0:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([np.arange(self.offsets[g], self.offsets[g + 1]) for g in groups])

    def subset(self, groups) -> GroupPartition:
        """Partition of the reduced problem keeping only ``groups``."""
        groups = np.asarray(groups, dtype=np.int64)
        sizes = self.sizes[groups]
        lip = None if self.lipschitz is None else self.lipschitz[groups]
        return GroupPartition(np.concatenate([[0], np.cumsum(sizes)]), self.weights[groups], lip)

    def with_lipschitz(self, lipschitz) -> GroupPartition:
        return GroupPartition(self.offsets, self.weights, lipschitz)

    def norms(self, v) -> np.ndarray:
        """Per-group Euclidean norms of a length-P vector."""
        return kern.group_norms(v, self.offsets)

    def support(self, x) -> np.ndarray:
        """Indices of groups with a nonzero block."""
        return np.flatnonzero(self.norms(x) > 0)

    def penalty(self, x) -> float:
        return float(self.weights @ self.norms(x))


def make_partition(group_sizes: Sequence[int], weight_rule="sqrt_size", weights=None) -> GroupPartition:
    """Build a contiguous partition from group sizes.

    ``weight_rule`` is ``"unit"``, ``"sqrt_size"`` (w_g = sqrt(p_g)) or
    ``"explicit"`` together with ``weights``.  Passing a list as
    ``weight_rule`` is shorthand for explicit weights.
    """
    if not isinstance(weight_rule, str):
        weights, weight_rule = weight_rule, "explicit"
    sizes = np.asarray(list(group_sizes), dtype=np.int64)
    if sizes.size == 0:
        raise ValueError("empty partition")
    if np.any(sizes <= 0):
        raise ValueError("group sizes must be positive")
    if weight_rule == "unit":
        w = np.ones(len(sizes))
    elif weight_rule == "sqrt_size":
        w = np.sqrt(sizes.astype(np.float64))
    elif weight_rule == "explicit":
        if weights is None or len(weights) != len(sizes):
            raise ValueError("explicit weights must give one value per group")
        w = np.asarray(weights, dtype=np.float64)
        if np.any(w <= 0):
            raise ValueError("explicit weights must be positive")
    else:
        raise ValueError(f"unknown weight rule {weight_rule!r}")
    return GroupPartition(np.concatenate([[0], np.cumsum(sizes)]), w)


def fixed_width_sizes(n_features: int, group_size: int) -> list[int]:
    """Consecutive groups of ``group_size`` columns; the last one may be short."""
    if group_size < 1:
        raise ValueError("group_size must be >= 1")
    full, rest = divmod(n_features, group_size)
    return [group_size] * full + ([rest] if rest else [])


@dataclass(frozen=True)
class GroupedDesign:
    """Dense design matrix ``A`` (N x P) with response ``y``.

    The matrix is stored column-major so that every group's columns form one
    contiguous block, which is what the block updates stream over.
    """

    matrix: np.ndarray
    response: np.ndarray

    def __post_init__(self):
        A = np.array(self.matrix, dtype=np.float64, order="F")
        y = np.array(self.response, dtype=np.float64)
        if A.ndim != 2 or y.ndim != 1:
            raise ValueError("matrix must be 2-D and response 1-D")
        if A.shape[0] != y.shape[0]:
            raise ValueError(f"response length {y.shape[0]} != rows {A.shape[0]}")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(y))):
            raise ValueError("design contains non-finite entries")
        A.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "matrix", A)
        object.__setattr__(self, "response", y)

    @property
    def rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def cols(self) -> int:
        return self.matrix.shape[1]

    def take_columns(self, columns) -> GroupedDesign:
        return GroupedDesign(self.matrix[:, columns], self.response)

    def take_rows(self, rows) -> GroupedDesign:
        return GroupedDesign(self.matrix[rows], self.response[rows])


@dataclass(frozen=True)
class SiteShard:
    """One site's private row block ``(A_i, y_i)``."""

    site_index: int
    matrix: np.ndarray
    response: np.ndarray

    def __post_init__(self):
        A = np.array(self.matrix, dtype=np.float64, order="F")
        y = np.array(self.response, dtype=np.float64)
        if A.ndim != 2 or y.shape != (A.shape[0],):
            raise ValueError("shard matrix and response do not match")
        A.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "matrix", A)
        object.__setattr__(self, "response", y)

    @property
    def local_rows(self) -> int:
        return self.matrix.shape[0]


def shard_dataset(design: GroupedDesign, row_counts: Sequence[int]) -> list[SiteShard]:
    """Split ``design`` into consecutive row blocks, one per site."""
    counts = [int(c) for c in row_counts]
    if any(c < 0 for c in counts) or sum(counts) != design.rows:
        raise ValueError(f"row counts {counts} do not sum to N={design.rows}")
    bounds = np.concatenate([[0], np.cumsum(counts)])
    return [
        SiteShard(i, design.matrix[bounds[i]:bounds[i + 1]], design.response[bounds[i]:bounds[i + 1]])
        for i in range(len(counts))
    ]


def concat_shards(shards: Sequence[SiteShard]) -> GroupedDesign:
    shards = sorted(shards, key=lambda s: s.site_index)
    return GroupedDesign(np.vstack([s.matrix for s in shards]), np.concatenate([s.response for s in shards]))


def ordered_sum(partials):
    """Sum equal-length partial vectors in the given (ascending site) order.

    This is the single definition of aggregation order; both the master and
    the blockwise single-node computations use it.
    """
    partials = [np.asarray(p, dtype=np.float64) for p in partials]
    if not partials:
        raise ValueError("nothing to sum")
    acc = partials[0].copy()
    for p in partials[1:]:
        if p.shape != acc.shape:
            raise ValueError(f"partial shape {p.shape} != {acc.shape}")
        acc += p
    return acc


def _row_blocks(design, row_counts):
    if row_counts is None:
        return [(design.matrix, design.response)]
    return [(s.matrix, s.response) for s in shard_dataset(design, row_counts)]


def correlation_vector(design: GroupedDesign, row_counts=None) -> np.ndarray:
    """``A^T y``, optionally accumulated blockwise over row shards."""
    return ordered_sum([A.T @ y for A, y in _row_blocks(design, row_counts)])


def group_correlations(design: GroupedDesign, partition: GroupPartition, row_counts=None) -> np.ndarray:
    """``c_g = ||[A]_g^T y||_2`` for every group."""
    if design.cols != partition.n_features:
        raise ValueError(f"design has {design.cols} columns, partition covers {partition.n_features}")
    return partition.norms(correlation_vector(design, row_counts))


def lambda_max(correlations, partition: GroupPartition) -> tuple[float, int]:
    """Smallest lambda with an all-zero solution and the group achieving it.

    Ties go to the lowest group index.
    """
    c = np.asarray(correlations, dtype=np.float64)
    if c.size == 0:
        raise ValueError("empty partition")
    ratios = c / partition.weights
    g = int(np.argmax(ratios))
    return float(ratios[g]), g


def group_gram(source, partition: GroupPartition, g: int) -> np.ndarray:
    """``[A]_g^T [A]_g`` from a design or summed over a list of shards."""
    sl = partition.group_slice(g)
    if isinstance(source, GroupedDesign):
        blocks = [source.matrix]
    else:
        blocks = [s.matrix for s in sorted(source, key=lambda s: s.site_index)]
    return ordered_sum([B[:, sl].T @ B[:, sl] for B in blocks])


def spectral_norm_sq(gram, tol=1e-10, max_iter=10_000) -> float:
    """Largest eigenvalue of a symmetric PSD matrix by power iteration.

    Starts from the normalised all-ones vector and stops once the eigen
    residual ``||M v - rho v||`` drops below ``tol * rho``.
    """
    M = np.asarray(gram, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError("gram must be square")
    rho, it, ok = kern.power_iteration(M, tol, max_iter)
    if not ok:
        raise PowerIterationError(rho, it)
    return rho


def robust_spectral_norm_sq(gram, tol=1e-10, max_iter=10_000) -> float:
    """spectral_norm_sq, falling back to a dense eigensolver if power iteration stalls."""
    try:
        return spectral_norm_sq(gram, tol, max_iter)
    except PowerIterationError as exc:
        log.debug("%s; falling back to eigvalsh", exc)
        return float(np.linalg.eigvalsh(np.asarray(gram))[-1])


def lipschitz_constants(source, partition: GroupPartition, tol=1e-10) -> np.ndarray:
    """``L_g = ||[A]_g||_2^2`` for every group (a tiny floor keeps zero columns usable)."""
    out = np.empty(partition.group_count)
    for g in range(partition.group_count):
        out[g] = robust_spectral_norm_sq(group_gram(source, partition, g), tol)
    return np.maximum(out, np.finfo(float).tiny)


def frobenius_group_norms(design: GroupedDesign, partition: GroupPartition) -> np.ndarray:
    """Cheap upper bound on ``||[A]_g||_2``."""
    return partition.norms(np.einsum("ij,ij->j", design.matrix, design.matrix) ** 0.5)


def center_and_scale(design: GroupedDesign) -> GroupedDesign:
    """Optional preprocessing: centre columns and response, scale columns to unit norm."""
    A = design.matrix - design.matrix.mean(axis=0)
    nrm = np.linalg.norm(A, axis=0)
    nrm[nrm == 0] = 1.0
    return GroupedDesign(A / nrm, design.response - design.response.mean())


# ---------------------------------------------------------------------------
# on-disk formats
# ---------------------------------------------------------------------------

def write_glfs(path, design: GroupedDesign) -> None:
    with open(path, "wb") as fh:
        fh.write(_GLFS_HEADER.pack(GLFS_MAGIC, GLFS_VERSION, design.rows, design.cols))
        fh.write(design.response.astype("<f8").tobytes())
        fh.write(design.matrix.astype("<f8").tobytes(order="C"))


def read_glfs(path) -> GroupedDesign:
    raw = Path(path).read_bytes()
    if len(raw) < _GLFS_HEADER.size:
        raise ValueError(f"{path}: truncated GLFS header")
    magic, version, n, p = _GLFS_HEADER.unpack_from(raw)
    if magic != GLFS_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != GLFS_VERSION:
        raise ValueError(f"{path}: unsupported GLFS version {version}")
    expected = _GLFS_HEADER.size + 8 * (n + n * p)
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    off = _GLFS_HEADER.size
    y = np.frombuffer(raw, dtype="<f8", count=n, offset=off).astype(np.float64)
    A = np.frombuffer(raw, dtype="<f8", count=n * p, offset=off + 8 * n).astype(np.float64).reshape(n, p)
    return GroupedDesign(A, y)


def sidecar_path(data_path) -> Path:
    return Path(str(data_path) + ".groups.json")


@dataclass
class GroupMeta:
    """Contents of the partition sidecar that travels with a GLFS file."""

    group_sizes: list
    weight_rule: str = "sqrt_size"
    weights: list | None = None
    feature_ids: list | None = None
    extra: dict = field(default_factory=dict)

    def partition(self) -> GroupPartition:
        return make_partition(self.group_sizes, self.weight_rule, self.weights)


def write_sidecar(path, meta: GroupMeta) -> None:
    doc = {"group_sizes": [int(s) for s in meta.group_sizes], "weight_rule": meta.weight_rule}
    if meta.weights is not None:
        doc["weights"] = [float(w) for w in meta.weights]
    if meta.feature_ids is not None:
        doc["feature_ids"] = list(meta.feature_ids)
    doc.update(meta.extra)
    Path(path).write_text(json.dumps(doc, indent=1))


def read_sidecar(path) -> GroupMeta:
    doc = json.loads(Path(path).read_text())
    if "group_sizes" not in doc:
        raise ValueError(f"{path}: missing group_sizes")
    known = {"group_sizes", "weight_rule", "weights", "feature_ids"}
    return GroupMeta(
        group_sizes=doc["group_sizes"],
        weight_rule=doc.get("weight_rule", "sqrt_size"),
        weights=doc.get("weights"),
        feature_ids=doc.get("feature_ids"),
        extra={k: v for k, v in doc.items() if k not in known},
    )


def load_dataset(path) -> tuple[GroupedDesign, GroupPartition, GroupMeta]:
    """Read a GLFS file together with its partition sidecar."""
    design = read_glfs(path)
    meta = read_sidecar(sidecar_path(path))
    part = meta.partition()
    if part.n_features != design.cols:
        raise ValueError(f"sidecar covers {part.n_features} features, matrix has {design.cols}")
    return design, part, meta


def save_dataset(path, design: GroupedDesign, meta: GroupMeta) -> None:
    write_glfs(path, design)
    write_sidecar(sidecar_path(path), meta)
