"""Feature ranking from regularisation paths, stability selection and the
planted-model synthetic generator."""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .data import GroupedDesign, GroupPartition, fixed_width_sizes, make_partition
from .pathcore import PathModels, entry_order
from .path import run_path
from .solvers import SolveOptions

log = logging.getLogger(__name__)


class SelectionError(ValueError):
    pass


@dataclass
class SelectionFrequency:
    counts: np.ndarray
    magnitude: np.ndarray
    ranking: np.ndarray
    columns: np.ndarray

    def top(self, k) -> list:
        return [int(g) for g in self.ranking[:k]]


def frequency_select(pm: PathModels, top_k: int) -> SelectionFrequency:
    """Count, per group, the path models in which it is nonzero and rank by that count.

    Ties go to the larger summed squared block norm over the path, then to
    the lower index.  ``columns`` collects the member columns of the ranked
    groups with nonzero count, truncated at ``top_k`` columns.
    """
    part = pm.partition
    if top_k < 0 or top_k > part.n_features:
        raise SelectionError(f"top_k must lie in [0, {part.n_features}]")
    norms = np.array([part.norms(x) for x in pm.models])
    counts = (norms > 0).sum(axis=0).astype(np.int64)
    magnitude = (norms ** 2).sum(axis=0)
    if top_k > 0 and not counts.any():
        raise SelectionError("nothing selected: every model on the path is zero")
    ranking = np.lexsort((np.arange(part.group_count), -magnitude, -counts))
    cols = [np.arange(part.offsets[g], part.offsets[g + 1]) for g in ranking if counts[g] > 0]
    cols = np.concatenate(cols)[:top_k] if cols else np.zeros(0, dtype=np.int64)
    return SelectionFrequency(counts, magnitude, ranking, cols.astype(np.int64))


@dataclass
class StabilityReport:
    subsample_count: int
    selection_probability: np.ndarray
    ranking: np.ndarray
    seeds: list
    selections: list

    def top(self, k) -> list:
        return [int(g) for g in self.ranking[:k]]


def subsample_rows(n_rows, seed):
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n_rows, size=n_rows // 2, replace=False))


def _one_subsample(design, partition, rows, q_cap, count, lmin_ratio, screen, opts):
    sub = design.take_rows(rows)
    pm = run_path(sub, partition, count=count, lmin_ratio=lmin_ratio, screen=screen, opts=opts,
                  max_groups=q_cap)
    return entry_order(pm)[:q_cap]


def stability_select(design: GroupedDesign, partition: GroupPartition, subsamples=100, q_cap=50, count=100,
                     lmin_ratio=0.05, seed=0, screen="ddpp", opts: SolveOptions | None = None,
                     n_jobs=1, seeds=None) -> StabilityReport:
    """Subsample half the rows ``subsamples`` times and record the first ``q_cap`` groups to enter.

    Subsample ``b`` uses seed ``seed + b`` unless ``seeds`` is given; a
    subsample whose response has zero variance is redrawn with the next
    unused seed.  ``n_jobs > 1`` runs subsamples on a thread pool.
    """
    if subsamples < 2:
        raise ValueError("need at least 2 subsamples")
    if q_cap < 1:
        raise ValueError("q_cap must be >= 1")
    y = design.response
    wanted = list(seeds) if seeds is not None else None
    used, draws = [], []
    cursor = seed
    for b in range(subsamples):
        s = wanted[b] if wanted is not None else cursor
        rows = subsample_rows(design.rows, s)
        while np.var(y[rows]) == 0.0:
            log.warning("subsample with seed %d has a constant response; redrawing", s)
            cursor = max(cursor, s) + 1
            s = cursor
            rows = subsample_rows(design.rows, s)
        used.append(int(s))
        draws.append(rows)
        cursor = max(cursor, s) + 1
    job = lambda rows: _one_subsample(design, partition, rows, q_cap, count, lmin_ratio, screen, opts)
    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            selections = list(pool.map(job, draws))
    else:
        selections = [job(r) for r in draws]
    hits = np.zeros(partition.group_count, dtype=np.int64)
    for sel in selections:
        hits[sel] += 1
    prob = hits / subsamples
    ranking = np.lexsort((np.arange(partition.group_count), -prob))
    return StabilityReport(subsamples, prob, ranking, used, selections)


def _member_ids(partition, g, feature_ids):
    sl = partition.group_slice(g)
    if feature_ids is None:
        return [f"f{j}" for j in range(sl.start, sl.stop)]
    return list(feature_ids[sl])


def write_ranking_csv(path, partition: GroupPartition, ranking, scores, score_name, feature_ids=None, limit=None):
    """CSV with columns rank, group, <score_name>, members (semicolon-separated feature ids)."""
    ranking = list(ranking)[:limit] if limit else list(ranking)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "group", score_name, "members"])
        for r, g in enumerate(ranking, 1):
            val = scores[g]
            val = int(val) if np.issubdtype(type(val), np.integer) else float(val)
            w.writerow([r, int(g), val, ";".join(_member_ids(partition, g, feature_ids))])


@dataclass
class SyntheticData:
    design: GroupedDesign
    partition: GroupPartition
    coef: np.ndarray
    planted: list


def generate_synthetic(n, p, group_size, active_groups, snr=10.0, seed=0, weight_rule="sqrt_size") -> SyntheticData:
    """Gaussian design with ``active_groups`` planted groups of Gaussian coefficients.

    Noise is rescaled so that the sample variance ratio var(Ax)/var(eps)
    equals ``snr`` exactly; ``snr=inf`` gives a noiseless response.
    """
    if active_groups * group_size > p:
        raise ValueError("active_groups * group_size exceeds the feature count")
    rng = np.random.default_rng(seed)
    partition = make_partition(fixed_width_sizes(p, group_size), weight_rule)
    A = rng.standard_normal((n, p))
    full = [g for g in range(partition.group_count) if partition.sizes[g] == group_size]
    planted = sorted(int(g) for g in rng.choice(full, size=active_groups, replace=False))
    coef = np.zeros(p)
    for g in planted:
        sl = partition.group_slice(g)
        coef[sl] = rng.standard_normal(sl.stop - sl.start)
    signal = A @ coef
    eps = rng.standard_normal(n)
    if np.isinf(snr):
        y = signal
    else:
        if snr <= 0:
            raise ValueError("snr must be positive")
        eps *= np.sqrt(signal.var() / (snr * eps.var()))
        y = signal + eps
    return SyntheticData(GroupedDesign(A, y), partition, coef, planted)
