"""Regularisation-path container and the screening/solve loop shared by the
single-node and federated engines."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import GroupPartition
from .screening import ScreenMask, kkt_violations, strong_rule_mask
from .solvers import gap_from_stats

SCREEN_MODES = ("none", "strong", "ddpp")
PATH_FORMAT = "fedglasso-path/1"


class PathError(RuntimeError):
    pass


def lambda_grid(lam_max, count, lmin_ratio):
    """``count`` values equally spaced on the linear scale of lam/lam_max, from 1 down to ``lmin_ratio``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if not (0 < lmin_ratio < 1):
        raise ValueError("lmin_ratio must lie in (0, 1)")
    if count == 1:
        return np.array([lam_max])
    k = np.arange(count)
    return lam_max * (1.0 - k * (1.0 - lmin_ratio) / (count - 1))


@dataclass
class PathModels:
    lambdas: np.ndarray
    models: list
    masks: list
    gaps: list
    objectives: list
    converged: list
    group_sizes: list
    weights: list
    provenance: dict = field(default_factory=dict)
    feature_ids: list | None = None
    timings: list = field(default_factory=list)

    @property
    def partial(self) -> bool:
        return not all(self.converged) or "aborted_at" in self.provenance

    @property
    def partition(self) -> GroupPartition:
        return GroupPartition(np.concatenate([[0], np.cumsum(self.group_sizes)]), self.weights)

    def model_matrix(self) -> np.ndarray:
        return np.vstack(self.models)

    def to_json(self) -> dict:
        part = self.partition
        steps = []
        for k, lam in enumerate(self.lambdas):
            x = self.models[k]
            blocks = {str(g): x[part.group_slice(g)].tolist() for g in part.support(x)}
            m = self.masks[k]
            steps.append({
                "lambda": float(lam),
                "objective": float(self.objectives[k]),
                "gap": float(self.gaps[k]),
                "converged": bool(self.converged[k]),
                "seconds": float(self.timings[k]) if k < len(self.timings) else None,
                "mask": {"rule": m.rule, "safe": m.safe, "kept": list(m.kept), "note": m.note},
                "blocks": blocks,
            })
        return {
            "format": PATH_FORMAT,
            "group_sizes": [int(s) for s in self.group_sizes],
            "weights": [float(w) for w in self.weights],
            "feature_ids": self.feature_ids,
            "partial": self.partial,
            "provenance": self.provenance,
            "steps": steps,
        }

    @classmethod
    def from_json(cls, doc) -> PathModels:
        if doc.get("format") != PATH_FORMAT:
            raise ValueError(f"not a path-models document (format={doc.get('format')!r})")
        sizes = doc["group_sizes"]
        part = GroupPartition(np.concatenate([[0], np.cumsum(sizes)]), doc["weights"])
        G, P = part.group_count, part.n_features
        lambdas, models, masks, gaps, objs, conv, timings = [], [], [], [], [], [], []
        for st in doc["steps"]:
            x = np.zeros(P)
            for g, vals in st["blocks"].items():
                x[part.group_slice(int(g))] = vals
            kept = set(st["mask"]["kept"])
            masks.append(ScreenMask(st["lambda"], tuple(kept), tuple(g for g in range(G) if g not in kept),
                                    st["mask"]["rule"], st["mask"]["safe"], st["mask"].get("note", "")))
            lambdas.append(st["lambda"])
            models.append(x)
            gaps.append(st["gap"])
            objs.append(st["objective"])
            conv.append(st["converged"])
            timings.append(st.get("seconds") or 0.0)
        return cls(np.array(lambdas), models, masks, gaps, objs, conv, list(sizes), list(doc["weights"]),
                   doc.get("provenance", {}), doc.get("feature_ids"), timings)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), default=_json_scalar))

    @classmethod
    def load(cls, path) -> PathModels:
        return cls.from_json(json.loads(Path(path).read_text()))


def _json_scalar(v):
    if isinstance(v, np.generic):
        return v.item()
    raise TypeError(f"cannot serialise {type(v).__name__}")


def _zero_outside(x, partition, kept):
    out = np.zeros_like(x)
    for g in kept:
        sl = partition.group_slice(g)
        out[sl] = x[sl]
    return out


def solve_path(engine, partition: GroupPartition, lambdas, screen="ddpp", gap_tol=1e-8, max_groups=None,
               progress=None, provenance=None) -> PathModels:
    """Walk ``lambdas`` (starting at lambda_max) with screening, warm starts and KKT repair.

    ``engine`` supplies ``correlations``, ``lam_max``, ``g_star``,
    ``edpp(x_prev, lam_prev, lam_next, gap_prev)``, ``solve(lam, kept, x0)``
    and ``full_stats(x)``.  ``max_groups`` stops the path once that many
    distinct groups have entered the model.
    """
    if screen not in SCREEN_MODES:
        raise ValueError(f"unknown screen mode {screen!r}")
    lambdas = np.asarray(lambdas, dtype=np.float64)
    if np.any(np.diff(lambdas) >= 0):
        raise ValueError("lambdas must be strictly decreasing")
    G, w = partition.group_count, partition.weights
    lam_max = engine.lam_max
    corr = engine.correlations

    x = np.zeros(partition.n_features)
    norms, rr, ry = engine.full_stats(x)
    gap0 = gap_from_stats(rr, ry, norms, w, lambdas[0], 0.0)
    if screen == "none":
        mask0 = ScreenMask.keep_all(lambdas[0], G)
    elif lambdas[0] >= lam_max:
        mask0 = ScreenMask(lambdas[0], (), tuple(range(G)), "strong" if screen == "strong" else "edpp")
    else:
        raise PathError("the path must start at lambda_max")
    pm = PathModels(lambdas[:1].copy(), [x.copy()], [mask0], [gap0], [0.5 * rr], [True],
                    list(partition.sizes), list(w), dict(provenance or {}), timings=[0.0])
    entered = []
    gap_prev = gap0
    for k in range(1, len(lambdas)):
        t0 = time.perf_counter()
        lam, lam_prev = lambdas[k], lambdas[k - 1]
        if screen == "none":
            mask = ScreenMask.keep_all(lam, G)
        elif screen == "strong":
            mask = strong_rule_mask(corr, partition, lam, lam_max)
        else:
            mask = engine.edpp(x, lam_prev, lam, gap_prev)
        try:
            sol = engine.solve(lam, mask.kept, _zero_outside(x, partition, mask.kept))
            repairs = 0
            while True:
                norms, rr, ry = engine.full_stats(sol.x)
                viol = kkt_violations(None, partition, sol.x, lam, mask, corr_norms=norms)
                pen = partition.penalty(sol.x)
                obj = 0.5 * rr + lam * pen
                gap = gap_from_stats(rr, ry, norms, w, lam, pen)
                if not viol and mask.discarded and gap > gap_tol * (1 + abs(obj)):
                    disc = np.asarray(mask.discarded)
                    viol = set(int(g) for g in disc[norms[disc] > lam * w[disc]])
                if not viol or repairs > G:
                    break
                repairs += 1
                mask = mask.readmit(viol)
                sol = engine.solve(lam, mask.kept, sol.x)
        except Exception as exc:
            # hand the completed prefix to whoever reports the failure
            pm.provenance["aborted_at"] = k
            exc.path = pm
            raise
        x = sol.x
        conv = bool(sol.converged and gap <= gap_tol * (1 + abs(obj)))
        pm.lambdas = np.append(pm.lambdas, lam)
        pm.models.append(x.copy())
        pm.masks.append(mask)
        pm.gaps.append(gap)
        pm.objectives.append(obj)
        pm.converged.append(conv)
        pm.timings.append(time.perf_counter() - t0)
        gap_prev = gap
        if progress is not None:
            progress({"event": "lambda", "k": k, "lambda": float(lam), "kept": len(mask.kept),
                      "discarded": len(mask.discarded), "repairs": repairs, "objective": obj, "gap": gap,
                      "epochs": sol.epochs_used, "converged": conv})
        if max_groups is not None:
            for g in partition.support(x):
                if g not in entered:
                    entered.append(int(g))
            if len(entered) >= max_groups:
                pm.provenance["stopped_early"] = k
                break
    return pm


def entry_order(pm: PathModels) -> list:
    """Groups in the order they first become nonzero along the path.

    Groups entering at the same lambda are ordered by decreasing block norm,
    then by index.
    """
    part = pm.partition
    seen, order = set(), []
    for x in pm.models:
        norms = part.norms(x)
        new = [g for g in np.flatnonzero(norms > 0) if g not in seen]
        new.sort(key=lambda g: (-norms[g], g))
        order.extend(int(g) for g in new)
        seen.update(new)
    return order


def rejection_rates(pm: PathModels) -> list:
    return [m.rejection_rate for m in pm.masks]

