"""Path-level timing comparison between screened, unscreened and ADMM runs."""
from __future__ import annotations

import time

import numpy as np

from .data import lipschitz_constants, shard_dataset
from .lqm import in_process_master
from .path import run_path
from .selection import generate_synthetic

MODES = ("ddpp", "plain", "admm")
PAPER_SPLIT = (326, 215, 176)
# feature counts of the original large-scale runs; far beyond desk memory
PAPER_PRESETS = (500_000, 1_000_000, 2_000_000, 3_000_000, 4_000_000, 5_000_000, 5_900_000)


def proportional_split(n, weights=PAPER_SPLIT):
    w = np.asarray(weights, dtype=float)
    counts = np.floor(n * w / w.sum()).astype(int)
    counts[0] += n - counts.sum()
    return [int(c) for c in counts]


def bench(p_list, modes=MODES, n=300, group_size=20, count=100, lmin_ratio=0.1, seed=0, distributed=False,
          admm_tol=1e-6, admm_max_iter=2000, progress=None) -> list[dict]:
    """Time one full path per (P, mode) on the same synthetic instance and lambda grid.

    ``ddpp`` screens with the sequential safe rule, ``plain`` solves every
    lambda on all groups with the same block solver, ``admm`` uses the ADMM
    baseline without screening (loose tolerance, capped iterations).  With
    ``distributed`` the block solver runs through an in-process three-site
    session split in the proportions of :data:`PAPER_SPLIT`.
    """
    rows = []
    for p in p_list:
        data = generate_synthetic(n, p, group_size, min(5, p // group_size), 10.0, seed)
        part = data.partition.with_lipschitz(lipschitz_constants(data.design, data.partition))
        for mode in modes:
            if mode not in MODES:
                raise ValueError(f"unknown bench mode {mode!r}")
            t0 = time.perf_counter()
            if mode == "admm":
                pm = run_path(data.design, part, count, lmin_ratio, screen="none", solver="admm",
                              admm_tol=admm_tol, admm_max_iter=admm_max_iter)
            else:
                screen = "ddpp" if mode == "ddpp" else "none"
                if distributed:
                    master = in_process_master(shard_dataset(data.design, proportional_split(n)), part)
                    pm = run_path(master, part, count, lmin_ratio, screen=screen, solver="dbcd")
                else:
                    pm = run_path(data.design, part, count, lmin_ratio, screen=screen, solver="bcd")
            seconds = time.perf_counter() - t0
            rates = [m.rejection_rate for m in pm.masks]
            row = {"p": p, "mode": mode, "seconds": seconds, "converged": not pm.partial,
                   "mean_rejection": float(np.mean(rates)), "rejection": rates,
                   "final_objective": float(pm.objectives[-1])}
            rows.append(row)
            if progress is not None:
                progress({"event": "bench", **{k: v for k, v in row.items() if k != "rejection"}})
    return rows


def format_table(rows) -> str:
    lines = [f"{'P':>8}  {'mode':<6} {'seconds':>9}  {'reject':>7}  converged"]
    for r in rows:
        lines.append(f"{r['p']:>8}  {r['mode']:<6} {r['seconds']:>9.3f}  {r['mean_rejection']:>7.3f}  "
                     f"{r['converged']}")
    return "\n".join(lines)
