"""Compare the numba kernels with the pure-numpy fallback.

Each backend runs in its own interpreter because the choice is made at
import time from FEDGLASSO_DISABLE_NUMBA.

    python benchmarks/bench_kernels.py --n 300 --p 10000
"""
import argparse
import json
import os
import subprocess
import sys

CHILD = r"""
import json, sys, time
import numpy as np
from fedglasso import _kernels as k
from fedglasso.data import GroupedDesign, make_partition, fixed_width_sizes, lipschitz_constants
from fedglasso.path import run_path

n, p, gs, reps = map(int, sys.argv[1:5])
rng = np.random.default_rng(0)
A = np.asfortranarray(rng.standard_normal((n, p)))
y = rng.standard_normal(n)
part = make_partition(fixed_width_sizes(p, gs))
off, w = part.offsets, part.weights
lips = lipschitz_constants(GroupedDesign(A, y), part)
order = rng.integers(0, part.group_count, part.group_count)

def best(fn):
    fn()
    ts = []
    for _ in range(reps):
        t = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t)
    return min(ts)

R = -y.copy()
x = np.zeros(p)
out = {
    "backend": k.BACKEND,
    "bcd_epoch": best(lambda: k.bcd_epoch(A, R, x, order, off, w, lips, 0.01)),
    "residual_corr": best(lambda: k.residual_corr(A, R, off)),
    "group_norms": best(lambda: k.group_norms(A[0], off)),
    "power_iteration": best(lambda: k.power_iteration(A[:, :gs].T @ A[:, :gs], 1e-10, 10000)),
}
d = GroupedDesign(A[:, : min(p, 2000)], y)
sub = make_partition(fixed_width_sizes(d.cols, gs))
out["path_20"] = best(lambda: run_path(d, sub, count=20, lmin_ratio=0.1))
print(json.dumps(out))
"""


def run(flag, args):
    env = dict(os.environ)
    env["FEDGLASSO_DISABLE_NUMBA"] = flag
    res = subprocess.run([sys.executable, "-c", CHILD, str(args.n), str(args.p), str(args.group_size),
                          str(args.reps)], env=env, capture_output=True, text=True, check=True)
    return json.loads(res.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=300)
    ap.add_argument("--p", type=int, default=10_000)
    ap.add_argument("--group-size", type=int, default=20)
    ap.add_argument("--reps", type=int, default=5)
    args = ap.parse_args()
    nb, np_ = run("0", args), run("1", args)
    print(f"{'kernel':<16}{nb['backend']:>12}{np_['backend']:>12}{'ratio':>8}")
    for key in nb:
        if key == "backend":
            continue
        print(f"{key:<16}{nb[key] * 1e3:>10.3f}ms{np_[key] * 1e3:>10.3f}ms{np_[key] / nb[key]:>8.2f}")


if __name__ == "__main__":
    main()
