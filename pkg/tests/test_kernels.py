import os
import subprocess
import sys

import numpy as np
import pytest

from fedglasso import _kernels as kern

needs_numba = pytest.mark.skipif(not kern.HAVE_NUMBA, reason="numba not available")


def problem(seed, n=30, sizes=(3, 5, 1, 4)):
    rng = np.random.default_rng(seed)
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    A = np.asfortranarray(rng.standard_normal((n, offsets[-1])))
    R = rng.standard_normal(n)
    return A, R, offsets


@needs_numba
@pytest.mark.parametrize("seed", range(5))
def test_group_grad_and_blocks_agree(seed):
    A, R, off = problem(seed)
    for g in range(len(off) - 1):
        a = kern._group_grad_np(A, R, off[g], off[g + 1])
        b = kern._group_grad_nb(A, R, off[g], off[g + 1])
        assert np.allclose(a, b, rtol=1e-13, atol=1e-13)
    groups = np.array([2, 0, 3], dtype=np.int64)
    assert np.allclose(kern._blocks_corr_np(A, R, off, groups), kern._blocks_corr_nb(A, R, off, groups), atol=1e-13)
    v = np.random.default_rng(seed).standard_normal(off[-1])
    assert np.allclose(kern._group_norms_np(v, off), kern._group_norms_nb(v, off), rtol=1e-14)


@needs_numba
def test_residual_update_agrees():
    A, R, off = problem(1)
    delta = np.array([0.5, -1.0, 2.0])
    r1, r2 = R.copy(), R.copy()
    kern._residual_update_np(A, r1, 0, 3, delta)
    kern._residual_update_nb(A, r2, 0, 3, delta)
    assert np.allclose(r1, r2, atol=1e-14)
    assert np.allclose(r1, R + A[:, :3] @ delta, atol=1e-14)


@needs_numba
@pytest.mark.parametrize("thresh", [0.0, 0.3, 100.0])
def test_prox_step_agrees(thresh):
    rng = np.random.default_rng(2)
    xg, grad = rng.standard_normal(4), rng.standard_normal(4)
    a = kern._prox_step_np(xg, grad, 2.5, thresh)
    b = kern._prox_step_nb(xg, grad, 2.5, thresh)
    assert np.allclose(a, b, atol=1e-15)
    if thresh == 100.0:
        assert not a.any() and not b.any()


@needs_numba
def test_bcd_epoch_agrees():
    A, R0, off = problem(3)
    y = -R0
    w = np.sqrt(np.diff(off).astype(float))
    lips = np.array([np.linalg.norm(A[:, off[g]:off[g + 1]], 2) ** 2 for g in range(len(off) - 1)])
    order = np.array([0, 1, 2, 3, 1, 0], dtype=np.int64)
    results = []
    for epoch in (kern._bcd_epoch_np, kern._bcd_epoch_nb):
        x, R = np.zeros(off[-1]), R0.copy()
        epoch(A, R, x, order, off, w, lips, 0.5)
        results.append((x, R))
        assert np.allclose(R, A @ x - y, atol=1e-12)
    assert np.allclose(results[0][0], results[1][0], atol=1e-12)


@needs_numba
def test_power_iteration_agrees():
    rng = np.random.default_rng(4)
    B = rng.standard_normal((12, 7))
    M = B.T @ B
    a = kern._power_iteration_np(M, 1e-12, 10_000)
    b = kern._power_iteration_nb(M, 1e-12, 10_000)
    assert a[0] == pytest.approx(b[0], rel=1e-10)
    assert a[0] == pytest.approx(np.linalg.eigvalsh(M)[-1], rel=1e-10)


def test_block_helpers():
    off = np.array([0, 2, 5, 6], dtype=np.int64)
    assert kern.block_offsets(off, [2, 0]).tolist() == [0, 1, 3]
    v = np.arange(6.0)
    vals, sub = kern.gather_blocks(v, off, [2, 0])
    assert vals.tolist() == [5.0, 0.0, 1.0] and sub.tolist() == [0, 1, 3]
    vals, sub = kern.gather_blocks(v, off, [])
    assert vals.size == 0 and sub.tolist() == [0]


def test_residual_corr_matches_dense():
    A, R, off = problem(5)
    assert np.allclose(kern.residual_corr(A, R, off), A.T @ R, atol=1e-13)


def test_numpy_fallback_flag():
    code = ("from fedglasso import _kernels as k; import numpy as np;"
            "from fedglasso.data import GroupedDesign, make_partition, shard_dataset;"
            "from fedglasso.solvers import bcd_solve, SolveOptions;"
            "from fedglasso.distributed import dbcd_solve; from fedglasso.lqm import in_process_master;"
            "rng = np.random.default_rng(0); A = rng.standard_normal((20, 9)); y = rng.standard_normal(20);"
            "d = GroupedDesign(A, y); p = make_partition([3, 3, 3]);"
            "a = bcd_solve(d, p, 1.0, SolveOptions(seed=3));"
            "b = dbcd_solve(in_process_master(shard_dataset(d, [20]), p), p, 1.0, opts=SolveOptions(seed=3));"
            "print(k.BACKEND, a.x.tobytes() == b.x.tobytes())")
    env = dict(os.environ, FEDGLASSO_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["numpy", "True"]
