"""Hot numeric kernels with a numba path and a pure-numpy fallback.

Set ``FEDGLASSO_DISABLE_NUMBA=1`` to force the numpy implementations (also
used automatically when numba cannot be imported).  Both paths are
deterministic, but they are *not* bitwise identical to each other: the numba
kernels accumulate with plain sequential loops, while numpy hands the work to
BLAS.  Code that needs bitwise agreement between two call sites (the
distributed solver vs the single-node solver) must go through the same
kernel functions exported here.
"""
import os

import numpy as np

_DISABLED = os.environ.get("FEDGLASSO_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

try:
    if _DISABLED:
        raise ImportError("numba disabled by FEDGLASSO_DISABLE_NUMBA")
    from numba import njit
    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

BACKEND = "numba" if HAVE_NUMBA else "numpy"


# --------------------------------------------------------------------------
# numpy implementations
# --------------------------------------------------------------------------

def _group_grad_np(A, R, start, stop):
    return A[:, start:stop].T @ R


def _residual_update_np(A, R, start, stop, delta):
    R += A[:, start:stop] @ delta


def _prox_step_np(xg, grad, lip, thresh):
    u = xg - grad / lip
    nrm = np.sqrt(np.dot(u, u))
    if nrm <= thresh:
        return np.zeros_like(u)
    return (1.0 - thresh / nrm) * u


def _bcd_epoch_np(A, R, x, order, offsets, weights, lips, lam):
    changed = 0
    for g in order:
        s, e = offsets[g], offsets[g + 1]
        grad = _group_grad_np(A, R, s, e)
        new = _prox_step_np(x[s:e], grad, lips[g], lam * weights[g] / lips[g])
        delta = new - x[s:e]
        if np.any(delta != 0.0):
            x[s:e] = new
            _residual_update_np(A, R, s, e, delta)
            changed += 1
    return changed


def _blocks_corr_np(A, R, offsets, groups):
    parts = [_group_grad_np(A, R, offsets[g], offsets[g + 1]) for g in groups]
    return np.concatenate(parts) if parts else np.zeros(0)


def _group_norms_np(v, offsets):
    sq = np.add.reduceat(v * v, offsets[:-1]) if len(v) else np.zeros(0)
    return np.sqrt(sq)


def _power_iteration_np(M, tol, max_iter):
    k = M.shape[0]
    v = np.ones(k) / np.sqrt(k)
    rho = 0.0
    for it in range(1, max_iter + 1):
        w = M @ v
        rho = float(v @ w)
        res = w - rho * v
        if rho <= 0.0:
            return 0.0, it, True
        if np.sqrt(res @ res) <= tol * rho:
            return rho, it, True
        v = w / np.sqrt(w @ w)
    return rho, max_iter, False


# --------------------------------------------------------------------------
# numba implementations
# --------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True, nogil=True)
    def _group_grad_nb(A, R, start, stop):
        out = np.empty(stop - start)
        n = A.shape[0]
        for j in range(start, stop):
            acc = 0.0
            for i in range(n):
                acc += A[i, j] * R[i]
            out[j - start] = acc
        return out

    @njit(cache=True, nogil=True)
    def _residual_update_nb(A, R, start, stop, delta):
        n = A.shape[0]
        for j in range(start, stop):
            dj = delta[j - start]
            for i in range(n):
                R[i] += A[i, j] * dj

    @njit(cache=True, nogil=True)
    def _prox_step_nb(xg, grad, lip, thresh):
        k = xg.shape[0]
        u = np.empty(k)
        sq = 0.0
        for j in range(k):
            u[j] = xg[j] - grad[j] / lip
            sq += u[j] * u[j]
        nrm = np.sqrt(sq)
        if nrm <= thresh:
            return np.zeros(k)
        scale = 1.0 - thresh / nrm
        for j in range(k):
            u[j] = scale * u[j]
        return u

    @njit(cache=True, nogil=True)
    def _bcd_epoch_nb(A, R, x, order, offsets, weights, lips, lam):
        changed = 0
        for t in range(order.shape[0]):
            g = order[t]
            s = offsets[g]
            e = offsets[g + 1]
            grad = _group_grad_nb(A, R, s, e)
            new = _prox_step_nb(x[s:e], grad, lips[g], lam * weights[g] / lips[g])
            delta = new - x[s:e]
            moved = False
            for j in range(e - s):
                if delta[j] != 0.0:
                    moved = True
                    break
            if moved:
                x[s:e] = new
                _residual_update_nb(A, R, s, e, delta)
                changed += 1
        return changed

    @njit(cache=True, nogil=True)
    def _blocks_corr_nb(A, R, offsets, groups):
        total = 0
        for t in range(groups.shape[0]):
            total += offsets[groups[t] + 1] - offsets[groups[t]]
        out = np.empty(total)
        pos = 0
        for t in range(groups.shape[0]):
            s = offsets[groups[t]]
            e = offsets[groups[t] + 1]
            out[pos:pos + e - s] = _group_grad_nb(A, R, s, e)
            pos += e - s
        return out

    @njit(cache=True, nogil=True)
    def _group_norms_nb(v, offsets):
        G = offsets.shape[0] - 1
        out = np.empty(G)
        for g in range(G):
            acc = 0.0
            for j in range(offsets[g], offsets[g + 1]):
                acc += v[j] * v[j]
            out[g] = np.sqrt(acc)
        return out

    @njit(cache=True, nogil=True)
    def _power_iteration_nb(M, tol, max_iter):
        k = M.shape[0]
        v = np.ones(k) / np.sqrt(k)
        rho = 0.0
        for it in range(1, max_iter + 1):
            w = np.zeros(k)
            for a in range(k):
                acc = 0.0
                for b in range(k):
                    acc += M[a, b] * v[b]
                w[a] = acc
            rho = 0.0
            for a in range(k):
                rho += v[a] * w[a]
            if rho <= 0.0:
                return 0.0, it, True
            res = 0.0
            ww = 0.0
            for a in range(k):
                d = w[a] - rho * v[a]
                res += d * d
                ww += w[a] * w[a]
            if np.sqrt(res) <= tol * rho:
                return rho, it, True
            nw = np.sqrt(ww)
            for a in range(k):
                v[a] = w[a] / nw
        return rho, max_iter, False

    group_grad = _group_grad_nb
    residual_update = _residual_update_nb
    prox_step = _prox_step_nb
    _bcd_epoch = _bcd_epoch_nb
    _group_norms = _group_norms_nb
    _blocks_corr = _blocks_corr_nb
    _power_iteration = _power_iteration_nb
else:
    group_grad = _group_grad_np
    residual_update = _residual_update_np
    prox_step = _prox_step_np
    _bcd_epoch = _bcd_epoch_np
    _group_norms = _group_norms_np
    _blocks_corr = _blocks_corr_np
    _power_iteration = _power_iteration_np


def bcd_epoch(A, R, x, order, offsets, weights, lips, lam):
    """Run one pass of proximal group updates over ``order`` in place.

    ``R`` holds ``A @ x - y`` and is kept in sync.  Returns how many updates
    actually moved the iterate.
    """
    return int(_bcd_epoch(A, R, x, np.ascontiguousarray(order, dtype=np.int64),
                          offsets, weights, lips, float(lam)))


def group_norms(v, offsets):
    """Euclidean norm of every contiguous block of ``v``."""
    return _group_norms(np.ascontiguousarray(v, dtype=np.float64), offsets)


def power_iteration(M, tol, max_iter):
    """Largest eigenvalue of a symmetric PSD matrix; returns (value, iterations, converged)."""
    rho, it, ok = _power_iteration(np.ascontiguousarray(M, dtype=np.float64), float(tol), int(max_iter))
    return float(rho), int(it), bool(ok)


def residual_stats(R, y):
    """``(R.R, R.y)`` partials used to assemble objective and duality gap."""
    return float(R @ R), float(R @ y)


def blocks_corr(A, R, offsets, groups):
    """``A_g^T R`` for each listed group, concatenated in the given order.

    Every block goes through :func:`group_grad`, so a block's value does not
    depend on which other groups are requested.
    """
    return _blocks_corr(A, R, offsets, np.ascontiguousarray(groups, dtype=np.int64))


def residual_corr(A, R, offsets):
    """Full ``A^T R`` assembled block by block."""
    return blocks_corr(A, R, offsets, np.arange(offsets.shape[0] - 1))


def block_offsets(offsets, groups):
    """Offsets of the listed groups packed back to back."""
    groups = np.asarray(groups, dtype=np.int64)
    sub_off = np.zeros(groups.size + 1, dtype=np.int64)
    np.cumsum(offsets[groups + 1] - offsets[groups], out=sub_off[1:])
    return sub_off


def gather_blocks(v, offsets, groups):
    """Concatenate the listed blocks of ``v``; returns (values, block offsets)."""
    groups = np.asarray(groups, dtype=np.int64)
    sub_off = block_offsets(offsets, groups)
    if groups.size == 0:
        return np.zeros(0), sub_off
    return np.concatenate([v[offsets[g]:offsets[g + 1]] for g in groups]), sub_off
