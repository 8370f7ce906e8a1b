import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedglasso.data import GroupedDesign, group_correlations, lambda_max, make_partition
from fedglasso.solvers import (SolveOptions, admm_solve, bcd_solve, duality_gap, fista_solve, group_prox,
                               objective, prox_all)

from conftest import random_instance, rel

# Frozen from FISTA (gap 1e-13) and cross-checked against a tightly converged ADMM run.
SMALL_LAMBDA_MAX = 43.167653168956676
SMALL_OBJ_AT_03 = 90.68530751229297


def lam_max_of(d, p):
    return lambda_max(group_correlations(d, p), p)[0]


# --- objective --------------------------------------------------------------

def test_objective_at_zero(small_instance):
    d, p = small_instance
    assert objective(d, p, np.zeros(d.cols), 1.7) == 0.5 * float(d.response @ d.response)


def test_objective_least_squares_zero():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((5, 5))
    x = rng.standard_normal(5)
    d = GroupedDesign(A, A @ x)
    assert objective(d, make_partition([2, 3]), np.linalg.solve(A, d.response), 0.0) < 1e-20


def test_objective_naive(small_instance):
    d, p = small_instance
    x = np.random.default_rng(1).standard_normal(d.cols)
    naive = 0.0
    for i in range(d.rows):
        ri = d.response[i] - sum(d.matrix[i, j] * x[j] for j in range(d.cols))
        naive += 0.5 * ri * ri
    for g in range(p.group_count):
        naive += 0.7 * p.weights[g] * np.sqrt(sum(v * v for v in x[p.group_slice(g)]))
    assert rel(objective(d, p, x, 0.7), naive) < 1e-12


def test_objective_errors(small_instance):
    d, p = small_instance
    with pytest.raises(ValueError):
        objective(d, p, np.zeros(3), 1.0)
    with pytest.raises(ValueError):
        objective(d, p, np.zeros(d.cols), -1.0)


# --- prox ----------------------------------------------------------------------

def test_group_prox_examples():
    assert np.allclose(group_prox([3.0, 4.0], 2.0), [1.8, 2.4], rtol=0, atol=1e-15)
    out = group_prox([3.0, 4.0], 5.0)
    assert out.tolist() == [0.0, 0.0]
    assert group_prox([3.0, 4.0], 0.0).tolist() == [3.0, 4.0]
    with pytest.raises(ValueError):
        group_prox([1.0], -1.0)


@given(st.lists(st.floats(-100, 100), min_size=3, max_size=3), st.lists(st.floats(-100, 100), min_size=3, max_size=3),
       st.floats(0, 50))
def test_group_prox_non_expansive(u, v, t):
    u, v = np.array(u), np.array(v)
    assert np.linalg.norm(group_prox(u, t) - group_prox(v, t)) <= np.linalg.norm(u - v) * (1 + 1e-12) + 1e-12


def test_prox_all_matches_blockwise():
    p = make_partition([2, 3, 1])
    u = np.array([3.0, 4.0, 1.0, 0.0, 0.0, -2.0])
    th = np.array([2.0, 5.0, 1.0])
    expect = np.concatenate([group_prox(u[0:2], 2.0), group_prox(u[2:5], 5.0), group_prox(u[5:], 1.0)])
    assert np.allclose(prox_all(u, p, th), expect)


# --- BCD ------------------------------------------------------------------------

def test_bcd_at_lambda_max_is_zero(small_instance):
    d, p = small_instance
    sol = bcd_solve(d, p, lam_max_of(d, p))
    assert not sol.x.any() and sol.converged and sol.epochs_used == 1


def test_bcd_orthogonal_design_one_pass():
    rng = np.random.default_rng(3)
    Q, _ = np.linalg.qr(rng.standard_normal((12, 6)))
    y = rng.standard_normal(12)
    d, p = GroupedDesign(Q, y), make_partition([2, 2, 2], "unit")
    lam = 0.4 * lam_max_of(d, p)
    closed = prox_all(Q.T @ y, p, lam * p.weights)
    sol = bcd_solve(d, p, lam, SolveOptions(selection="cyclic", max_epochs=1))
    assert np.allclose(sol.x, closed, atol=1e-13)
    assert duality_gap(d, p, closed, lam) <= 1e-12


def test_bcd_matches_frozen_oracle(small_instance):
    d, p = small_instance
    lm = lam_max_of(d, p)
    assert rel(lm, SMALL_LAMBDA_MAX) < 1e-14
    sol = bcd_solve(d, p, 0.3 * lm, SolveOptions(tol=1e-12))
    assert sol.converged
    assert rel(sol.objective, SMALL_OBJ_AT_03) < 1e-8
    assert rel(fista_solve(d, p, 0.3 * lm, 1e-10).objective, SMALL_OBJ_AT_03) < 1e-10


def test_bcd_gap_tolerance_mode(small_instance):
    d, p = small_instance
    sol = bcd_solve(d, p, 0.2 * lam_max_of(d, p), SolveOptions(gap_tol=1e-10))
    assert sol.converged and sol.gap <= 1e-10 * (1 + abs(sol.objective))


def test_bcd_monotone_epochs(small_instance):
    d, p = small_instance
    sol = bcd_solve(d, p, 0.1 * lam_max_of(d, p), SolveOptions(tol=1e-13))
    h = np.array(sol.history)
    assert np.all(np.diff(h) <= 1e-12 * np.abs(h[:-1]))


def test_bcd_nonconvergence_reported(small_instance):
    d, p = small_instance
    sol = bcd_solve(d, p, 0.05 * lam_max_of(d, p), SolveOptions(max_epochs=1, tol=1e-15))
    assert not sol.converged and sol.epochs_used == 1


def test_bcd_seed_determinism(small_instance):
    d, p = small_instance
    a = bcd_solve(d, p, 0.3 * lam_max_of(d, p), SolveOptions(seed=5))
    b = bcd_solve(d, p, 0.3 * lam_max_of(d, p), SolveOptions(seed=5))
    assert a.x.tobytes() == b.x.tobytes()


def test_solve_options_validation():
    with pytest.raises(ValueError):
        SolveOptions(tol=0)
    with pytest.raises(ValueError):
        SolveOptions(max_epochs=0)
    with pytest.raises(ValueError):
        SolveOptions(selection="greedy")


def test_bcd_reduced_problem_keeps_others_fixed(small_instance):
    d, p = small_instance
    sol = bcd_solve(d, p, 0.3 * lam_max_of(d, p), kept=[0, 1])
    assert set(p.support(sol.x)) <= {0, 1}


# --- FISTA / ADMM ---------------------------------------------------------------

def test_fista_at_lambda_max(small_instance):
    d, p = small_instance
    sol = fista_solve(d, p, lam_max_of(d, p))
    assert not sol.x.any() and sol.gap <= 1e-12


def test_fista_single_group_fixed_point(small_instance):
    d, _ = small_instance
    p = make_partition([d.cols])
    lam = 0.5 * lam_max_of(d, p)
    sol = fista_solve(d, p, lam, 1e-12)
    A, y = d.matrix, d.response
    L = np.linalg.norm(A, 2) ** 2
    step = group_prox(sol.x - A.T @ (A @ sol.x - y) / L, lam * p.weights[0] / L)
    assert np.allclose(step, sol.x, atol=1e-8)


def test_admm_at_lambda_max(small_instance):
    d, p = small_instance
    sol = admm_solve(d, p, lam_max_of(d, p))
    assert np.linalg.norm(sol.x) < 1e-6


@pytest.mark.parametrize("rho", [0.1, 1.0, 10.0])
def test_admm_rho_invariance(small_instance, rho):
    d, p = small_instance
    sol = admm_solve(d, p, 0.3 * lam_max_of(d, p), rho=rho, tol_abs=1e-10, tol_rel=1e-10)
    assert sol.converged and rel(sol.objective, SMALL_OBJ_AT_03) < 1e-6


def test_admm_rejects_bad_rho(small_instance):
    with pytest.raises(ValueError):
        admm_solve(*small_instance, 1.0, rho=0)


@given(st.integers(0, 100_000), st.sampled_from([0.1, 0.3, 0.6, 0.9]))
@settings(max_examples=15, deadline=None)
def test_three_solvers_agree(seed, ratio):
    d, p = random_instance(seed)
    lam = ratio * lam_max_of(d, p)
    ref = fista_solve(d, p, lam, 1e-11).objective
    b = bcd_solve(d, p, lam, SolveOptions(gap_tol=1e-10)).objective
    a = admm_solve(d, p, lam, tol_abs=1e-10, tol_rel=1e-10).objective
    assert rel(b, ref) < 1e-6 and rel(a, ref) < 1e-6
    assert ref <= b + 1e-8


# --- duality gap and KKT -------------------------------------------------------

def test_gap_zero_at_lambda_max(small_instance):
    d, p = small_instance
    assert abs(duality_gap(d, p, np.zeros(d.cols), lam_max_of(d, p))) < 1e-12


def test_gap_dual_formula(small_instance):
    d, p = small_instance
    lam = 0.4 * lam_max_of(d, p)
    x = np.random.default_rng(2).standard_normal(d.cols) * 0.1
    r = d.response - d.matrix @ x
    ratio = max(np.linalg.norm(d.matrix[:, p.group_slice(g)].T @ r) / p.weights[g] for g in range(p.group_count))
    theta = min(1.0, lam / ratio) * r / lam
    dual = 0.5 * d.response @ d.response - lam ** 2 / 2 * np.sum((theta - d.response / lam) ** 2)
    assert rel(duality_gap(d, p, x, lam), objective(d, p, x, lam) - dual) < 1e-10


@given(st.integers(0, 2**31), st.floats(0.01, 1.5))
@settings(max_examples=200)
def test_gap_non_negative(seed, ratio):
    d, p = random_instance(seed % 50)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(d.cols) * rng.choice([0.0, 0.01, 1.0])
    lam = ratio * lam_max_of(d, p)
    assert duality_gap(d, p, x, lam) >= -1e-10


@pytest.mark.parametrize("seed", range(5))
def test_kkt_at_converged_solution(seed):
    d, p = random_instance(seed)
    lam = 0.3 * lam_max_of(d, p)
    sol = fista_solve(d, p, lam, 1e-13)
    r = d.response - d.matrix @ sol.x
    for g in range(p.group_count):
        sl = p.group_slice(g)
        corr = d.matrix[:, sl].T @ r
        xg = sol.x[sl]
        if np.linalg.norm(xg) > 0:
            assert np.linalg.norm(corr - lam * p.weights[g] * xg / np.linalg.norm(xg)) <= 1e-6 * lam
        else:
            assert np.linalg.norm(corr) <= lam * p.weights[g] * (1 + 1e-6)


def test_solution_objective_consistent(small_instance):
    d, p = small_instance
    lam = 0.3 * lam_max_of(d, p)
    for sol in (bcd_solve(d, p, lam), fista_solve(d, p, lam), admm_solve(d, p, lam)):
        assert rel(sol.objective, objective(d, p, sol.x, lam)) < 1e-12
        assert sol.gap >= -1e-10
