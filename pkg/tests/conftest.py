import numpy as np
import pytest

from fedglasso.data import GroupedDesign, make_partition


def random_instance(seed, n=None, p=None, g=None, weight_rule="sqrt_size"):
    """Random Gaussian design with a random contiguous grouping."""
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(20, 61))
    g = g or int(rng.integers(3, 13))
    p = p or int(rng.integers(max(12, g), 49))
    cuts = np.sort(rng.choice(np.arange(1, p), size=g - 1, replace=False))
    sizes = np.diff(np.concatenate([[0], cuts, [p]])).tolist()
    A = rng.standard_normal((n, p))
    x = np.zeros(p)
    x[: max(1, p // 4)] = rng.standard_normal(max(1, p // 4))
    y = A @ x + 0.5 * rng.standard_normal(n)
    return GroupedDesign(A, y), make_partition(sizes, weight_rule)


def rel(a, b):
    return abs(a - b) / (1.0 + abs(b))


@pytest.fixture
def identity_example():
    """4x4 identity design, groups {0,1},{2,3}, y = (3,4,0,0)."""
    return GroupedDesign(np.eye(4), np.array([3.0, 4.0, 0.0, 0.0])), make_partition([2, 2], "unit")


@pytest.fixture
def small_instance():
    rng = np.random.default_rng(7)
    A = rng.standard_normal((40, 24))
    x = np.zeros(24)
    x[:8] = rng.standard_normal(8)
    y = A @ x + 0.3 * rng.standard_normal(40)
    return GroupedDesign(A, y), make_partition([4] * 6)


def suppressor_instance(seed, n=20, p=8):
    """Column 2 is uncorrelated with y yet enters the model once column 0 does.

    The basic strong rule discards it whenever lambda > lambda_max / 2, which
    makes these instances a reliable source of strong-rule failures.
    """
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, p))
    a0, e = A[:, 0], rng.standard_normal(n)
    A[:, 2] = 3.0 * a0 + e
    beta = -(3.0 * a0 @ a0 + a0 @ e) / (3.0 * a0 @ e + e @ e)
    y = a0 + beta * e + 0.05 * rng.standard_normal(n)
    a = A[:, 2]
    y = y - (y @ a) / (a @ a) * a
    return GroupedDesign(A, y), make_partition([1] * p, "unit")
