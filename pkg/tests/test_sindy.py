import itertools

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from bsindy import dynamics as dyn, library as lib
from bsindy.sindy import least_squares, stls, stls_multi


def test_least_squares_identity_and_mean():
    assert_allclose(least_squares(np.eye(2), [3.0, 5.0]), [3, 5])
    assert_allclose(least_squares([[1.0], [1.0]], [1.0, 3.0]), [2.0])


@given(st.integers(0, 100_000))
def test_residual_is_orthogonal_to_columns(seed):
    rng = np.random.default_rng(seed)
    D = rng.normal(size=(50, 6)) * rng.uniform(0.1, 10, size=6)
    z = rng.normal(size=50) * 3
    xi = least_squares(D, z)
    scale = np.abs(D).max() * (np.abs(D) @ np.abs(xi) + np.abs(z)).max()
    assert np.abs(D.T @ (D @ xi - z)).max() <= 1e-8 * scale


def test_rank_deficient_gives_minimum_norm(rng):
    D = rng.normal(size=(20, 3))
    D = np.column_stack([D, D[:, 0] + D[:, 1]])
    z = rng.normal(size=20)
    assert_allclose(least_squares(D, z), np.linalg.pinv(D) @ z, atol=1e-10)


def test_least_squares_multiple_rhs_and_errors(rng):
    D = rng.normal(size=(10, 3))
    Z = rng.normal(size=(10, 2))
    assert least_squares(D, Z).shape == (3, 2)
    with pytest.raises(ValueError, match="rows"):
        least_squares(D, Z[:5])
    with pytest.raises(ValueError):
        least_squares(np.ones(3), np.ones(3))
    with pytest.raises(ValueError):
        least_squares([[np.nan]], [1.0])


@pytest.fixture(scope="module")
def clean_lorenz():
    sys_ = dyn.lorenz(10, 28, 2.667)
    traj = dyn.integrate(sys_, [-8, 8, 27], np.linspace(0, 100, 1001))
    z = dyn.analytic_derivative(sys_, traj).z
    return lib.build_design(traj.X, lib.lorenz_library()).D, z


def test_stls_noiseless_lorenz(clean_lorenz):
    D, Z = clean_lorenz
    res = stls_multi(D, Z, 0.1)
    assert [r.support.tolist() for r in res] == [[0, 1], [0, 1, 4], [2, 3]]
    expected = np.zeros((6, 3))
    expected[[0, 1], 0] = [-10, 10]
    expected[[0, 1, 4], 1] = [28, -1, -1]
    expected[[2, 3], 2] = [-2.667, 1]
    assert_allclose(np.column_stack([r.xi for r in res]), expected, atol=1e-6)
    assert all(r.converged for r in res)


def test_stls_lambda_zero_is_least_squares(rng):
    D = rng.normal(size=(30, 5))
    z = rng.normal(size=30)
    res = stls(D, z, 0.0)
    assert_array_equal(res.xi, least_squares(D, z))
    assert res.iterations == 0
    assert_array_equal(res.support, np.arange(5))


def _best_subset(D, z, lam):
    p = D.shape[1]
    best, best_cost = (), np.inf
    for k in range(p + 1):
        for S in itertools.combinations(range(p), k):
            xi = least_squares(D[:, list(S)], z) if S else np.zeros(0)
            r = z - (D[:, list(S)] @ xi if S else 0)
            cost = float(r @ r) + lam ** 2 * k
            if cost < best_cost - 1e-12:
                best, best_cost = S, cost
    return list(best)


@given(st.integers(0, 100_000))
def test_stls_matches_brute_force_best_subset(seed):
    rng = np.random.default_rng(seed)
    D = rng.normal(size=(8, 4))
    support = np.sort(rng.choice(4, size=2, replace=False))
    xi = np.zeros(4)
    xi[support] = rng.choice([-1, 1], size=2) * rng.uniform(1, 3, size=2)
    z = D @ xi
    lam = 0.5
    oracle = _best_subset(D, z, lam)
    assume(len(oracle) == 2)  # an l0 optimum with a different size would not be a fair target
    res = stls(D, z, lam)
    assert res.support.tolist() == oracle
    assert_allclose(res.xi, xi, atol=1e-9)


def test_removed_indices_never_return_and_iterations_bounded():
    rng = np.random.default_rng(5)
    for _ in range(50):
        D = rng.normal(size=(15, 6))
        z = rng.normal(size=15)
        lam = rng.uniform(0.05, 0.6)
        res = stls(D, z, lam, k_max=20)
        assert res.iterations <= 6
        assert np.all(res.xi[np.setdiff1d(np.arange(6), res.support)] == 0)
        if res.converged:
            assert np.all(np.abs(res.xi[res.support]) >= lam)
        # reconstruct the active-set sequence and check it only shrinks
        active = np.ones(6, bool)
        xi = least_squares(D, z)
        for _k in range(res.iterations):
            small = active & (np.abs(xi) < lam)
            active &= ~small
            xi = np.zeros(6)
            if active.any():
                xi[active] = least_squares(D[:, active], z)
        assert_array_equal(np.flatnonzero(active), res.support)


def test_tie_is_retained():
    D = np.eye(3)
    res = stls(D, np.array([0.5, 0.2, 1.0]), 0.5)
    assert res.support.tolist() == [0, 2]


def test_empty_support_returns_zero_vector():
    D = np.eye(3)
    res = stls(D, np.array([0.01, -0.02, 0.03]), 1.0)
    assert res.support.size == 0
    assert_array_equal(res.xi, 0)
    assert res.converged


def test_k_max_reports_non_convergence():
    # this instance needs three thresholding passes at lambda = 0.5
    D = np.array([[0.0, 1.0, 0.7, 0.7], [1.6, -1.2, -0.6, -1.3], [-0.1, 1.0, 0.0, 0.5],
                  [-1.9, 0.1, -0.9, 1.8], [0.9, 0.9, -0.1, 0.6], [0.7, -0.3, -0.5, -0.1]])
    z = np.array([-0.6, -0.6, -0.3, -0.7, 0.8, -1.6])
    full = stls(D, z, 0.5, k_max=10)
    capped = stls(D, z, 0.5, k_max=1)
    assert full.converged and full.iterations == 3
    assert not capped.converged
    assert capped.iterations == 1
    assert capped.support.size > full.support.size


@given(st.integers(0, 100_000), st.floats(0.1, 10))
def test_positive_homogeneity(seed, c):
    rng = np.random.default_rng(seed)
    D = rng.normal(size=(12, 5))
    z = rng.normal(size=12)
    lam = 0.3
    a = stls(D, z, lam)
    b = stls(D, c * z, c * lam)
    assert_array_equal(a.support, b.support)
    assert_allclose(b.xi, c * a.xi, rtol=1e-9, atol=1e-12)


def test_argument_validation(rng):
    D = rng.normal(size=(5, 2))
    with pytest.raises(ValueError):
        stls(D, np.ones(5), -0.1)
    with pytest.raises(ValueError):
        stls(D, np.ones(5), 0.1, k_max=0)


def test_result_to_dict():
    res = stls(np.eye(2), np.array([1.0, 0.01]), 0.1)
    d = res.to_dict(["a", "b"])
    assert d["support_labels"] == ["a"]
    assert d["lambda"] == 0.1
