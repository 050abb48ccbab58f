import numpy as np
import pytest

from robustnmpc.ellipsoid import (
    Ellipsoid, backoff, contains, matrix_sqrt_psd, propagate_continuous_rhs,
    propagate_discrete, sample_uniform, BACKOFF_EPS,
)


def random_psd(rng, n):
    M = rng.standard_normal((n, n))
    return M @ M.T


def test_matrix_sqrt_roundtrip():
    rng = np.random.default_rng(0)
    for n in (1, 3, 6):
        M = random_psd(rng, n)
        S = matrix_sqrt_psd(M)
        np.testing.assert_allclose(S @ S.T, M, atol=1e-10)


def test_matrix_sqrt_rank_deficient():
    v = np.array([1.0, 2.0, -1.0])
    M = np.outer(v, v)
    S = matrix_sqrt_psd(M)
    np.testing.assert_allclose(S @ S.T, M, atol=1e-10)


def test_contains_unit_ball():
    e = Ellipsoid(np.eye(2))
    assert contains(e, np.array([0.6, 0.6]))
    assert not contains(e, np.array([0.8, 0.8]))
    assert contains(e, np.array([1.0, 0.0]))


def test_sample_uniform_inside_and_centered():
    rng = np.random.default_rng(1)
    W = np.diag([4.0, 0.25])
    X = sample_uniform(W, rng, 20000).T
    # all samples inside the ellipse x^2/4 + y^2/0.25 <= 1
    q = X[:, 0] ** 2 / 4.0 + X[:, 1] ** 2 / 0.25
    assert q.max() <= 1.0 + 1e-9
    # mean near zero (3 standard errors)
    std = X.std(axis=0) / np.sqrt(len(X))
    assert np.all(np.abs(X.mean(axis=0)) < 3.5 * std + 1e-12)


def test_sample_uniform_second_moment_scaling():
    rng = np.random.default_rng(2)
    n = 3
    W = random_psd(rng, n)
    X = sample_uniform(W, rng, 200000).T
    emp = (n + 2) * X.T @ X / len(X)
    assert np.linalg.norm(emp - W) / np.linalg.norm(W) < 0.03


def test_propagate_discrete_no_noise_is_congruence():
    rng = np.random.default_rng(3)
    A = rng.standard_normal((4, 4))
    Sigma = random_psd(rng, 4)
    out = propagate_discrete(Sigma, A, np.zeros((4, 2)), np.zeros((2, 2)))
    np.testing.assert_allclose(out, A @ Sigma @ A.T, atol=1e-12)


def test_propagate_discrete_symmetric_psd():
    rng = np.random.default_rng(4)
    Sigma = random_psd(rng, 5)
    A = rng.standard_normal((5, 5))
    B = rng.standard_normal((5, 2))
    W = random_psd(rng, 2)
    out = propagate_discrete(Sigma, A, B, W)
    np.testing.assert_allclose(out, out.T, atol=1e-12)
    assert np.linalg.eigvalsh(out).min() > -1e-10


def test_propagate_continuous_rhs_formula():
    rng = np.random.default_rng(5)
    Sigma = random_psd(rng, 3)
    A = rng.standard_normal((3, 3))
    B = rng.standard_normal((3, 2))
    W = random_psd(rng, 2)
    rhs = propagate_continuous_rhs(Sigma, A, B, W)
    np.testing.assert_allclose(rhs, A @ Sigma + Sigma @ A.T + B @ W @ B.T,
                               atol=1e-12)


def test_backoff_zero_sigma():
    assert backoff(np.ones(4), np.zeros((4, 4))) == 0.0


def test_backoff_matches_cauchy_schwarz_value():
    rng = np.random.default_rng(6)
    Sigma = random_psd(rng, 4)
    g = rng.standard_normal(4)
    exact = np.sqrt(g @ Sigma @ g)
    assert backoff(g, Sigma) == pytest.approx(exact, abs=np.sqrt(BACKOFF_EPS))


def test_backoff_bounds_worst_case_over_ellipsoid():
    rng = np.random.default_rng(7)
    for _ in range(10):
        n = int(rng.integers(2, 6))
        Sigma = random_psd(rng, n)
        g = rng.standard_normal(n)
        bo = backoff(g, Sigma)
        dx = sample_uniform(Sigma, rng, 50000).T
        assert (dx @ g).max() <= bo * (1 + 1e-6) + 1e-9
