import numpy as np
import pytest

from robustnmpc.qp import solve_dense_qp, kkt_residuals, MAX_QP_ITER
from robustnmpc.cli import enumerate_qp_reference


def random_qp(rng, n, m):
    M = rng.standard_normal((n, n))
    H = M @ M.T + 0.1 * np.eye(n)
    g = rng.standard_normal(n)
    C = rng.standard_normal((m, n))
    d = rng.uniform(0.05, 1.5, size=m)
    return H, g, C, d


def test_unconstrained_solution():
    rng = np.random.default_rng(0)
    H, g, _, _ = random_qp(rng, 4, 1)
    res = solve_dense_qp(H, g)
    np.testing.assert_allclose(res.z, np.linalg.solve(H, -g), atol=1e-8)
    assert res.ok


def test_active_bound():
    # min (z - 2)^2 s.t. z <= 1 -> z = 1, multiplier 2
    H = np.array([[2.0]])
    g = np.array([-4.0])
    C = np.array([[1.0]])
    d = np.array([1.0])
    res = solve_dense_qp(H, g, C, d)
    assert res.z[0] == pytest.approx(1.0, abs=1e-8)
    assert res.lam[0] == pytest.approx(2.0, abs=1e-6)


def test_matches_active_set_enumeration():
    rng = np.random.default_rng(1)
    for _ in range(60):
        n = int(rng.integers(2, 6))
        m = int(rng.integers(1, 2 * n + 1))
        H, g, C, d = random_qp(rng, n, m)
        res = solve_dense_qp(H, g, C, d)
        z_ref = enumerate_qp_reference(H, g, C, d)
        assert z_ref is not None
        assert res.ok
        assert np.abs(res.z - z_ref).max() < 1e-7


def test_kkt_residuals_at_solution():
    rng = np.random.default_rng(2)
    H, g, C, d = random_qp(rng, 5, 6)
    res = solve_dense_qp(H, g, C, d)
    r_st, r_pf, r_co = kkt_residuals(H, g, C, d, res.z, res.lam)
    assert max(r_st, r_pf, r_co) < 1e-7


def test_infeasible_detected():
    # z <= -1 and -z <= -1 cannot both hold
    H = np.eye(1)
    g = np.zeros(1)
    C = np.array([[1.0], [-1.0]])
    d = np.array([-1.0, -1.0])
    res = solve_dense_qp(H, g, C, d)
    assert not res.ok


def test_iteration_cap_is_fifty():
    assert MAX_QP_ITER == 50


def test_warm_start_consistency():
    rng = np.random.default_rng(3)
    H, g, C, d = random_qp(rng, 4, 5)
    cold = solve_dense_qp(H, g, C, d)
    warm = solve_dense_qp(H, g, C, d, warm=(cold.z, cold.lam))
    np.testing.assert_allclose(cold.z, warm.z, atol=1e-7)
