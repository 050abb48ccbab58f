import numpy as np
import pytest

from robustnmpc import dynamics as dyn
from robustnmpc.dynamics import (
    NX, NU, VehicleParams, TireParams, continuous_dynamics, integrate_rk4,
    jacobian_A, jacobian_B_w, jacobian_u, discrete_jacobians,
    discrete_jacobians_A_batch, pacejka, slip_angles, tire_forces,
)

VP = VehicleParams()
TP = TireParams()


def random_admissible_state(rng):
    return np.array([
        rng.uniform(-100, 100), rng.uniform(-100, 100), rng.uniform(-np.pi, np.pi),
        rng.uniform(3.0, 36.0), rng.uniform(-2.0, 2.0), rng.uniform(-1.0, 1.0),
        rng.uniform(-0.55, 0.55), rng.uniform(-4.0, 3.0),
    ])


def random_input(rng):
    return np.array([rng.uniform(-25, 25), rng.uniform(-0.3, 0.3)])


def test_pacejka_formula():
    B, C, D, E = 10.0, 1.5, 13000.0, -0.8
    alpha = 0.07
    expected = D * np.sin(C * np.arctan(B * alpha - E * (B * alpha - np.arctan(B * alpha))))
    assert pacejka(alpha, B, C, D, E) == pytest.approx(expected, rel=1e-12)
    assert pacejka(0.0, B, C, D, E) == 0.0
    assert pacejka(-alpha, B, C, D, E) == pytest.approx(-expected, rel=1e-12)


def test_slip_angles_straight_running():
    x = np.zeros(NX)
    x[dyn.IX_VLON] = 20.0
    a_f, a_r = slip_angles(x, VP)
    assert a_f == pytest.approx(0.0, abs=1e-12)
    assert a_r == pytest.approx(0.0, abs=1e-12)


def test_slip_angle_sign_with_steering():
    x = np.zeros(NX)
    x[dyn.IX_VLON] = 20.0
    x[dyn.IX_DELTA] = 0.1
    a_f, _ = slip_angles(x, VP)
    assert a_f > 0.0


def test_longitudinal_balance_on_straight():
    # on a straight the speed derivative is the drive acceleration minus the
    # rolling and aero losses of both axles
    x = np.zeros(NX)
    x[dyn.IX_VLON] = 25.0
    x[dyn.IX_ACC] = 1.5
    fy_f, fy_r, fx_f, fx_r = tire_forces(x, VP, TP)
    assert fy_f == pytest.approx(0.0, abs=1e-9)
    assert fy_r == pytest.approx(0.0, abs=1e-9)
    f = continuous_dynamics(x, np.zeros(NU), VP, TP)
    assert f[dyn.IX_VLON] == pytest.approx((fx_r + fx_f) / VP.m, rel=1e-12)
    assert f[dyn.IX_VLON] < x[dyn.IX_ACC]  # losses always bite


def test_integrate_rk4_accuracy_and_order():
    rng = np.random.default_rng(3)
    x = random_admissible_state(rng)
    u = random_input(rng)
    dt = 0.08
    ref = x.copy()
    for _ in range(256):
        ref = integrate_rk4(ref, u, dt / 256, VP, TP)
    err1 = np.abs(integrate_rk4(x, u, dt, VP, TP) - ref).max()
    x2 = integrate_rk4(x, u, dt / 2, VP, TP)
    err2 = np.abs(integrate_rk4(x2, u, dt / 2, VP, TP) - ref).max()
    assert err1 < 5e-3
    # fourth-order method: halving the step shrinks the error ~16x
    assert err2 < err1 / 10


def test_actuator_channels_integrate_exactly():
    x = np.zeros(NX)
    x[dyn.IX_VLON] = 15.0
    u = np.array([2.0, 0.1])
    x1 = integrate_rk4(x, u, 0.08, VP, TP)
    assert x1[dyn.IX_DELTA] == pytest.approx(0.008, rel=1e-12)
    assert x1[dyn.IX_ACC] == pytest.approx(0.16, rel=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_continuous_jacobians_match_fd(seed):
    rng = np.random.default_rng(seed)
    x = random_admissible_state(rng)
    u = random_input(rng)
    A = jacobian_A(x, u, VP, TP)
    Bu = jacobian_u(x, u, VP, TP)
    h = 1e-6
    for i in range(NX):
        e = np.zeros(NX)
        e[i] = h
        fd = (continuous_dynamics(x + e, u, VP, TP)
              - continuous_dynamics(x - e, u, VP, TP)) / (2 * h)
        assert np.abs(A[:, i] - fd).max() < 1e-5 * max(1.0, np.abs(fd).max())
    for i in range(NU):
        e = np.zeros(NU)
        e[i] = h
        fd = (continuous_dynamics(x, u + e, VP, TP)
              - continuous_dynamics(x, u - e, VP, TP)) / (2 * h)
        assert np.abs(Bu[:, i] - fd).max() < 1e-5 * max(1.0, np.abs(fd).max())


def test_noise_jacobian_selects_velocity_rows():
    rng = np.random.default_rng(11)
    x = random_admissible_state(rng)
    Bw = jacobian_B_w(x, random_input(rng), VP, TP)
    assert Bw.shape == (NX, dyn.NW)
    expected = np.zeros((NX, dyn.NW))
    for col, row in enumerate(dyn.W_ROWS):
        expected[row, col] = 1.0
    np.testing.assert_allclose(Bw, expected)


def test_discrete_jacobians_match_fd():
    rng = np.random.default_rng(7)
    x = random_admissible_state(rng)
    u = random_input(rng)
    dt = 0.08
    Ad, Bd = discrete_jacobians(x, u, dt, VP, TP)
    h = 1e-6
    for i in range(NX):
        e = np.zeros(NX)
        e[i] = h
        fd = (integrate_rk4(x + e, u, dt, VP, TP)
              - integrate_rk4(x - e, u, dt, VP, TP)) / (2 * h)
        assert np.abs(Ad[:, i] - fd).max() < 1e-5 * max(1.0, np.abs(fd).max())
    for i in range(NU):
        e = np.zeros(NU)
        e[i] = h
        fd = (integrate_rk4(x, u + e, dt, VP, TP)
              - integrate_rk4(x, u - e, dt, VP, TP)) / (2 * h)
        assert np.abs(Bd[:, i] - fd).max() < 1e-5 * max(1.0, np.abs(fd).max())


def test_batch_jacobians_match_single():
    rng = np.random.default_rng(5)
    X = np.stack([random_admissible_state(rng) for _ in range(6)])
    U = np.stack([random_input(rng) for _ in range(6)])
    Ads = discrete_jacobians_A_batch(X, U, 0.08, VP, TP)
    for k in range(6):
        Ad, _ = discrete_jacobians(X[k], U[k], 0.08, VP, TP)
        np.testing.assert_allclose(Ads[k], Ad, atol=1e-9)


def test_tire_forces_saturate():
    x = np.zeros(NX)
    x[dyn.IX_VLON] = 20.0
    x[dyn.IX_DELTA] = 0.5  # deep into saturation
    fy_f, _, _, _ = tire_forces(x, VP, TP)
    assert abs(fy_f) <= TP.D_f + 1e-9
