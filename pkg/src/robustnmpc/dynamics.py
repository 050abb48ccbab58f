"""Dynamic nonlinear single-track vehicle model with Pacejka combined-slip tires.

State vector layout (index constants below):
    [x_pos, y_pos, psi, v_lon, v_lat, psi_dot, delta_f, a]
Control vector layout:
    [j (longitudinal jerk), omega_f (front steering rate)]

All model functions are pure and operate on plain numpy arrays. They accept
either a single state of shape (8,) / control of shape (2,) or a batch with a
trailing batch axis, shapes (8, K) and (2, K). Complex inputs are supported so
that derivatives can be obtained by complex-step differentiation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NX = 8
NU = 2
NW = 3

# state indices
IX_XPOS, IX_YPOS, IX_PSI, IX_VLON, IX_VLAT, IX_PSIDOT, IX_DELTA, IX_ACC = range(8)
# control indices
IU_JERK, IU_OMEGA = range(2)

#: longitudinal-velocity threshold below which the slip angles are taken as zero
V_EPS = 1.0

#: disturbance entry rows: additive on the (v_lon, v_lat, psi_dot) derivatives
W_ROWS = (IX_VLON, IX_VLAT, IX_PSIDOT)

_CS_H = 1e-100  # complex-step perturbation size


@dataclass(frozen=True)
class VehicleParams:
    """Chassis parameters of the single-track model.

    The default set describes a van-class vehicle of roughly 2.5 t. It is a
    documented stand-in, not a measured identification.
    """

    m: float = 2520.0        # kg
    I_z: float = 5000.0      # kg m^2
    l_f: float = 1.60        # m, CoG to front axle
    l_r: float = 1.55        # m, CoG to rear axle
    rho: float = 1.225       # kg/m^3
    S: float = 3.50          # m^2 frontal area
    C_d: float = 0.35
    fr0: float = 0.009
    fr1: float = 0.002
    fr4: float = 0.0003
    g: float = 9.81
    fx_clip: float = 0.98    # combined-slip clip ratio

    def __post_init__(self):
        for name in ("m", "I_z", "l_f", "l_r", "S"):
            if getattr(self, name) <= 0:
                raise ValueError(f"VehicleParams.{name} must be positive")
        if not 0.0 < self.fx_clip < 1.0:
            raise ValueError("fx_clip must lie in (0, 1)")

    @property
    def wheelbase(self) -> float:
        return self.l_f + self.l_r

    def static_loads(self) -> tuple[float, float]:
        """Static vertical loads (front, rear) in N."""
        fz_f = self.m * self.g * self.l_r / self.wheelbase
        fz_r = self.m * self.g * self.l_f / self.wheelbase
        return fz_f, fz_r


@dataclass(frozen=True)
class TireParams:
    """Four-coefficient Pacejka parameters per axle (D in N, rest dimensionless)."""

    B_f: float = 10.0
    C_f: float = 1.5
    D_f: float = 13000.0
    E_f: float = -0.8
    B_r: float = 12.0
    C_r: float = 1.5
    D_r: float = 13500.0
    E_r: float = -0.9

    def __post_init__(self):
        for name in ("B_f", "C_f", "D_f", "B_r", "C_r", "D_r"):
            if getattr(self, name) <= 0:
                raise ValueError(f"TireParams.{name} must be positive")


@dataclass(frozen=True)
class VehicleState:
    """Named view of the 8-component state vector."""

    x_pos: float = 0.0
    y_pos: float = 0.0
    psi: float = 0.0
    v_lon: float = 0.0
    v_lat: float = 0.0
    psi_dot: float = 0.0
    delta_f: float = 0.0
    a: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.x_pos, self.y_pos, self.psi, self.v_lon,
             self.v_lat, self.psi_dot, self.delta_f, self.a]
        )

    @staticmethod
    def from_array(x) -> "VehicleState":
        x = np.asarray(x, dtype=float)
        return VehicleState(*x.tolist())


@dataclass(frozen=True)
class ControlInput:
    """Named view of the 2-component control vector."""

    j: float = 0.0
    omega_f: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.j, self.omega_f])

    @staticmethod
    def from_array(u) -> "ControlInput":
        u = np.asarray(u, dtype=float)
        return ControlInput(*u.tolist())


def _clip_ratio(ratio, limit):
    # np.clip is undefined for complex input; branch on the real part so the
    # clipped region carries zero derivative.
    re = np.real(ratio)
    return np.where(re > limit, limit, np.where(re < -limit, -limit, ratio))


def slip_angles(x, p: VehicleParams):
    """Front and rear side-slip angles (alpha_f, alpha_r) in rad.

    Below the low-speed threshold ``V_EPS`` both angles are zero.
    """
    x = np.asarray(x)
    v_lon = x[IX_VLON]
    v_lat = x[IX_VLAT]
    psi_dot = x[IX_PSIDOT]
    delta_f = x[IX_DELTA]
    # guard the division; the branch result is discarded below V_EPS
    v_safe = np.where(np.real(v_lon) < V_EPS, 1.0, v_lon)
    a_f = delta_f - np.arctan((v_lat + p.l_f * psi_dot) / v_safe)
    a_r = np.arctan((p.l_r * psi_dot - v_lat) / v_safe)
    low = np.real(v_lon) < V_EPS
    zero = np.zeros_like(a_f)
    return np.where(low, zero, a_f), np.where(low, zero, a_r)


def pacejka(alpha, B, C, D, E):
    """Simplified magic-formula lateral tire force for slip angle ``alpha``."""
    Ba = B * alpha
    return D * np.sin(C * np.arctan(Ba - E * (Ba - np.arctan(Ba))))


def tire_forces(x, p: VehicleParams, t: TireParams):
    """Axle forces (Fy_f, Fy_r, Fx_f, Fx_r) in N.

    Longitudinal forces follow from the drive/rolling/aero balance; lateral
    forces from the Pacejka curve reduced by the combined-slip factor
    cos(asin(Fx / Fmax)) with the ratio clipped at ``p.fx_clip``.
    """
    x = np.asarray(x)
    v_lon = x[IX_VLON]
    v_lat = x[IX_VLAT]
    a = x[IX_ACC]

    fz_f, fz_r = p.static_loads()
    v_kmh = 3.6 * np.sqrt(v_lon * v_lon + v_lat * v_lat)
    fr = p.fr0 + p.fr1 * (v_kmh / 100.0) + p.fr4 * (v_kmh / 100.0) ** 4
    fr_f = fr * fz_f
    fr_r = fr * fz_r
    f_aero = 0.5 * p.rho * p.S * p.C_d * v_lon * v_lon

    fx_f = -fr_f
    fx_r = p.m * a - fr_r - f_aero

    alpha_f, alpha_r = slip_angles(x, p)
    f_tire_f = pacejka(alpha_f, t.B_f, t.C_f, t.D_f, t.E_f)
    f_tire_r = pacejka(alpha_r, t.B_r, t.C_r, t.D_r, t.E_r)

    # peak force D per axle caps the combined-slip ratio
    ratio_f = _clip_ratio(fx_f / t.D_f, p.fx_clip)
    ratio_r = _clip_ratio(fx_r / t.D_r, p.fx_clip)
    fy_f = f_tire_f * np.cos(np.arcsin(ratio_f))
    fy_r = f_tire_r * np.cos(np.arcsin(ratio_r))
    return fy_f, fy_r, fx_f, fx_r


def continuous_dynamics(x, u, p: VehicleParams, t: TireParams):
    """Time derivative of the state, shape matching ``x``."""
    x = np.asarray(x)
    u = np.asarray(u)
    psi = x[IX_PSI]
    v_lon = x[IX_VLON]
    v_lat = x[IX_VLAT]
    psi_dot = x[IX_PSIDOT]
    delta_f = x[IX_DELTA]
    j = u[IU_JERK]
    omega_f = u[IU_OMEGA]

    fy_f, fy_r, fx_f, fx_r = tire_forces(x, p, t)
    cos_d = np.cos(delta_f)
    sin_d = np.sin(delta_f)

    dx = np.empty((NX,) + np.shape(x[0]), dtype=np.result_type(x, u))
    dx[IX_XPOS] = v_lon * np.cos(psi) - v_lat * np.sin(psi)
    dx[IX_YPOS] = v_lon * np.sin(psi) + v_lat * np.cos(psi)
    dx[IX_PSI] = psi_dot
    dx[IX_VLON] = (fx_r - fy_f * sin_d + fx_f * cos_d + p.m * v_lat * psi_dot) / p.m
    dx[IX_VLAT] = (fy_r + fy_f * cos_d + fx_f * sin_d - p.m * v_lon * psi_dot) / p.m
    dx[IX_PSIDOT] = (p.l_f * (fy_f * cos_d + fx_f * sin_d) - p.l_r * fy_r) / p.I_z
    dx[IX_DELTA] = omega_f + np.zeros_like(psi)
    dx[IX_ACC] = j + np.zeros_like(psi)
    return dx


def integrate_rk4(x, u, dt: float, p: VehicleParams, t: TireParams):
    """One classical RK4 step with the control held constant over ``dt``."""
    if np.real(dt) <= 0:
        raise ValueError("dt must be positive")
    k1 = continuous_dynamics(x, u, p, t)
    k2 = continuous_dynamics(x + 0.5 * dt * k1, u, p, t)
    k3 = continuous_dynamics(x + 0.5 * dt * k2, u, p, t)
    k4 = continuous_dynamics(x + dt * k3, u, p, t)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _check_smooth_branch(x):
    v = float(np.real(np.asarray(x)[IX_VLON]))
    if v < V_EPS:
        raise ValueError(
            f"Jacobian requested at v_lon={v:.3f} m/s, inside the low-speed "
            f"branch region (threshold {V_EPS} m/s); derivatives are not "
            "defined there"
        )


def jacobian_A(x, u, p: VehicleParams, t: TireParams) -> np.ndarray:
    """8x8 state Jacobian of ``continuous_dynamics`` via complex-step."""
    _check_smooth_branch(x)
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    xs = x[:, None] + 1j * _CS_H * np.eye(NX)
    dx = continuous_dynamics(xs, u[:, None], p, t)
    return np.imag(dx) / _CS_H


def jacobian_B_w(x, u, p: VehicleParams, t: TireParams) -> np.ndarray:
    """8x3 disturbance Jacobian: constant selection onto the velocity rows."""
    _check_smooth_branch(x)
    B = np.zeros((NX, NW))
    for col, row in enumerate(W_ROWS):
        B[row, col] = 1.0
    return B


def jacobian_u(x, u, p: VehicleParams, t: TireParams) -> np.ndarray:
    """8x2 control Jacobian of ``continuous_dynamics`` (complex-step)."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    us = u[:, None] + 1j * _CS_H * np.eye(NU)
    xs = np.repeat(x[:, None], NU, axis=1)
    dx = continuous_dynamics(xs, us, p, t)
    return np.imag(dx) / _CS_H


def discrete_jacobians_A_batch(X, U, dt: float, p: VehicleParams, t: TireParams):
    """State Jacobians A_d of the RK4 step for a batch of (x, u) pairs.

    ``X`` is (K, 8), ``U`` is (K, 2); returns (K, 8, 8). One complex-step
    sweep over all K*8 directions, so the cost is a single batched RK4 call.
    """
    X = np.asarray(X, dtype=float)
    U = np.asarray(U, dtype=float)
    K = X.shape[0]
    xs = np.repeat(X.T[:, :, None], NX, axis=2).astype(complex)  # (8, K, 8)
    xs += 1j * _CS_H * np.eye(NX)[:, None, :]
    us = np.repeat(U.T[:, :, None], NX, axis=2).astype(complex)
    xn = integrate_rk4(xs.reshape(NX, K * NX), us.reshape(NU, K * NX), dt, p, t)
    J = (np.imag(xn) / _CS_H).reshape(NX, K, NX)
    return J.transpose(1, 0, 2)


def discrete_jacobians(x, u, dt: float, p: VehicleParams, t: TireParams):
    """Jacobians (A_d, B_d) of the RK4 step w.r.t. state and control.

    Computed with a single batched complex-step sweep over all 10 directions,
    exact to machine precision away from the model's branch points.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    xs = np.repeat(x[:, None], NX + NU, axis=1).astype(complex)
    us = np.repeat(u[:, None], NX + NU, axis=1).astype(complex)
    xs[:, :NX] += 1j * _CS_H * np.eye(NX)
    us[:, NX:] += 1j * _CS_H * np.eye(NU)
    xn = integrate_rk4(xs, us, dt, p, t)
    J = np.imag(xn) / _CS_H
    return J[:, :NX], J[:, NX:]
