"""The four closed-loop trajectory-following controllers behind one stepping
interface:

* ``NominalNmpc``      - plain receding-horizon tracking.
* ``RobustifiedNmpc``  - covariance matrices as per-node decision variables
  (augmented state of dimension 8 + 36 = 44), constraint tightening evaluated
  inside the OCP.
* ``ReducedRobustNmpc`` - nominal-sized OCP; covariance propagation and
  back-off computation run outside the OCP on the previous solution.
* ``TubeNmpc``         - pre-computed geometric constraint tightening, no
  covariance machinery.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import dynamics as dyn
from .dynamics import (
    NX, NU, NW, IX_PSI, IX_VLON, IX_VLAT, IX_PSIDOT, IX_DELTA, IX_ACC,
    VehicleParams, TireParams,
)
from .ellipsoid import backoff, propagate_discrete, BACKOFF_EPS
from .ocp import OcpSpec, SolverIterate, NlRow, sqp_rti_step, shift_horizon
from .track import ReferenceWindow

NV = NX * (NX + 1) // 2  # vech dimension of an 8x8 symmetric matrix

# Weight on the (lag-compensated) measurement in the controller's
# complementary state estimate.  The rest of the estimate comes from rolling
# the previous estimate forward through the vehicle model under the last
# applied input, which carries no measurement noise; the blend keeps the
# estimate anchored to the plant so model mismatch and the initial offset
# decay within a fraction of a second.
OBS_BLEND = 0.3

# Smallest acceleration envelope a back-off may leave.  The covariance
# recursion runs open loop along the predicted trajectory; past the tire
# saturation point its sensitivities can explode, and a back-off beyond the
# full constraint range would demand a negative squared-acceleration norm.
GG_MIN_ENVELOPE = 0.1


@dataclass(frozen=True)
class ControllerConfig:
    """Sampling scheme, weights, uncertainty matrices and actuator limits."""

    ts: float = 0.08
    tp: float = 3.04
    q: tuple = (2.8, 2.8, 0.4, 0.2)          # x, y, psi, v_lon tracking weights
    r: tuple = (38.1, 101.4)                 # jerk, steering-rate weights
    q_e: tuple = (2.8, 2.8, 0.4, 0.2)
    w_uncertainty: tuple = (1.1, 0.2, 0.05)  # disturbance set on (v_lon, v_lat, psi_dot)
    # initial uncertainty diag over the full state; the acceleration slot has
    # no specified entry and is zero-padded
    sigma0_diag: tuple = (0.0, 0.0, 0.0, 0.6, 0.02, 0.00125, 0.0, 0.0)
    tube_rho: float = 0.62
    tube_eps: float = 1e-3
    ay_max: float = 5.866
    ax_switch_speed: float = 11.0
    ax_decel: tuple = (4.5, 3.5)             # below / above the switch speed
    ax_accel: tuple = (3.0, 2.5)
    v_max: float = 37.5
    delta_max: float = 0.61
    omega_max: float = 0.322
    jerk_max: float = 30.0
    # Levenberg-Marquardt shift of the stage Hessians; the tracking weights
    # put almost no mass on the tail-stage lateral states, so a small uniform
    # shift keeps the real-time iterations contractive
    lm_reg: float = 0.1
    # Group delay of the state-estimation filter per channel, in seconds.  A
    # trailing moving average of window w lags its input by (w - 1) / 2
    # periods; the controller forward-predicts the measured state through the
    # vehicle model with the last applied input and reads each channel off at
    # its own delay horizon.  Uncompensated, the heading lag destabilises the
    # lateral loop at speed.
    lag_comp: tuple = (0.0, 0.0, 0.12, 0.04, 0.04, 0.08, 0.12, 0.04)

    def __post_init__(self):
        if self.ts <= 0:
            raise ValueError("ts must be positive")
        if not 0.0 < self.tube_rho < 1.0:
            raise ValueError("tube_rho must lie in (0, 1)")
        if any(w < 0 for w in self.q + self.r + self.q_e):
            raise ValueError("weights must be nonnegative")

    @property
    def N(self) -> int:
        return int(round(self.tp / self.ts))

    def W3(self) -> np.ndarray:
        return np.diag(self.w_uncertainty)

    def Sigma0(self) -> np.ndarray:
        return np.diag(self.sigma0_diag)

    def ax_max(self, v_lon: float, accel_sign: float) -> float:
        """Velocity- and direction-dependent longitudinal acceleration limit."""
        table = self.ax_decel if accel_sign < 0.0 else self.ax_accel
        return table[0] if v_lon <= self.ax_switch_speed else table[1]


@dataclass
class ControllerStepResult:
    u0: np.ndarray
    X_pred: np.ndarray
    U_pred: np.ndarray
    stats: object
    backoffs: np.ndarray | None = None
    sigma_traj: np.ndarray | None = None


# ---------------------------------------------------------------------------
# acceleration-potential (gg) constraint

def gg_constraint(x, cfg: ControllerConfig) -> float:
    """h = (a / a_x_max)^2 + (v_lon * psi_dot / a_y_max)^2, limit selected
    from the current velocity and the sign of the acceleration."""
    x = np.asarray(x, dtype=float)
    axm = cfg.ax_max(x[IX_VLON], np.sign(x[IX_ACC]) if x[IX_ACC] != 0 else 1.0)
    return gg_value_frozen(x, axm, cfg)


def gg_value_frozen(x, axm: float, cfg: ControllerConfig) -> float:
    a_lat = x[IX_VLON] * x[IX_PSIDOT]
    return float((x[IX_ACC] / axm) ** 2 + (a_lat / cfg.ay_max) ** 2)


def gg_grad_frozen(x, axm: float, cfg: ControllerConfig) -> np.ndarray:
    g = np.zeros(NX)
    ay2 = cfg.ay_max ** 2
    g[IX_VLON] = 2.0 * x[IX_VLON] * x[IX_PSIDOT] ** 2 / ay2
    g[IX_PSIDOT] = 2.0 * x[IX_VLON] ** 2 * x[IX_PSIDOT] / ay2
    g[IX_ACC] = 2.0 * x[IX_ACC] / axm ** 2
    return g


def gg_hess_frozen(x, axm: float, cfg: ControllerConfig) -> np.ndarray:
    H = np.zeros((NX, NX))
    ay2 = cfg.ay_max ** 2
    H[IX_VLON, IX_VLON] = 2.0 * x[IX_PSIDOT] ** 2 / ay2
    H[IX_PSIDOT, IX_PSIDOT] = 2.0 * x[IX_VLON] ** 2 / ay2
    H[IX_VLON, IX_PSIDOT] = H[IX_PSIDOT, IX_VLON] = 4.0 * x[IX_VLON] * x[IX_PSIDOT] / ay2
    H[IX_ACC, IX_ACC] = 2.0 / axm ** 2
    return H


# ---------------------------------------------------------------------------
# vech packing for the covariance-augmented state

_TRIL = np.tril_indices(NX)
_VECH_DOUBLE = (_TRIL[0] != _TRIL[1]).astype(float) + 1.0  # 2 off-diag, 1 diag


def vech(M: np.ndarray) -> np.ndarray:
    return np.asarray(M)[_TRIL]


def unvech(v: np.ndarray) -> np.ndarray:
    M = np.zeros((NX, NX) + np.shape(v)[1:], dtype=np.asarray(v).dtype)
    M[_TRIL] = v
    MT = np.swapaxes(M, 0, 1).copy()
    d = np.arange(NX)
    MT[d, d] = 0.0
    return M + MT


# ---------------------------------------------------------------------------
# controllers

class _NmpcBase:
    """Shared stepping logic: warm starting, reference loading, per-stage
    freezing of the velocity-dependent acceleration limit."""

    node_dim = NX

    def __init__(self, cfg: ControllerConfig, vp: VehicleParams, tp: TireParams):
        self.cfg = cfg
        self.vp = vp
        self.tp = tp
        self.N = cfg.N
        self._axm = np.full(self.N + 1, cfg.ax_accel[1])
        self._act: np.ndarray | None = None
        self._u_prev: np.ndarray | None = None
        self.iterate: SolverIterate | None = None
        self.spec = self._build_spec()

    # -- spec assembly ------------------------------------------------------

    def _build_spec(self) -> OcpSpec:
        cfg, N = self.cfg, self.N
        n_x = self.node_dim
        Jx = np.zeros((6, n_x))
        for row, ix in enumerate((0, 1, IX_PSI, IX_VLON)):
            Jx[row, ix] = 1.0
        Ju = np.zeros((6, NU))
        Ju[4, 0] = 1.0
        Ju[5, 1] = 1.0
        Je = Jx[:4]
        x_lb = np.full(n_x, -np.inf)
        x_ub = np.full(n_x, np.inf)
        x_lb[IX_DELTA] = -cfg.delta_max
        x_ub[IX_DELTA] = cfg.delta_max
        spec = OcpSpec(
            N=N, dt=cfg.ts, n_x=n_x, n_u=NU,
            dyn_step=self._dyn_step, dyn_jac=self._dyn_jac,
            output=lambda x, u: np.concatenate([x[[0, 1, IX_PSI, IX_VLON]], u]),
            output_jac=lambda x, u: (Jx, Ju),
            W=np.diag(np.concatenate([cfg.q, cfg.r])),
            terminal_output=lambda x: x[[0, 1, IX_PSI, IX_VLON]],
            terminal_jac=lambda x: Je,
            W_e=np.diag(cfg.q_e),
            u_lb=np.array([-cfg.jerk_max, -cfg.omega_max]),
            u_ub=np.array([cfg.jerk_max, cfg.omega_max]),
            x_lb=x_lb, x_ub=x_ub,
            rows=[NlRow("gg", self._gg_value, self._gg_grad,
                        ub=np.ones(N + 1), soft=True, hess=self._gg_hess)],
            lm_reg=cfg.lm_reg,
            dyn_hess=self._dyn_curvature,
        )
        return spec

    def _dyn_step(self, x, u):
        return dyn.integrate_rk4(x, u, self.cfg.ts, self.vp, self.tp)

    def _dyn_jac(self, x, u):
        return dyn.discrete_jacobians(x, u, self.cfg.ts, self.vp, self.tp)

    def _dyn_curvature(self, x, u, lam_next, k):
        """Costate-weighted curvature model of the shooting map, lam' d2F/dx2.

        Three second-order terms of the continuous dynamics dominate (each
        scaled by dt, the Euler-level estimate of the discrete curvature):

        * trigonometric position kinematics x_dot = v cos(psi) - v_lat sin(psi)
          and the y analogue, exact Hessians over (psi, v_lon, v_lat);
        * the bilinear velocity couplings v_lat*psi_dot and -v_lon*psi_dot;
        * the lateral tire forces, rank-one curvature F''(alpha) along the
          slip-angle gradient per axle (the F' * d2alpha remainder is small
          at the slip levels the controller operates in).

        The result is indefinite by construction; the solver applies a
        symmetric projection before adding it to the stage Hessian.
        """
        n = self.node_dim
        ts = self.cfg.ts
        H = np.zeros((n, n))
        c, s = np.cos(x[IX_PSI]), np.sin(x[IX_PSI])
        v, vl, pd = x[IX_VLON], x[IX_VLAT], x[IX_PSIDOT]
        idx = (IX_PSI, IX_VLON, IX_VLAT)
        fx, fy = v * c - vl * s, v * s + vl * c
        Hx = np.array([[-fx, -s, -c], [-s, 0.0, 0.0], [-c, 0.0, 0.0]])
        Hy = np.array([[-fy, c, -s], [c, 0.0, 0.0], [-s, 0.0, 0.0]])
        H[np.ix_(idx, idx)] = ts * (lam_next[0] * Hx + lam_next[1] * Hy)

        # bilinear couplings in the velocity equations
        H[IX_VLAT, IX_PSIDOT] += ts * lam_next[IX_VLON]
        H[IX_PSIDOT, IX_VLAT] += ts * lam_next[IX_VLON]
        H[IX_VLON, IX_PSIDOT] -= ts * lam_next[IX_VLAT]
        H[IX_PSIDOT, IX_VLON] -= ts * lam_next[IX_VLAT]

        # lateral tire-force curvature, one rank-one term per axle
        if v > dyn.V_EPS:
            vp_, tp_ = self.vp, self.tp
            af, ar = dyn.slip_angles(x, vp_)
            cd, sd = np.cos(x[IX_DELTA]), np.sin(x[IX_DELTA])
            den_f = v * v + (vl + vp_.l_f * pd) ** 2
            den_r = v * v + (vp_.l_r * pd - vl) ** 2
            # d alpha / d (v, v_lat, psi_dot, delta)
            ga_f = np.zeros(n)
            ga_f[IX_VLON] = (vl + vp_.l_f * pd) / den_f
            ga_f[IX_VLAT] = -v / den_f
            ga_f[IX_PSIDOT] = -vp_.l_f * v / den_f
            ga_f[IX_DELTA] = 1.0
            ga_r = np.zeros(n)
            ga_r[IX_VLON] = -(vp_.l_r * pd - vl) / den_r
            ga_r[IX_VLAT] = -v / den_r
            ga_r[IX_PSIDOT] = vp_.l_r * v / den_r
            wf = (lam_next[IX_VLAT] * cd / vp_.m
                  + lam_next[IX_PSIDOT] * vp_.l_f * cd / vp_.I_z
                  - lam_next[IX_VLON] * sd / vp_.m)
            wr = lam_next[IX_VLAT] / vp_.m - lam_next[IX_PSIDOT] * vp_.l_r / vp_.I_z
            h = 1e-4
            d2f = (dyn.pacejka(af + h, tp_.B_f, tp_.C_f, tp_.D_f, tp_.E_f)
                   - 2.0 * dyn.pacejka(af, tp_.B_f, tp_.C_f, tp_.D_f, tp_.E_f)
                   + dyn.pacejka(af - h, tp_.B_f, tp_.C_f, tp_.D_f, tp_.E_f)) / h ** 2
            d2r = (dyn.pacejka(ar + h, tp_.B_r, tp_.C_r, tp_.D_r, tp_.E_r)
                   - 2.0 * dyn.pacejka(ar, tp_.B_r, tp_.C_r, tp_.D_r, tp_.E_r)
                   + dyn.pacejka(ar - h, tp_.B_r, tp_.C_r, tp_.D_r, tp_.E_r)) / h ** 2
            H += ts * float(wf * d2f) * np.outer(ga_f, ga_f)
            H += ts * float(wr * d2r) * np.outer(ga_r, ga_r)
        return H

    def _gg_value(self, x, u, k):
        return gg_value_frozen(x, self._axm[k], self.cfg)

    def _gg_grad(self, x, u, k):
        return gg_grad_frozen(x, self._axm[k], self.cfg), None

    def _gg_hess(self, x, u, k):
        H = np.zeros((self.node_dim, self.node_dim))
        H[:NX, :NX] = gg_hess_frozen(x[:NX], self._axm[k], self.cfg)
        return H

    # -- stepping -----------------------------------------------------------

    def _augment_x0(self, measured: np.ndarray) -> np.ndarray:
        return measured

    def _cold_start(self, measured: np.ndarray, window: ReferenceWindow) -> SolverIterate:
        cfg, N = self.cfg, self.N
        ref = window.points  # (N+1, 4): x, y, psi, v
        X = np.zeros((N + 1, NX))
        X[:, 0] = ref[:, 0]
        X[:, 1] = ref[:, 1]
        X[:, IX_PSI] = ref[:, 2]
        X[:, IX_VLON] = ref[:, 3]
        dpsi = np.gradient(ref[:, 2]) / cfg.ts
        X[:, IX_PSIDOT] = dpsi
        v_safe = np.maximum(ref[:, 3], 1.0)
        X[:, IX_DELTA] = np.clip(np.arctan(self.vp.wheelbase * dpsi / v_safe),
                                 -cfg.delta_max, cfg.delta_max)
        X[:, IX_ACC] = np.gradient(ref[:, 3]) / cfg.ts
        X[0] = measured
        U = np.zeros((N, NU))
        return SolverIterate(self._lift_states(X), U)

    def _lift_states(self, X: np.ndarray) -> np.ndarray:
        return X

    def _freeze_limits(self, X: np.ndarray) -> None:
        cfg = self.cfg
        for k in range(self.N + 1):
            v = float(np.clip(X[k, IX_VLON], 0.0, cfg.v_max))
            sign = -1.0 if X[k, IX_ACC] < 0.0 else 1.0
            self._axm[k] = cfg.ax_max(v, sign)

    def _gg_upper_bounds(self) -> np.ndarray:
        return np.ones(self.N + 1)

    def _post_solve(self, iterate: SolverIterate) -> None:
        pass

    def _compensate_lag(self, measured: np.ndarray) -> np.ndarray:
        """Undo the estimation filter's per-channel group delay.

        The measured state is rolled forward through the vehicle model under
        the last applied input, and each lagged channel is read off at its own
        delay horizon; unlagged channels keep their measured values.
        """
        taus = np.asarray(self.cfg.lag_comp, dtype=float)
        horizons = sorted({t for t in taus if t > 0.0})
        if not horizons:
            return measured
        out = measured.copy()
        x = measured.copy()
        t_prev = 0.0
        for t_h in horizons:
            x = dyn.integrate_rk4(x, self._u_prev, t_h - t_prev, self.vp, self.tp)
            out[taus == t_h] = x[taus == t_h]
            t_prev = t_h
        return out

    def step(self, measured, window: ReferenceWindow, advance: bool = True) -> ControllerStepResult:
        """One control step: returns the first input of the updated plan.

        ``advance=False`` repeats the solve at a frozen horizon (no shift),
        which is useful for convergence studies.
        """
        t0 = time.perf_counter()
        measured = np.asarray(measured, dtype=float).copy()
        if advance and self._u_prev is not None:
            measured = self._compensate_lag(measured)
        # The steering angle and drive acceleration are actuator states: they
        # integrate the commanded rates exactly, so the controller's own
        # one-step-ahead bookkeeping carries neither noise nor filter lag.  A
        # small measurement blend lets an initial bookkeeping offset (the
        # first step has only the noisy measurement to start from) decay
        # instead of persisting as a steering bias.
        if advance and self._act is not None:
            measured[[IX_DELTA, IX_ACC]] = (
                (1.0 - ACT_BLEND) * self._act
                + ACT_BLEND * measured[[IX_DELTA, IX_ACC]])
        if self.iterate is None:
            it = self._cold_start(measured, window)
        elif advance:
            it = shift_horizon(self.iterate)
        else:
            it = self.iterate

        ref = window.points
        ny = 6
        y_ref = np.zeros((self.N, ny))
        y_ref[:, :4] = ref[:-1]
        self.spec.y_ref = y_ref
        self.spec.y_ref_e = ref[-1].copy()

        self._freeze_limits(it.X)
        self.spec.rows[0].ub = self._gg_upper_bounds()

        x0 = self._augment_x0(measured)
        u0, new_it, stats = sqp_rti_step(self.spec, it, x0)
        if stats.ok:
            self.iterate = new_it
        if advance:
            self._act = np.array([measured[IX_DELTA] + self.cfg.ts * u0[1],
                                  measured[IX_ACC] + self.cfg.ts * u0[0]])
            self._u_prev = np.asarray(u0, dtype=float).copy()
        self._post_solve(self.iterate if self.iterate is not None else it)
        stats.solve_time = time.perf_counter() - t0
        return self._make_result(u0, stats)

    def _make_result(self, u0, stats) -> ControllerStepResult:
        it = self.iterate
        X = it.X[:, :NX] if it is not None else np.zeros((self.N + 1, NX))
        U = it.U if it is not None else np.zeros((self.N, NU))
        return ControllerStepResult(u0, X.copy(), U.copy(), stats)


class NominalNmpc(_NmpcBase):
    """Receding-horizon tracking without robustification (gg bound = 1)."""


class TubeNmpc(_NmpcBase):
    """Stage-growing geometric constraint tightening.

    Stage k's gg bound is 1 - eps * (1 - rho^k) / (1 - rho); the steering
    angle and rate bounds are scaled by the same per-stage factor.
    """

    def __init__(self, cfg, vp, tp):
        super().__init__(cfg, vp, tp)
        k = np.arange(self.N + 1)
        self._tighten = cfg.tube_eps * (1.0 - cfg.tube_rho ** k) / (1.0 - cfg.tube_rho)
        scale = 1.0 - self._tighten
        u_ub = np.tile(self.spec.u_ub, (self.N, 1))
        u_ub[:, 1] = cfg.omega_max * scale[:self.N]
        self.spec.u_ub = u_ub
        self.spec.u_lb = -u_ub
        x_ub = np.tile(np.full(NX, np.inf), (self.N + 1, 1))
        x_ub[:, IX_DELTA] = cfg.delta_max * scale
        self.spec.x_ub = x_ub
        self.spec.x_lb = -x_ub

    def _gg_upper_bounds(self) -> np.ndarray:
        return 1.0 - self._tighten


class ReducedRobustNmpc(_NmpcBase):
    """Nominal-sized OCP with back-offs computed outside the solve.

    Phase A solves the reduced OCP with the gg bounds tightened by the cached
    back-offs from the previous call; Phase B propagates the covariance along
    the returned trajectory with the discrete Lyapunov recursion and refreshes
    the back-offs for the next call.
    """

    def __init__(self, cfg, vp, tp):
        super().__init__(cfg, vp, tp)
        self.backoffs = np.zeros(self.N + 1)
        self.sigma_traj: np.ndarray | None = None
        self._Bw = np.zeros((NX, NW))
        for col, row in enumerate(dyn.W_ROWS):
            self._Bw[row, col] = 1.0
        self.psd_drift = 0.0

    def _gg_upper_bounds(self) -> np.ndarray:
        return np.maximum(1.0 - self.backoffs, GG_MIN_ENVELOPE)

    def _post_solve(self, iterate: SolverIterate) -> None:
        if iterate is None:
            return
        cfg = self.cfg
        X, U = iterate.X, iterate.U
        # the discrete recursion is the Euler discretisation of the Lyapunov
        # differential equation, so the injected noise scales with the step
        W3 = cfg.ts * cfg.W3()
        Sigma = cfg.Sigma0()
        sig = np.empty((self.N + 1, NX, NX))
        bo = np.empty(self.N + 1)
        Ads = dyn.discrete_jacobians_A_batch(X[:self.N], U, cfg.ts, self.vp, self.tp)
        for j in range(self.N + 1):
            sig[j] = Sigma
            g = gg_grad_frozen(X[j], self._axm[j], cfg)
            bo[j] = backoff(g, Sigma)
            if j < self.N:
                Sigma = propagate_discrete(Sigma, Ads[j], self._Bw, W3)
        if not (np.all(np.isfinite(sig)) and np.all(np.isfinite(bo))):
            # a degenerate trajectory (failed solve) can overflow the
            # recursion; keep the previous back-offs rather than poisoning
            # the next solve with non-finite bounds
            self.psd_drift = np.inf
            return
        self.backoffs = bo
        self.sigma_traj = sig
        w_min = np.linalg.eigvalsh(sig[-1]).min()
        self.psd_drift = max(0.0, -float(w_min))

    def _make_result(self, u0, stats) -> ControllerStepResult:
        res = super()._make_result(u0, stats)
        res.backoffs = self.backoffs.copy()
        res.sigma_traj = None if self.sigma_traj is None else self.sigma_traj.copy()
        return res


class RobustifiedNmpc(_NmpcBase):
    """Covariance matrices as decision variables (44-dimensional nodes).

    Each shooting node carries [x; vech(Sigma)]; the covariance follows the
    continuous Lyapunov differential equation integrated jointly with the
    state, and the gg rows are tightened by the smoothed back-off evaluated on
    the decision-variable covariance.
    """

    node_dim = NX + NV

    def __init__(self, cfg, vp, tp):
        self._Bw = np.zeros((NX, NW))
        for col, row in enumerate(dyn.W_ROWS):
            self._Bw[row, col] = 1.0
        self._Qw = None  # B W B', set before spec build uses it
        super().__init__(cfg, vp, tp)
        self._Qw = self._Bw @ cfg.W3() @ self._Bw.T
        self._fd_h = 1e-6

    # -- augmented dynamics -------------------------------------------------

    def _aug_step_batch(self, z: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Joint RK4 step of [x; vech(Sigma)] over Ts, batched over columns."""
        cfg = self.cfg
        dt = cfg.ts
        x = z[:NX]
        Sig = unvech(z[NX:])          # (8, 8, K)
        Qw = self._Qw if self._Qw is not None else self._Bw @ cfg.W3() @ self._Bw.T

        ks_x = []
        ks_S = []
        xi, Si = x, Sig
        coeffs = (0.5 * dt, 0.5 * dt, dt)
        for i in range(4):
            fi = dyn.continuous_dynamics(xi, u, self.vp, self.tp)
            Ai = self._jac_batch(xi, u)
            Phi = (np.einsum("ijk,jlk->ilk", Ai, Si)
                   + np.einsum("ijk,ljk->ilk", Si, Ai)
                   + Qw[:, :, None])
            ks_x.append(fi)
            ks_S.append(Phi)
            if i < 3:
                xi = x + coeffs[i] * fi
                Si = Sig + coeffs[i] * Phi
        x_next = x + (dt / 6.0) * (ks_x[0] + 2 * ks_x[1] + 2 * ks_x[2] + ks_x[3])
        S_next = Sig + (dt / 6.0) * (ks_S[0] + 2 * ks_S[1] + 2 * ks_S[2] + ks_S[3])
        S_next = 0.5 * (S_next + np.swapaxes(S_next, 0, 1))
        out = np.empty_like(z)
        out[:NX] = x_next
        out[NX:] = S_next[_TRIL]
        return out

    def _jac_batch(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Continuous state Jacobians for a batch of states, shape (8,8,K)."""
        K = x.shape[1]
        h = 1e-100
        xs = np.repeat(x[:, None, :], NX, axis=1).astype(complex)
        xs += 1j * h * np.eye(NX)[:, :, None]
        us = np.repeat(u[:, None, :], NX, axis=1)
        dxs = dyn.continuous_dynamics(xs.reshape(NX, NX * K),
                                      us.reshape(NU, NX * K), self.vp, self.tp)
        return (np.imag(dxs) / h).reshape(NX, NX, K)

    def _dyn_step(self, z, u):
        return self._aug_step_batch(np.asarray(z, dtype=float)[:, None],
                                    np.asarray(u, dtype=float)[:, None])[:, 0]

    def _dyn_jac(self, z, u):
        """Central finite differences of the augmented step, batched."""
        z = np.asarray(z, dtype=float)
        u = np.asarray(u, dtype=float)
        n = self.node_dim
        nd = n + NU
        h = self._fd_h * np.maximum(1.0, np.concatenate([np.abs(z), np.abs(u)]))
        Z = np.repeat(z[:, None], 2 * nd, axis=1)
        Uu = np.repeat(u[:, None], 2 * nd, axis=1)
        for i in range(n):
            Z[i, i] += h[i]
            Z[i, nd + i] -= h[i]
        for i in range(NU):
            Uu[i, n + i] += h[n + i]
            Uu[i, nd + n + i] -= h[n + i]
        F = self._aug_step_batch(Z, Uu)
        J = (F[:, :nd] - F[:, nd:]) / (2.0 * h)
        return J[:, :n], J[:, n:]

    # -- spec pieces specialized to the augmented node ----------------------

    def _build_spec(self) -> OcpSpec:
        spec = super()._build_spec()
        n_x = self.node_dim
        Jx = np.zeros((6, n_x))
        for row, ix in enumerate((0, 1, IX_PSI, IX_VLON)):
            Jx[row, ix] = 1.0
        Ju = np.zeros((6, NU))
        Ju[4, 0] = 1.0
        Ju[5, 1] = 1.0
        Je = Jx[:4]
        spec.output_jac = lambda x, u: (Jx, Ju)
        spec.terminal_jac = lambda x: Je
        return spec

    def _gg_value(self, z, u, k):
        x = z[:NX]
        Sig = unvech(z[NX:])
        g = gg_grad_frozen(x, self._axm[k], self.cfg)
        quad = max(float(g @ Sig @ g), 0.0)
        bo = np.sqrt(quad + BACKOFF_EPS) - np.sqrt(BACKOFF_EPS)
        return gg_value_frozen(x, self._axm[k], self.cfg) + bo

    def _gg_grad(self, z, u, k):
        x = z[:NX]
        Sig = unvech(z[NX:])
        g = gg_grad_frozen(x, self._axm[k], self.cfg)
        Hh = gg_hess_frozen(x, self._axm[k], self.cfg)
        quad = max(float(g @ Sig @ g), 0.0)
        r = np.sqrt(quad + BACKOFF_EPS)
        gz = np.zeros(self.node_dim)
        gz[:NX] = g + (Hh @ (Sig @ g)) / r
        outer = np.outer(g, g) / (2.0 * r)
        gz[NX:] = (outer * _VECH_DOUBLE_MAT)[_TRIL]
        return gz, None

    def _augment_x0(self, measured: np.ndarray) -> np.ndarray:
        return np.concatenate([measured, vech(self.cfg.Sigma0())])

    def _lift_states(self, X: np.ndarray) -> np.ndarray:
        """Attach a covariance trajectory propagated along the cold-start states."""
        Z = np.zeros((self.N + 1, self.node_dim))
        Z[:, :NX] = X
        Z[0, NX:] = vech(self.cfg.Sigma0())
        for k in range(self.N):
            Z[k + 1] = self._aug_step_batch(Z[k][:, None],
                                            np.zeros((NU, 1)))[:, 0]
            Z[k + 1, :NX] = X[k + 1]
        return Z

    def sigma_trajectory(self) -> np.ndarray | None:
        if self.iterate is None:
            return None
        return unvech(self.iterate.X[:, NX:].T).transpose(2, 0, 1)

    def stage_backoffs(self) -> np.ndarray | None:
        """Back-off values embedded in the current solution's gg rows."""
        if self.iterate is None:
            return None
        out = np.empty(self.N + 1)
        for k in range(self.N + 1):
            z = self.iterate.X[k]
            g = gg_grad_frozen(z[:NX], self._axm[k], self.cfg)
            Sig = unvech(z[NX:])
            quad = max(float(g @ Sig @ g), 0.0)
            out[k] = np.sqrt(quad + BACKOFF_EPS) - np.sqrt(BACKOFF_EPS)
        return out

    def _make_result(self, u0, stats) -> ControllerStepResult:
        res = super()._make_result(u0, stats)
        res.sigma_traj = self.sigma_trajectory()
        res.backoffs = self.stage_backoffs()
        return res


# doubling matrix for the vech gradient (off-diagonal entries appear twice)
_VECH_DOUBLE_MAT = 2.0 - np.eye(NX)


CONTROLLER_NAMES = ("nominal", "robustified", "r2nmpc", "tube")


def make_controller(name: str, cfg: ControllerConfig,
                    vp: VehicleParams, tp: TireParams) -> _NmpcBase:
    """Factory keyed by the CLI controller names."""
    table = {
        "nominal": NominalNmpc,
        "robustified": RobustifiedNmpc,
        "r2nmpc": ReducedRobustNmpc,
        "tube": TubeNmpc,
    }
    if name not in table:
        raise ValueError(f"unknown controller {name!r}; choose from {CONTROLLER_NAMES}")
    return table[name](cfg, vp, tp)
