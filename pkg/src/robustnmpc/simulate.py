"""Closed-loop simulation harness.

The plant (same single-track model as the controllers) integrates at a fine
step; every control period the true state is disturbed by a uniform sample
from an ellipsoidal set, passed through a per-state moving-average filter and
handed to the controller. The disturbance stream is a pure function of the
seed, so different controllers compared under one seed see identical noise.
"""

from __future__ import annotations

import hashlib
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from . import dynamics as dyn
from .dynamics import NX, NU, VehicleParams, TireParams
from .controllers import ControllerConfig, gg_constraint
from .ellipsoid import sample_uniform
from .track import ReferenceTrajectory, reference_window

#: columns of the per-plant-step CSV log
CSV_HEADER = ("step,t,x,y,psi,vlon,vlat,psidot,delta,a,"
              "meas_x,meas_y,meas_psi,meas_vlon,meas_vlat,meas_psidot,"
              "meas_delta,meas_a,u_j,u_omega,h_true,lat_dev,solve_ms,status")

#: consecutive controller failures tolerated before the run aborts
MAX_CONSECUTIVE_FAILURES = 5

#: tolerance on the gg value before a sample counts as a violation
VIOLATION_TOL = 1e-9


@dataclass(frozen=True)
class SimConfig:
    """Timing, disturbance set and filter of the closed-loop experiment."""

    t_sim: float = 120.0
    plant_dt: float = 0.02
    ts: float = 0.08
    seed: int = 0
    # ellipsoidal disturbance on the first seven states (x, y, psi, v_lon,
    # v_lat, psi_dot, delta_f); the acceleration state is undisturbed
    w_sim_diag: tuple = (0.8, 0.8, 0.1, 1.1, 0.2, 0.05, 0.01)
    # trailing moving-average window per state
    filter_windows: tuple = (1, 1, 4, 2, 2, 3, 4, 2)

    def __post_init__(self):
        if self.plant_dt <= 0 or self.t_sim <= 0:
            raise ValueError("t_sim and plant_dt must be positive")
        ratio = self.ts / self.plant_dt
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("ts must be an integer multiple of plant_dt")
        if len(self.filter_windows) != NX:
            raise ValueError(f"filter_windows must have {NX} entries")
        if any(w < 1 for w in self.filter_windows):
            raise ValueError("filter windows must be >= 1")
        if len(self.w_sim_diag) != 7:
            raise ValueError("w_sim_diag covers the 7 disturbed states")
        if any(w < 0 for w in self.w_sim_diag):
            raise ValueError("w_sim_diag must be nonnegative")

    @property
    def substeps(self) -> int:
        return int(round(self.ts / self.plant_dt))

    @property
    def n_plant_steps(self) -> int:
        return int(round(self.t_sim / self.plant_dt))

    @property
    def n_control_steps(self) -> int:
        return -(-self.n_plant_steps // self.substeps)

    def W_sim(self) -> np.ndarray:
        return np.diag(self.w_sim_diag)


@dataclass
class SimLog:
    """Per-plant-step trajectories plus per-control-step solver bookkeeping."""

    config: SimConfig
    t: np.ndarray                  # (n,) time at the start of each plant step
    X: np.ndarray                  # (n, 8) true states
    X_meas: np.ndarray             # (n, 8) measurement used in that period
    X_filt: np.ndarray             # (n, 8) filtered state fed to the controller
    U: np.ndarray                  # (n, 2) applied inputs
    h_true: np.ndarray             # (n,) gg value on the true state
    lat_dev: np.ndarray            # (n,) signed lateral deviation, m
    solve_ms: np.ndarray           # (n,) solve time of the governing control step
    status: list                   # (n,) solver status strings
    control_step: np.ndarray       # (n,) index of the governing control step
    noise: np.ndarray              # (n_ctrl, 7) injected disturbance stream
    backoffs: np.ndarray | None = None  # (n_ctrl, N+1) when the controller has them
    aborted: bool = False

    @property
    def n_steps(self) -> int:
        return len(self.t)

    def noise_hash(self) -> str:
        """SHA-256 of the raw disturbance stream (controller-independent)."""
        return hashlib.sha256(np.ascontiguousarray(self.noise).tobytes()).hexdigest()

    def control_rows(self) -> np.ndarray:
        """Indices of the plant rows that start a control period."""
        return np.flatnonzero(np.diff(self.control_step, prepend=-1) != 0)


@dataclass(frozen=True)
class Metrics:
    """Aggregate closed-loop quality numbers of one run."""

    dev_mean: float
    dev_p25: float
    dev_p75: float
    dev_max: float
    violations: int            # control-step cadence (headline)
    violation_rate: float
    violations_plant: int      # plant-step cadence
    violation_rate_plant: float
    solve_ms_mean: float
    solve_ms_max: float
    freq_mean_hz: float
    steps: int
    aborted: bool

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "dev_mean", "dev_p25", "dev_p75", "dev_max",
            "violations", "violation_rate",
            "violations_plant", "violation_rate_plant",
            "solve_ms_mean", "solve_ms_max", "freq_mean_hz",
            "steps", "aborted")}


def disturbance_stream(cfg: SimConfig) -> np.ndarray:
    """The (n_control_steps, 7) noise stream, a pure function of the seed."""
    rng = np.random.default_rng(cfg.seed)
    return sample_uniform(cfg.W_sim(), rng, size=cfg.n_control_steps).T


def moving_average(history: list, windows) -> np.ndarray:
    """Trailing per-state mean over the last ``windows[i]`` measurements.

    Early in the run, when fewer measurements exist than the window asks for,
    the mean runs over what is available.
    """
    if not history:
        raise ValueError("moving_average needs at least one measurement")
    out = np.empty(NX)
    n = len(history)
    for i, w in enumerate(windows):
        take = min(int(w), n)
        out[i] = np.mean([history[-j - 1][i] for j in range(take)])
    return out


def lateral_deviation(state, traj: ReferenceTrajectory, hint: int = 0):
    """Signed perpendicular distance to the path, left of the tangent positive.

    Returns ``(deviation, index)`` where the index can seed the next call's
    local projection search.
    """
    x = np.asarray(state, dtype=float)
    px, py = x[0], x[1]
    s_star, idx = traj.project(px, py, hint=hint)
    xp = np.interp(s_star, traj.s, traj.x)
    yp = np.interp(s_star, traj.s, traj.y)
    # tangent from the curvature-consistent heading at s*
    j = min(idx, len(traj.s) - 2)
    frac = (s_star - traj.s[j]) / max(traj.s[j + 1] - traj.s[j], 1e-12)
    frac = min(max(frac, 0.0), 1.0)
    psi_p = traj.psi[j] + frac * _wrap_angle(traj.psi[j + 1] - traj.psi[j])
    dev = -np.sin(psi_p) * (px - xp) + np.cos(psi_p) * (py - yp)
    return float(dev), idx


def _wrap_angle(a: float) -> float:
    return (a + np.pi) % (2.0 * np.pi) - np.pi


def run_closed_loop(controller, traj: ReferenceTrajectory, cfg: SimConfig,
                    vp: VehicleParams | None = None,
                    tp: TireParams | None = None) -> SimLog:
    """Simulate one controller over ``cfg.t_sim`` seconds on the trajectory.

    The vehicle starts on the path at s = 0 with the reference speed. Every
    control period the measurement is the true state plus one ellipsoidal
    noise sample (acceleration undisturbed); the filtered measurement drives
    the controller, whose first input is held over the plant substeps.
    """
    vp = vp or VehicleParams()
    tp = tp or TireParams()
    ccfg: ControllerConfig = controller.cfg
    if abs(ccfg.ts - cfg.ts) > 1e-12:
        raise ValueError("controller and simulation sampling periods differ")
    n = cfg.n_plant_steps
    sub = cfg.substeps
    noise = disturbance_stream(cfg)

    x = np.zeros(NX)
    x[0], x[1], x[2], x[3] = traj.x[0], traj.y[0], traj.psi[0], traj.v_ref[0]

    t_arr = np.arange(n) * cfg.plant_dt
    X = np.zeros((n, NX))
    Xm = np.zeros((n, NX))
    Xf = np.zeros((n, NX))
    U = np.zeros((n, NU))
    h_arr = np.zeros(n)
    dev_arr = np.zeros(n)
    ms_arr = np.zeros(n)
    status = [""] * n
    cstep = np.zeros(n, dtype=int)
    backoffs = None

    history: list = []
    hint = 0
    dev_hint = 0
    u = np.zeros(NU)
    meas = x.copy()
    filt = x.copy()
    ms = 0.0
    st = ""
    consecutive_bad = 0
    aborted = False
    n_done = n

    for i in range(n):
        j = i // sub
        if i % sub == 0:
            meas = x.copy()
            meas[:7] += noise[j]
            history.append(meas)
            filt = moving_average(history, cfg.filter_windows)
            win = reference_window(traj, filt, ccfg.N, ccfg.ts, hint=hint)
            hint = win.match_index
            res = controller.step(filt, win)
            u = np.asarray(res.u0, dtype=float)
            ms = res.stats.solve_time * 1e3
            st = res.stats.status
            if res.backoffs is not None:
                if backoffs is None:
                    backoffs = np.zeros((cfg.n_control_steps, len(res.backoffs)))
                backoffs[j] = res.backoffs
            if res.stats.ok:
                consecutive_bad = 0
            else:
                consecutive_bad += 1
                if consecutive_bad > MAX_CONSECUTIVE_FAILURES:
                    aborted = True
                    n_done = i
                    break

        X[i] = x
        Xm[i] = meas
        Xf[i] = filt
        U[i] = u
        h_arr[i] = gg_constraint(x, ccfg)
        dev_arr[i], dev_hint = lateral_deviation(x, traj, hint=dev_hint)
        ms_arr[i] = ms
        status[i] = st
        cstep[i] = j

        x = dyn.integrate_rk4(x, u, cfg.plant_dt, vp, tp)

    sl = slice(0, n_done)
    return SimLog(cfg, t_arr[sl], X[sl], Xm[sl], Xf[sl], U[sl], h_arr[sl],
                  dev_arr[sl], ms_arr[sl], status[:n_done], cstep[sl],
                  noise, backoffs, aborted)


def compute_metrics(log: SimLog) -> Metrics:
    """Aggregate a log: deviation quartiles, violations on both cadences,
    solve-time statistics. Percentiles use linear interpolation."""
    if log.n_steps == 0:
        raise ValueError("empty simulation log")
    dev = np.abs(log.lat_dev)
    rows = log.control_rows()
    h_ctrl = log.h_true[rows]
    viol = int(np.sum(h_ctrl > 1.0 + VIOLATION_TOL))
    viol_plant = int(np.sum(log.h_true > 1.0 + VIOLATION_TOL))
    ms = log.solve_ms[rows]
    ms_mean = float(ms.mean())
    return Metrics(
        dev_mean=float(dev.mean()),
        dev_p25=float(np.percentile(dev, 25, method="linear")),
        dev_p75=float(np.percentile(dev, 75, method="linear")),
        dev_max=float(dev.max()),
        violations=viol,
        violation_rate=viol / len(rows),
        violations_plant=viol_plant,
        violation_rate_plant=viol_plant / log.n_steps,
        solve_ms_mean=ms_mean,
        solve_ms_max=float(ms.max()),
        freq_mean_hz=1e3 / ms_mean if ms_mean > 0 else float("inf"),
        steps=log.n_steps,
        aborted=log.aborted,
    )


def _atomic_write(path: str, text: str) -> None:
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_log_csv(log: SimLog, path: str) -> None:
    """Write the per-plant-step log as CSV (atomic: temp file + rename)."""
    lines = [CSV_HEADER]
    for i in range(log.n_steps):
        vals = ([f"{log.t[i]:.6f}"]
                + [f"{v:.12g}" for v in log.X[i]]
                + [f"{v:.12g}" for v in log.X_meas[i]]
                + [f"{v:.12g}" for v in log.U[i]]
                + [f"{log.h_true[i]:.12g}", f"{log.lat_dev[i]:.12g}",
                   f"{log.solve_ms[i]:.6g}", log.status[i]])
        lines.append(f"{i}," + ",".join(vals))
    _atomic_write(path, "\n".join(lines) + "\n")


def save_metrics(metrics: Metrics, path: str) -> None:
    """Flat key=value metrics summary (atomic write)."""
    lines = [f"{k}={v}" for k, v in metrics.as_dict().items()]
    _atomic_write(path, "\n".join(lines) + "\n")
