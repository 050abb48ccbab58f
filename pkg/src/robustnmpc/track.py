"""Closed-circuit reference generation.

A centerline is assembled from straight / clothoid / circular-arc segments
(G1-continuous by construction), profiled with a physically consistent
velocity profile under lateral and velocity-dependent longitudinal
acceleration limits, and sampled into per-step reference windows for the
controllers.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

CSV_HEADER = "s,x,y,psi,kappa,v_ref,t_ref"

#: shaping margins keeping the profiled trajectory strictly inside the gg
#: disc; sized so a tracking controller retains authority at the corner apex
#: instead of saturating the acceleration-potential constraint
LAT_MARGIN = 0.90
AX_MARGIN = 0.85
JERK_REF = 0.4   # m/s^3, rate limit of the reference acceleration schedule


@dataclass(frozen=True)
class TrackSpec:
    """Geometry parameters of the synthetic circuits.

    ``rounded_rect`` is a point-symmetric circuit: two pairs of equal straights
    joined by four identical clothoid-arc-clothoid corners, which closes the
    loop exactly. ``circle`` is the constant-curvature special case.
    """

    kind: str = "rounded_rect"
    straight_a: float = 550.0     # long straights (two of them), m
    straight_b: float = 150.0     # short straights, m
    corner_radius: float = 35.0   # arc radius inside each 90-degree corner, m
    clothoid_len: float = 20.0    # curvature ramp length on each corner side, m
    radius: float = 50.0          # circle kind only
    ds: float = 1.0               # sample spacing, m
    jitter: float = 0.0           # relative, applied pairwise (keeps symmetry)


@dataclass
class Centerline:
    """Sampled closed path: arrays s, x, y, psi (unwrapped), kappa."""

    s: np.ndarray
    x: np.ndarray
    y: np.ndarray
    psi: np.ndarray
    kappa: np.ndarray

    @property
    def length(self) -> float:
        return float(self.s[-1])


@dataclass
class ReferenceTrajectory:
    """Velocity-profiled closed reference path.

    ``psi`` is stored unwrapped (continuous, gains 2*pi per lap); ``t_ref`` is
    the cumulative reference time of a vehicle tracking ``v_ref`` exactly.
    """

    s: np.ndarray
    x: np.ndarray
    y: np.ndarray
    psi: np.ndarray
    kappa: np.ndarray
    v_ref: np.ndarray
    t_ref: np.ndarray

    @property
    def length(self) -> float:
        return float(self.s[-1])

    @property
    def lap_time(self) -> float:
        return float(self.t_ref[-1])

    def validate(self, ay_max: float = 5.866, v_max: float = 37.5) -> None:
        n = len(self.s)
        for name in ("x", "y", "psi", "kappa", "v_ref", "t_ref"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"column {name} has inconsistent length")
        if n < 4:
            raise ValueError("trajectory too short")
        if np.any(np.diff(self.s) <= 0):
            raise ValueError("arc length s must be strictly increasing")
        gap = np.hypot(self.x[0] - self.x[-1], self.y[0] - self.y[-1])
        if gap > 1e-6:
            raise ValueError(f"trajectory is not closed (seam gap {gap:.3e} m)")
        if np.any(self.v_ref <= 0.0) or np.any(self.v_ref > v_max + 1e-9):
            raise ValueError("v_ref must lie in (0, v_max]")
        lat = np.abs(self.kappa) * self.v_ref ** 2
        if np.any(lat > ay_max + 1e-9):
            raise ValueError("profile exceeds the lateral acceleration limit")
        if np.any(np.diff(self.t_ref) <= 0):
            raise ValueError("t_ref must be strictly increasing")

    # -- projection ---------------------------------------------------------

    def project(self, x: float, y: float, hint: int | None = None,
                window: int = 40) -> tuple[float, int]:
        """Arc length of the nearest path point and its sample index.

        With a ``hint`` (previous match index) only a local neighborhood is
        searched, which keeps the match from jumping across the circuit.
        """
        n = len(self.s) - 1  # last sample duplicates the first
        if hint is None:
            idx = int(np.argmin((self.x[:n] - x) ** 2 + (self.y[:n] - y) ** 2))
        else:
            cand = (np.arange(hint - window, hint + window + 1)) % n
            d2 = (self.x[cand] - x) ** 2 + (self.y[cand] - y) ** 2
            idx = int(cand[np.argmin(d2)])
        # refine onto the better of the two adjacent segments
        best_s = self.s[idx]
        best_d2 = (self.x[idx] - x) ** 2 + (self.y[idx] - y) ** 2
        for j0 in (idx - 1, idx):
            j0m = j0 % n
            j1 = (j0 + 1) % n
            px, py = self.x[j0m], self.y[j0m]
            tx = self.x[j1] - px
            ty = self.y[j1] - py
            if j1 == 0:
                tx = self.x[-1] - px
                ty = self.y[-1] - py
            seg2 = tx * tx + ty * ty
            if seg2 <= 0:
                continue
            t = np.clip(((x - px) * tx + (y - py) * ty) / seg2, 0.0, 1.0)
            qx, qy = px + t * tx, py + t * ty
            d2 = (qx - x) ** 2 + (qy - y) ** 2
            if d2 < best_d2 - 1e-15:
                best_d2 = d2
                ds_seg = self.s[j0m + 1] - self.s[j0m] if j0m + 1 < len(self.s) \
                    else self.s[-1] - self.s[j0m]
                best_s = self.s[j0m] + t * ds_seg
        return float(best_s % self.length), idx

    def interp_at_time(self, t: float) -> np.ndarray:
        """(x, y, psi, v) at reference time t, continued across lap seams."""
        T = self.lap_time
        laps = np.floor(t / T)
        tm = t - laps * T
        out = np.empty(4)
        out[0] = np.interp(tm, self.t_ref, self.x)
        out[1] = np.interp(tm, self.t_ref, self.y)
        out[2] = np.interp(tm, self.t_ref, self.psi) \
            + laps * (self.psi[-1] - self.psi[0])
        out[3] = np.interp(tm, self.t_ref, self.v_ref)
        return out

    def time_at_s(self, s: float) -> float:
        return float(np.interp(s % self.length, self.s, self.t_ref))


@dataclass
class ReferenceWindow:
    """N+1 reference tuples (x, y, psi, v) at Ts spacing in reference time."""

    points: np.ndarray   # (N+1, 4)
    times: np.ndarray    # (N+1,)
    s0: float
    match_index: int

    def __post_init__(self):
        if np.abs(np.diff(self.points[:, 2])).max(initial=0.0) > np.pi:
            raise ValueError("reference heading must be unwrapped")


def reference_window(traj: ReferenceTrajectory, state, N: int, ts: float,
                     hint: int | None = None) -> ReferenceWindow:
    """Project the vehicle onto the path, then sample N+1 references forward.

    ``state`` needs attributes/items (x_pos, y_pos, psi); arrays of length >= 3
    are accepted as (x, y, psi, ...). The window headings are shifted by whole
    turns to land within pi of the vehicle's yaw.
    """
    if hasattr(state, "x_pos"):
        px, py, yaw = state.x_pos, state.y_pos, state.psi
    else:
        arr = np.asarray(state, dtype=float)
        px, py, yaw = arr[0], arr[1], arr[2]
    s0, idx = traj.project(px, py, hint=hint)
    t0 = traj.time_at_s(s0)
    times = t0 + ts * np.arange(N + 1)
    pts = np.stack([traj.interp_at_time(t) for t in times])
    two_pi = 2.0 * np.pi
    shift = np.round((yaw - pts[0, 2]) / two_pi) * two_pi
    pts[:, 2] += shift
    return ReferenceWindow(pts, times, s0, idx)


# ---------------------------------------------------------------------------
# geometry construction

def _integrate_segment(s_local: np.ndarray, kappa: np.ndarray, pose):
    """March a sampled curvature profile from a start pose.

    Heading is the exact trapezoidal integral of the (piecewise-linear)
    curvature; positions use fine trapezoidal integration of the heading.
    """
    x0, y0, psi0 = pose
    psi = psi0 + np.concatenate([[0.0], np.cumsum(
        0.5 * (kappa[1:] + kappa[:-1]) * np.diff(s_local))])
    cx = np.cos(psi)
    sx = np.sin(psi)
    dx = np.concatenate([[0.0], np.cumsum(0.5 * (cx[1:] + cx[:-1]) * np.diff(s_local))])
    dy = np.concatenate([[0.0], np.cumsum(0.5 * (sx[1:] + sx[:-1]) * np.diff(s_local))])
    return x0 + dx, y0 + dy, psi


def _corner_profile(radius: float, clothoid_len: float, ds: float):
    """Curvature profile of one 90-degree clothoid-arc-clothoid corner."""
    k_max = 1.0 / radius
    arc_len = np.pi / (2.0 * k_max) - clothoid_len
    if arc_len < 0.0:
        raise ValueError(
            "infeasible track spec: cannot close the loop "
            f"(clothoid length {clothoid_len} m exceeds the 90-degree heading "
            f"budget of radius {radius} m corners)")
    h = ds / 8.0  # fine internal grid keeps position integration error ~1e-9
    s_up = np.linspace(0.0, clothoid_len, max(int(np.ceil(clothoid_len / h)), 8) + 1)
    s_arc = np.linspace(0.0, arc_len, max(int(np.ceil(arc_len / h)), 8) + 1)
    parts = [
        (s_up, k_max * s_up / clothoid_len),
        (s_arc, np.full_like(s_arc, k_max)),
        (s_up, k_max * (1.0 - s_up / clothoid_len)),
    ]
    return parts


def generate_track(spec: TrackSpec, seed: int = 0) -> Centerline:
    """Build a closed G1-continuous centerline from the geometry spec.

    Seeded jitter perturbs the straight lengths and corner radius while
    preserving the point symmetry that makes closure exact; the residual
    numerical drift (integration error, ~1e-9) is spread uniformly over arc
    length so the loop closes to machine noise.
    """
    rng = np.random.default_rng(seed)
    if spec.kind == "circle":
        n = max(int(np.ceil(2.0 * np.pi * spec.radius / spec.ds)), 16)
        s = np.linspace(0.0, 2.0 * np.pi * spec.radius, n + 1)
        th = s / spec.radius
        return Centerline(
            s=s,
            x=spec.radius * np.sin(th),
            y=spec.radius * (1.0 - np.cos(th)),
            psi=th,
            kappa=np.full(n + 1, 1.0 / spec.radius),
        )
    if spec.kind != "rounded_rect":
        raise ValueError(f"unknown track kind {spec.kind!r}")

    jit = spec.jitter * rng.uniform(-1.0, 1.0, size=3)
    a = spec.straight_a * (1.0 + jit[0])
    b = spec.straight_b * (1.0 + jit[1])
    radius = spec.corner_radius * (1.0 + jit[2])
    if a <= 0 or b <= 0 or radius <= 0:
        raise ValueError("infeasible track spec: nonpositive segment length")

    corner = _corner_profile(radius, spec.clothoid_len, spec.ds)
    h = spec.ds / 8.0

    def straight(length):
        grid = np.linspace(0.0, length, max(int(np.ceil(length / h)), 8) + 1)
        return [(grid, np.zeros_like(grid))]

    layout = (straight(a) + corner + straight(b) + corner
              + straight(a) + corner + straight(b) + corner)

    pose = (0.0, 0.0, 0.0)
    s_parts, x_parts, y_parts, psi_parts, k_parts = [], [], [], [], []
    s_off = 0.0
    for grid, kap in layout:
        xs, ys, psis = _integrate_segment(grid, kap, pose)
        s_parts.append(s_off + grid[:-1])
        x_parts.append(xs[:-1])
        y_parts.append(ys[:-1])
        psi_parts.append(psis[:-1])
        k_parts.append(kap[:-1])
        pose = (xs[-1], ys[-1], psis[-1])
        s_off += grid[-1]

    s_fine = np.concatenate(s_parts + [[s_off]])
    x_fine = np.concatenate(x_parts + [[pose[0]]])
    y_fine = np.concatenate(y_parts + [[pose[1]]])
    psi_fine = np.concatenate(psi_parts + [[pose[2]]])
    k_fine = np.concatenate(k_parts + [[0.0]])

    # spread the (tiny) numerical closure drift over arc length
    w = s_fine / s_fine[-1]
    x_fine = x_fine - w * (x_fine[-1] - x_fine[0])
    y_fine = y_fine - w * (y_fine[-1] - y_fine[0])
    psi_fine = psi_fine - w * (psi_fine[-1] - psi_fine[0] - 2.0 * np.pi)

    # resample at the requested spacing
    n_out = int(np.ceil(s_fine[-1] / spec.ds))
    s_out = np.linspace(0.0, s_fine[-1], n_out + 1)
    return Centerline(
        s=s_out,
        x=np.interp(s_out, s_fine, x_fine),
        y=np.interp(s_out, s_fine, y_fine),
        psi=np.interp(s_out, s_fine, psi_fine),
        kappa=np.interp(s_out, s_fine, k_fine),
    )


# ---------------------------------------------------------------------------
# velocity profiling

def curve_speed(kappa, ay_max: float = 5.866) -> np.ndarray:
    """Curvature-limited speed sqrt(ay_max / |kappa|), before shaping."""
    k = np.maximum(np.abs(np.asarray(kappa, dtype=float)), 1e-12)
    return np.sqrt(ay_max / k)


def _limit_schedule_jerk(s, v, v_lim, shape):
    """Bound the rate of change of the schedule acceleration (reference jerk).

    The forward/backward shaped profile switches between the drive and brake
    limits almost instantaneously; a controller that penalizes jerk cannot
    afford to follow such steps and trades them for path deviation instead.
    The acceleration history a(t) over the closed lap is smoothed with a
    zero-phase circular boxcar wide enough that |da/dt| stays near JERK_REF.
    Where the smoothed profile would exceed the lateral-limit curve, the
    pre-smoothing target is lowered there and the procedure repeated.
    """
    n = len(s)
    L = float(s[-1] - s[0])
    target = v.copy()
    dt_grid = 0.05
    v_new = target
    for _ in range(10):
        seg_dt = np.diff(s) / (0.5 * (target[:-1] + target[1:]))
        t = np.concatenate([[0.0], np.cumsum(seg_dt)])
        m = max(int(t[-1] / dt_grid), 16)
        tg = np.arange(m) * dt_grid
        vt = np.interp(tg, t, target)
        a = np.gradient(vt, dt_grid)
        w = max(int(round((a.max() - a.min()) / JERK_REF / dt_grid)), 1)
        kern = np.zeros(m)
        kern[:w] = 1.0 / w
        a_s = np.real(np.fft.ifft(np.fft.fft(a) * np.fft.fft(kern)))
        a_s = np.roll(a_s, -(w // 2))
        a_s -= a_s.mean()  # exact closure over the lap
        v_t = np.concatenate([[0.0], np.cumsum(a_s[:-1]) * dt_grid])
        v_t += vt.mean() - v_t.mean()
        v_t = np.maximum(v_t, 1.0)
        v_t *= L / (np.sum(v_t) * dt_grid)  # keep the lap length exact
        s_t = s[0] + np.concatenate([[0.0], np.cumsum(v_t[:-1]) * dt_grid])
        v_new = np.interp(s, s_t, v_t)
        v_new[-1] = v_new[0]
        excess = v_new - v_lim
        if excess.max() < 1e-3:
            break
        target = shape(target - 1.2 * np.maximum(excess, 0.0))
    return np.minimum(v_new, v_lim)


def velocity_profile(center: Centerline, limits=None,
                     vehicle=None) -> ReferenceTrajectory:
    """Forward/backward-shaped speed profile over a closed centerline.

    ``limits`` provides ay_max, v_max and ax_max(v, sign) (a controller config
    works); defaults to the standard interface limits. The profile keeps the
    acceleration-potential value (dv/dt / ax_max)^2 + (kappa v^2 / ay_max)^2
    strictly below one via small shaping margins.

    The acceleration bound of the limits applies to the *drive* acceleration;
    the achievable dv/dt is smaller by the aero-drag and rolling-resistance
    losses of ``vehicle`` (defaulted), which the forward pass budgets for so
    the schedule stays reachable without saturating the drive limit.
    """
    if limits is None:
        from .controllers import ControllerConfig
        limits = ControllerConfig()
    if vehicle is None:
        from .dynamics import VehicleParams
        vehicle = VehicleParams()
    ay = limits.ay_max
    v_max = limits.v_max
    kap = np.abs(center.kappa)
    n = len(center.s)
    ds = np.diff(center.s)

    v = np.minimum(v_max, LAT_MARGIN * curve_speed(center.kappa, ay))

    def resistance(vi):
        # drag + rolling losses per unit mass, same model as the plant
        v_kmh = 3.6 * vi
        fr = (vehicle.fr0 + vehicle.fr1 * (v_kmh / 100.0)
              + vehicle.fr4 * (v_kmh / 100.0) ** 4)
        f_aero = 0.5 * vehicle.rho * vehicle.S * vehicle.C_d * vi * vi
        return fr * vehicle.g + f_aero / vehicle.m

    def avail(vi, ki, sign):
        lat = min(ki * vi * vi / ay, 1.0)
        drive = AX_MARGIN * limits.ax_max(vi, sign) * np.sqrt(max(0.0, 1.0 - lat * lat))
        if sign > 0.0:
            drive = max(drive - resistance(vi), 0.05)
        return drive

    def shape(v):
        # cyclic passes until the profile settles (closed lap couples the seam)
        for _ in range(6):
            changed = False
            for i in range(n - 1):  # forward, acceleration limit
                cap = np.sqrt(v[i] ** 2 + 2.0 * avail(v[i], kap[i], +1.0) * ds[i])
                if cap < v[i + 1] - 1e-12:
                    v[i + 1] = cap
                    changed = True
            v[0] = v[-1]
            for i in range(n - 1, 0, -1):  # backward, deceleration limit
                cap = np.sqrt(v[i] ** 2 + 2.0 * avail(v[i], kap[i], -1.0) * ds[i - 1])
                if cap < v[i - 1] - 1e-12:
                    v[i - 1] = cap
                    changed = True
            v[-1] = v[0]
            if not changed:
                break
        return v

    v_lim = v.copy()
    v = shape(v.copy())
    v = _limit_schedule_jerk(center.s, v, v_lim, shape)

    dt = 2.0 * ds / (v[:-1] + v[1:])
    t_ref = np.concatenate([[0.0], np.cumsum(dt)])
    traj = ReferenceTrajectory(center.s.copy(), center.x.copy(), center.y.copy(),
                               center.psi.copy(), center.kappa.copy(), v, t_ref)
    traj.validate(ay_max=ay, v_max=v_max)
    return traj


# ---------------------------------------------------------------------------
# CSV persistence

def benchmark_track_v1() -> ReferenceTrajectory:
    """The bundled benchmark circuit (checked-in CSV)."""
    from importlib import resources
    ref = resources.files("robustnmpc") / "data" / "benchmark_track_v1.csv"
    with ref.open() as fh:
        return load_csv(fh)


def save_csv(traj: ReferenceTrajectory, path) -> None:
    """Write the trajectory with the fixed column schema (12 significant digits)."""
    with open(path, "w", newline="\n") as fh:
        fh.write(CSV_HEADER + "\n")
        cols = (traj.s, traj.x, traj.y, traj.psi, traj.kappa, traj.v_ref, traj.t_ref)
        for row in zip(*cols):
            fh.write(",".join(f"{val:.11e}" for val in row) + "\n")


def load_csv(path) -> ReferenceTrajectory:
    """Read and validate a trajectory CSV; parse errors carry line numbers."""
    if isinstance(path, io.TextIOBase):
        lines = path.read().splitlines()
    else:
        with open(path) as fh:
            lines = fh.read().splitlines()
    if not lines or lines[0].strip() != CSV_HEADER:
        raise ValueError(f"{path}: line 1: expected header {CSV_HEADER!r}")
    data = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 7:
            raise ValueError(f"{path}: line {ln}: expected 7 columns, got {len(parts)}")
        try:
            data.append([float(p) for p in parts])
        except ValueError as exc:
            raise ValueError(f"{path}: line {ln}: {exc}") from None
    arr = np.array(data)
    if arr.size == 0:
        raise ValueError(f"{path}: no data rows")
    traj = ReferenceTrajectory(*(arr[:, i].copy() for i in range(7)))
    traj.validate()
    return traj
