"""Multiple-shooting OCP machinery: Gauss-Newton linearization, condensing to
a dense QP, and the single-iteration real-time SQP step.

The spec object is controller-agnostic: dynamics, output maps and nonlinear
inequality rows are callbacks, so the same machinery drives the nominal
vehicle problem, its covariance-augmented variant, and small test problems.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .qp import (
    solve_dense_qp, kkt_residuals,
    STATUS_OK, STATUS_MAX_ITER, STATUS_INFEASIBLE, STATUS_NAN, MAX_QP_ITER,
)

#: dynamics defect tolerance considered "converged" for a warm iterate
DEFECT_TOL = 1e-6

#: L1 penalty per unit of slack on softened nonlinear rows
SOFT_L1_WEIGHT = 1e4
#: small quadratic slack regularization keeping the condensed Hessian PD
SOFT_L2_WEIGHT = 1e-6


@dataclass
class NlRow:
    """One nonlinear inequality row h(x, u) <= ub_k with per-stage bounds."""

    name: str
    value: Callable  # (x, u_or_None, k) -> float
    grad: Callable   # (x, u_or_None, k) -> (gx, gu_or_None)
    ub: np.ndarray   # (N+1,) adjustable upper bounds
    soft: bool = True
    terminal: bool = True
    l1_weight: float = SOFT_L1_WEIGHT
    #: optional state-space Hessian of the row, (x, u_or_None, k) -> (n_x, n_x).
    #: When provided, its PSD part weighted by the (lagged) row multiplier is
    #: added to the stage Hessian; without this curvature the full-step
    #: iteration diverges once the row is active with sizable multipliers.
    hess: Callable | None = None


@dataclass
class OcpSpec:
    """Multiple-shooting problem definition (see module docstring)."""

    N: int
    dt: float
    n_x: int
    n_u: int
    dyn_step: Callable        # (x, u) -> x_next (discrete shooting map)
    dyn_jac: Callable         # (x, u) -> (A_d, B_d)
    output: Callable          # (x, u) -> y
    output_jac: Callable      # (x, u) -> (Jx, Ju)
    W: np.ndarray             # (ny, ny) stage weight, PSD
    terminal_output: Callable  # (x) -> ye
    terminal_jac: Callable     # (x) -> Je
    W_e: np.ndarray
    u_lb: np.ndarray          # (n_u,) or (N, n_u)
    u_ub: np.ndarray
    x_lb: np.ndarray | None = None   # (n_x,), +-inf entries are unbounded
    x_ub: np.ndarray | None = None
    rows: list[NlRow] = field(default_factory=list)
    y_ref: np.ndarray | None = None    # (N, ny), set before each solve
    y_ref_e: np.ndarray | None = None  # (ny_e,)
    #: Levenberg-Marquardt shift added to every stage Hessian block. The
    #: Gauss-Newton Hessian of a pure tracking cost carries almost no weight
    #: on tail-stage lateral states, which makes the full-step iteration
    #: divergent on stiff vehicle dynamics; a small uniform shift restores
    #: contraction without moving the KKT fixed point.
    lm_reg: float = 0.0
    #: optional curvature of the dynamics weighted by the (lagged) costate,
    #: (x, u, lam_next, k) -> (n_x, n_x) approximating lam' d2F/dx2. Its PSD
    #: part is added to the stage Hessian; like the row curvature above it
    #: only changes the Hessian model, never the KKT fixed point.
    dyn_hess: Callable | None = None

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if np.linalg.eigvalsh(np.atleast_2d(self.W)).min() < -1e-12:
            raise ValueError("stage weight W must be PSD")
        if np.linalg.eigvalsh(np.atleast_2d(self.W_e)).min() < -1e-12:
            raise ValueError("terminal weight W_e must be PSD")
        for row in self.rows:
            if np.shape(row.ub) != (self.N + 1,):
                raise ValueError(f"row {row.name}: ub must have length N+1")

    def u_bound(self, k: int):
        lb = self.u_lb[k] if np.ndim(self.u_lb) == 2 else self.u_lb
        ub = self.u_ub[k] if np.ndim(self.u_ub) == 2 else self.u_ub
        return np.asarray(lb, dtype=float), np.asarray(ub, dtype=float)


@dataclass
class SolverIterate:
    """Warm-started primal/dual trajectories of the shooting problem."""

    X: np.ndarray                     # (N+1, n_x)
    U: np.ndarray                     # (N, n_u)
    lam_dyn: np.ndarray | None = None  # (N+1, n_x)
    lam_ineq: np.ndarray | None = None  # dense-QP inequality multipliers
    slacks: np.ndarray | None = None
    lam_rows: np.ndarray | None = None  # per nonlinear row instance, build order

    def copy(self) -> "SolverIterate":
        return SolverIterate(
            self.X.copy(), self.U.copy(),
            None if self.lam_dyn is None else self.lam_dyn.copy(),
            None if self.lam_ineq is None else self.lam_ineq.copy(),
            None if self.slacks is None else self.slacks.copy(),
            None if self.lam_rows is None else self.lam_rows.copy(),
        )


@dataclass
class SolveStats:
    qp_iterations: int = 0
    kkt_residual: float = np.inf
    solve_time: float = 0.0
    status: str = STATUS_OK

    @property
    def ok(self) -> bool:
        return self.status in (STATUS_OK, STATUS_MAX_ITER)


@dataclass
class LinRow:
    """A linearized inequality row at stage k."""

    k: int
    gx: np.ndarray
    gu: np.ndarray | None
    rhs: float           # ub - h(value), before the Delta x_k offset
    soft: bool
    l1_weight: float
    name: str


@dataclass
class QpSubproblem:
    """Stage-structured Gauss-Newton QP data linearized about an iterate."""

    spec: OcpSpec
    Ad: np.ndarray      # (N, n_x, n_x)
    Bd: np.ndarray      # (N, n_x, n_u)
    resid: np.ndarray   # (N, n_x) shooting defects F(x_k,u_k) - x_{k+1}
    Hxx: np.ndarray
    Hxu: np.ndarray
    Huu: np.ndarray
    gx: np.ndarray
    gu: np.ndarray
    Hxx_e: np.ndarray
    gx_e: np.ndarray
    dx0: np.ndarray
    lin_rows: list[LinRow]
    X: np.ndarray
    U: np.ndarray
    nan_detected: bool = False


def _psd_part(M: np.ndarray) -> np.ndarray:
    """Positive-semidefinite projection (negative eigenvalues clipped)."""
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    if w[0] >= 0.0:
        return M
    return (V * np.clip(w, 0.0, None)) @ V.T


def _abs_part(M: np.ndarray) -> np.ndarray:
    """Symmetric absolute value |M| = V |w| V' (eigenvalue magnitudes kept)."""
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    if w[0] >= 0.0:
        return M
    return (V * np.abs(w)) @ V.T


def build_gauss_newton_qp(spec: OcpSpec, it: SolverIterate, x0: np.ndarray) -> QpSubproblem:
    """Linearize dynamics, cost and constraints about the iterate.

    Hessian blocks are the Gauss-Newton J' W J of the least-squares outputs;
    the initial-state equality pins x_0 to the measurement via dx0.
    """
    N, n_x, n_u = spec.N, spec.n_x, spec.n_u
    X, U = it.X, it.U
    Ad = np.empty((N, n_x, n_x))
    Bd = np.empty((N, n_x, n_u))
    resid = np.empty((N, n_x))
    ny = spec.W.shape[0]
    Hxx = np.empty((N, n_x, n_x))
    Hxu = np.empty((N, n_x, n_u))
    Huu = np.empty((N, n_u, n_u))
    gx = np.empty((N, n_x))
    gu = np.empty((N, n_u))

    for k in range(N):
        A, B = spec.dyn_jac(X[k], U[k])
        Ad[k], Bd[k] = A, B
        resid[k] = spec.dyn_step(X[k], U[k]) - X[k + 1]
        y = spec.output(X[k], U[k])
        Jx, Ju = spec.output_jac(X[k], U[k])
        r = y - spec.y_ref[k]
        WJx = spec.W @ Jx
        WJu = spec.W @ Ju
        Hxx[k] = spec.dt * (Jx.T @ WJx) + spec.lm_reg * np.eye(n_x)
        Hxu[k] = spec.dt * (Jx.T @ WJu)
        Huu[k] = spec.dt * (Ju.T @ WJu) + spec.lm_reg * np.eye(n_u)
        gx[k] = spec.dt * (Jx.T @ (spec.W @ r))
        gu[k] = spec.dt * (Ju.T @ (spec.W @ r))
        if spec.dyn_hess is not None and it.lam_dyn is not None:
            Hd = np.asarray(spec.dyn_hess(X[k], U[k], it.lam_dyn[k + 1], k),
                            dtype=float)
            # absolute-value ("saddle-free") projection: directions of
            # negative Lagrangian curvature need damping, not ignoring
            Hxx[k] += _abs_part(Hd)

    ye = spec.terminal_output(X[N])
    Je = spec.terminal_jac(X[N])
    re = ye - spec.y_ref_e
    Hxx_e = Je.T @ spec.W_e @ Je + spec.lm_reg * np.eye(n_x)
    gx_e = Je.T @ (spec.W_e @ re)

    lin_rows: list[LinRow] = []
    row_idx = 0
    for row in spec.rows:
        for k in range(1, N + 1):
            if k == N and not row.terminal:
                continue
            u_k = U[k] if k < N else None
            val = row.value(X[k], u_k, k)
            rgx, rgu = row.grad(X[k], u_k, k)
            lin_rows.append(LinRow(k, np.asarray(rgx, dtype=float),
                                   None if rgu is None else np.asarray(rgu, dtype=float),
                                   float(row.ub[k] - val), row.soft,
                                   row.l1_weight, row.name))
            # lagged multiplier times the PSD part of the row curvature:
            # first-order row handling alone loses contraction when the row
            # is active with large multipliers
            if row.hess is not None and it.lam_rows is not None \
                    and row_idx < len(it.lam_rows):
                mu = float(it.lam_rows[row_idx])
                if mu > 0.0:
                    Hr = mu * _psd_part(np.asarray(row.hess(X[k], u_k, k), dtype=float))
                    if k < N:
                        Hxx[k] += Hr
                    else:
                        Hxx_e = Hxx_e + Hr
            row_idx += 1

    dx0 = np.asarray(x0, dtype=float) - X[0]

    nan = not (np.all(np.isfinite(Ad)) and np.all(np.isfinite(Bd))
               and np.all(np.isfinite(resid)) and np.all(np.isfinite(gx))
               and np.all(np.isfinite(gu)) and np.all(np.isfinite(gx_e))
               and np.all(np.isfinite(dx0))
               and all(np.all(np.isfinite(lr.gx)) and np.isfinite(lr.rhs)
                       for lr in lin_rows))

    return QpSubproblem(spec, Ad, Bd, resid, Hxx, Hxu, Huu, gx, gu,
                        Hxx_e, gx_e, dx0, lin_rows, X, U, nan_detected=nan)


@dataclass
class QpSolution:
    dX: np.ndarray
    dU: np.ndarray
    slacks: np.ndarray
    lam_ineq: np.ndarray
    lam_dyn: np.ndarray
    stats: SolveStats
    lam_rows: np.ndarray | None = None


def solve_qp(qp: QpSubproblem, warm_lam: np.ndarray | None = None) -> QpSolution:
    """Condense the stage-structured QP over the inputs and solve it.

    States are eliminated exactly through the dynamics linearization, which
    keeps the dense problem at N*n_u + n_slack variables regardless of the
    per-node state dimension. Hard input (and state box) bounds are enforced
    exactly; softened rows get an L1-penalized slack each.
    """
    spec = qp.spec
    N, n_x, n_u = spec.N, spec.n_x, spec.n_u
    nU = N * n_u

    if qp.nan_detected:
        stats = SolveStats(0, np.inf, 0.0, STATUS_NAN)
        return QpSolution(np.zeros((N + 1, n_x)), np.zeros((N, n_u)),
                          np.zeros(0), np.zeros(0), np.zeros((N + 1, n_x)), stats)

    # forward sensitivities: dx_k = T[k] @ dU + c[k]
    T = np.zeros((N + 1, n_x, nU))
    c = np.zeros((N + 1, n_x))
    c[0] = qp.dx0
    for k in range(N):
        T[k + 1] = qp.Ad[k] @ T[k]
        T[k + 1][:, k * n_u:(k + 1) * n_u] += qp.Bd[k]
        c[k + 1] = qp.Ad[k] @ c[k] + qp.resid[k]

    soft_rows = [lr for lr in qp.lin_rows if lr.soft]
    n_s = len(soft_rows)
    nz = nU + n_s

    H = np.zeros((nz, nz))
    g = np.zeros(nz)
    HU = H[:nU, :nU]
    for k in range(N):
        Tk = T[k]
        sl = slice(k * n_u, (k + 1) * n_u)
        TH = Tk.T @ qp.Hxx[k]
        HU += TH @ Tk
        cross = Tk.T @ qp.Hxu[k]
        HU[:, sl] += cross
        HU[sl, :] += cross.T
        HU[sl, sl] += qp.Huu[k]
        hc = qp.Hxx[k] @ c[k] + qp.gx[k]
        g[:nU] += Tk.T @ hc
        g[sl] += qp.Hxu[k].T @ c[k] + qp.gu[k]
    TN = T[N]
    HU += TN.T @ qp.Hxx_e @ TN
    g[:nU] += TN.T @ (qp.Hxx_e @ c[N] + qp.gx_e)

    # slack costs
    for i, lr in enumerate(soft_rows):
        H[nU + i, nU + i] = SOFT_L2_WEIGHT
        g[nU + i] = lr.l1_weight

    # inequality rows
    C_rows = []
    d_rows = []
    soft_idx = 0
    row_map = []  # parallel bookkeeping of what each dense row is
    for lr in qp.lin_rows:
        a = np.zeros(nz)
        au = lr.gx @ T[lr.k]
        if lr.gu is not None and lr.k < N:
            au = au.copy()
            au[lr.k * n_u:(lr.k + 1) * n_u] += lr.gu
        a[:nU] = au
        rhs = lr.rhs - float(lr.gx @ c[lr.k])
        if lr.soft:
            a[nU + soft_idx] = -1.0
            C_rows.append(a)
            d_rows.append(rhs)
            row_map.append(("soft", lr))
            b = np.zeros(nz)
            b[nU + soft_idx] = -1.0
            C_rows.append(b)
            d_rows.append(0.0)
            row_map.append(("slack_pos", lr))
            soft_idx += 1
        else:
            C_rows.append(a)
            d_rows.append(rhs)
            row_map.append(("hard", lr))

    # hard input boxes
    for k in range(N):
        lb, ub = spec.u_bound(k)
        for jdx in range(n_u):
            if np.isfinite(ub[jdx]):
                a = np.zeros(nz)
                a[k * n_u + jdx] = 1.0
                C_rows.append(a)
                d_rows.append(float(ub[jdx] - qp.U[k, jdx]))
                row_map.append(("u_ub", (k, jdx)))
            if np.isfinite(lb[jdx]):
                a = np.zeros(nz)
                a[k * n_u + jdx] = -1.0
                C_rows.append(a)
                d_rows.append(float(qp.U[k, jdx] - lb[jdx]))
                row_map.append(("u_lb", (k, jdx)))

    # hard state boxes, stages 1..N (stage 0 is pinned to the measurement)
    if spec.x_ub is not None or spec.x_lb is not None:
        x_lb_all = np.full(n_x, -np.inf) if spec.x_lb is None else np.asarray(spec.x_lb)
        x_ub_all = np.full(n_x, np.inf) if spec.x_ub is None else np.asarray(spec.x_ub)
        for k in range(1, N + 1):
            x_lb = x_lb_all[k] if x_lb_all.ndim == 2 else x_lb_all
            x_ub = x_ub_all[k] if x_ub_all.ndim == 2 else x_ub_all
            for i in range(n_x):
                if np.isfinite(x_ub[i]):
                    a = np.zeros(nz)
                    a[:nU] = T[k][i]
                    C_rows.append(a)
                    d_rows.append(float(x_ub[i] - qp.X[k, i] - c[k][i]))
                    row_map.append(("x_ub", (k, i)))
                if np.isfinite(x_lb[i]):
                    a = np.zeros(nz)
                    a[:nU] = -T[k][i]
                    C_rows.append(a)
                    d_rows.append(float(qp.X[k, i] - x_lb[i] + c[k][i]))
                    row_map.append(("x_lb", (k, i)))

    C = np.array(C_rows) if C_rows else np.zeros((0, nz))
    d = np.array(d_rows)

    warm = None
    if warm_lam is not None and warm_lam.shape == d.shape:
        warm = (np.zeros(nz), warm_lam)
    res = solve_dense_qp(H, g, C, d, warm=warm)

    dU = res.z[:nU].reshape(N, n_u)
    slacks = res.z[nU:]
    dX = np.einsum("kij,j->ki", T, res.z[:nU]) + c

    # dynamics multipliers by adjoint recursion at the QP solution
    lam_dyn = np.zeros((N + 1, n_x))
    mu_x = np.zeros((N + 1, n_x))  # accumulated row-multiplier pullbacks
    lam_rows = np.zeros(len(qp.lin_rows))
    lr_idx = 0
    for (kind, info), lam_i in zip(row_map, res.lam):
        if kind in ("soft", "hard"):
            lam_rows[lr_idx] = lam_i
            lr_idx += 1
            mu_x[info.k] += lam_i * info.gx
        elif kind == "x_ub":
            k, i = info
            mu_x[k][i] += lam_i
        elif kind == "x_lb":
            k, i = info
            mu_x[k][i] -= lam_i
    lam_dyn[N] = qp.Hxx_e @ dX[N] + qp.gx_e + mu_x[N]
    for k in range(N - 1, -1, -1):
        lam_dyn[k] = (qp.Hxx[k] @ dX[k] + qp.Hxu[k] @ dU[k] + qp.gx[k]
                      + mu_x[k] + qp.Ad[k].T @ lam_dyn[k + 1])

    stats = SolveStats(res.iterations,
                       max(res.stationarity, res.primal_feas, res.complementarity),
                       0.0, res.status)
    return QpSolution(dX, dU, slacks, res.lam, lam_dyn, stats, lam_rows)


def sqp_rti_step(spec: OcpSpec, it: SolverIterate, x0: np.ndarray):
    """One linearize-solve-update cycle (full step, no line search).

    Returns ``(u0, new_iterate, stats)``. On solver failure the previous
    iterate's first input is returned unchanged and the status is flagged.
    """
    t0 = time.perf_counter()
    x0 = np.asarray(x0, dtype=float)
    prev_u0 = it.U[0].copy()

    if not np.all(np.isfinite(x0)) or spec.y_ref is None or not np.all(np.isfinite(spec.y_ref)):
        stats = SolveStats(0, np.inf, time.perf_counter() - t0, STATUS_NAN)
        return _clip_u(prev_u0, spec, 0), it, stats

    qp = build_gauss_newton_qp(spec, it, x0)
    sol = solve_qp(qp, warm_lam=it.lam_ineq)
    stats = sol.stats
    if stats.status in (STATUS_NAN, STATUS_INFEASIBLE):
        stats.solve_time = time.perf_counter() - t0
        return _clip_u(prev_u0, spec, 0), it, stats

    X_new = it.X + sol.dX
    U_new = it.U + sol.dU
    for k in range(spec.N):
        U_new[k] = _clip_u(U_new[k], spec, k)
    new_it = SolverIterate(X_new, U_new, sol.lam_dyn, sol.lam_ineq, sol.slacks,
                           sol.lam_rows)
    stats.solve_time = time.perf_counter() - t0
    return U_new[0].copy(), new_it, stats


def _clip_u(u, spec: OcpSpec, k: int):
    lb, ub = spec.u_bound(k)
    return np.clip(u, lb, ub)


def shift_horizon(it: SolverIterate) -> SolverIterate:
    """Receding-horizon warm start: shift one stage left, duplicate the tail."""
    X = np.roll(it.X, -1, axis=0)
    X[-1] = X[-2]
    U = np.roll(it.U, -1, axis=0)
    U[-1] = U[-2]
    lam_dyn = None
    if it.lam_dyn is not None:
        lam_dyn = np.roll(it.lam_dyn, -1, axis=0)
        lam_dyn[-1] = lam_dyn[-2]
    return SolverIterate(X, U, lam_dyn, it.lam_ineq, it.slacks, it.lam_rows)


def nlp_kkt_residual(spec: OcpSpec, it: SolverIterate, x0: np.ndarray) -> float:
    """Scaled KKT residual of the nonlinear OCP at the iterate.

    Uses the iterate's stored multipliers; the x_0 pinning equality makes the
    stage-0 stationarity rows unconstrained in the reduced problem, so they
    are excluded (their multiplier is free).
    """
    qp = build_gauss_newton_qp(spec, it, x0)
    N, n_u = spec.N, spec.n_u
    if it.lam_dyn is None:
        return np.inf
    lam = it.lam_dyn
    mu_x = np.zeros((N + 1, spec.n_x))
    mu_list = it.lam_ineq
    # rebuild the row multiplier pullbacks in build order
    idx = 0
    r_comp = 0.0
    for lr in qp.lin_rows:
        if mu_list is None or idx >= len(mu_list):
            break
        m_i = mu_list[idx]
        mu_x[lr.k] += m_i * lr.gx
        r_comp = max(r_comp, abs(m_i * min(lr.rhs, 1e9)))
        idx += 2 if lr.soft else 1
    r_stat = 0.0
    for k in range(1, N):
        rx = qp.gx[k] + mu_x[k] + qp.Ad[k].T @ lam[k + 1] - lam[k]
        r_stat = max(r_stat, np.abs(rx).max())
    rN = qp.gx_e + mu_x[N] - lam[N]
    r_stat = max(r_stat, np.abs(rN).max())
    for k in range(N):
        ru = qp.gu[k] + qp.Bd[k].T @ lam[k + 1]
        # input-bound multipliers absorb the residual at active bounds
        lb, ub = spec.u_bound(k)
        at_bound = (it.U[k] >= ub - 1e-9) | (it.U[k] <= lb + 1e-9)
        ru = np.where(at_bound, 0.0, ru)
        r_stat = max(r_stat, np.abs(ru).max())
    r_feas = np.abs(qp.resid).max(initial=0.0)
    r_feas = max(r_feas, np.abs(qp.dx0).max(initial=0.0))
    for lr in qp.lin_rows:
        r_feas = max(r_feas, -min(lr.rhs, 0.0))
    return max(r_stat, r_feas)
