"""Dense convex QP solver (Mehrotra predictor-corrector interior point).

Solves
    min  0.5 z' H z + g' z
    s.t. C z <= d
for H symmetric positive definite. The stage-structured OCP subproblems are
condensed to this form by :mod:`robustnmpc.ocp`; the normal-equations system
H + C' D C stays small after condensing, so a dense Cholesky per iteration is
the whole linear-algebra cost.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, lu_factor, lu_solve, LinAlgError

STATUS_OK = "ok"
STATUS_MAX_ITER = "max_iter"
STATUS_INFEASIBLE = "infeasible_qp"
STATUS_NAN = "nan_detected"

#: iteration cap of the embedded QP solver
MAX_QP_ITER = 50


@dataclass
class QpResult:
    z: np.ndarray
    lam: np.ndarray           # multipliers of C z <= d, nonnegative
    s: np.ndarray             # slacks d - C z
    iterations: int
    status: str
    stationarity: float
    primal_feas: float
    complementarity: float

    @property
    def ok(self) -> bool:
        return self.status == STATUS_OK


def kkt_residuals(H, g, C, d, z, lam):
    """Scaled KKT residuals (stationarity, primal feasibility, complementarity)."""
    scale = 1.0 + max(np.abs(g).max(initial=0.0), np.abs(d).max(initial=0.0) if len(d) else 0.0)
    r_st = np.abs(H @ z + g + (C.T @ lam if len(d) else 0.0)).max(initial=0.0) / scale
    if len(d):
        s = d - C @ z
        r_pf = max(0.0, float((-s).max(initial=0.0))) / scale
        r_co = float(np.abs(lam * s).max(initial=0.0)) / scale
    else:
        r_pf = 0.0
        r_co = 0.0
    return r_st, r_pf, r_co


def solve_dense_qp(H, g, C=None, d=None, warm=None, max_iter: int = MAX_QP_ITER,
                   tol: float = 1e-9) -> QpResult:
    """Solve the inequality-constrained dense QP.

    ``warm`` may carry ``(z, lam)`` from a previous, similar QP; the duals are
    floored and the slacks re-derived, which shortens the central path when the
    data changed little.
    """
    H = np.asarray(H, dtype=float)
    g = np.asarray(g, dtype=float)
    n = g.shape[0]
    if C is None or len(C) == 0:
        C = np.zeros((0, n))
        d = np.zeros(0)
    C = np.asarray(C, dtype=float)
    d = np.asarray(d, dtype=float)
    m = C.shape[0]

    if not (np.all(np.isfinite(H)) and np.all(np.isfinite(g))
            and np.all(np.isfinite(C)) and np.all(np.isfinite(d))):
        return QpResult(np.zeros(n), np.zeros(m), np.zeros(m), 0, STATUS_NAN,
                        np.inf, np.inf, np.inf)

    if m == 0:
        try:
            cf = cho_factor(H)
        except LinAlgError:
            return QpResult(np.zeros(n), d, d, 0, STATUS_NAN, np.inf, 0.0, 0.0)
        z = cho_solve(cf, -g)
        r_st, _, _ = kkt_residuals(H, g, C, d, z, d)
        return QpResult(z, np.zeros(0), np.zeros(0), 1, STATUS_OK, r_st, 0.0, 0.0)

    # starting point
    try:
        cfH = cho_factor(H)
    except LinAlgError:
        return QpResult(np.zeros(n), np.zeros(m), np.zeros(m), 0, STATUS_NAN,
                        np.inf, np.inf, np.inf)
    if warm is not None:
        z = np.array(warm[0], dtype=float)
        lam = np.clip(np.array(warm[1], dtype=float), 1e-8, None)
        s = np.clip(d - C @ z, 1e-8, None)
    else:
        # starting from z = 0 keeps the first iterates bounded even when the
        # Hessian mixes tiny slack-regularization entries with steep L1 costs
        z = np.zeros(n)
        shift = max(0.0, -1.5 * d.min(initial=0.0)) + 1.0
        s = d + shift
        lam = np.ones(m)

    scale = 1.0 + max(np.abs(g).max(initial=0.0), np.abs(d).max(initial=0.0))
    best = None
    it = 0
    for it in range(1, max_iter + 1):
        r_d = H @ z + g + C.T @ lam
        r_p = C @ z + s - d
        mu = float(s @ lam) / m

        r_st = np.abs(r_d).max() / scale
        r_pf = np.abs(r_p).max() / scale
        r_co = mu / scale
        if best is None or max(r_st, r_pf, r_co) < best[0]:
            best = (max(r_st, r_pf, r_co), z.copy(), lam.copy(), s.copy(), r_st, r_pf, r_co)
        if r_st < tol and r_pf < tol and r_co < tol:
            z, lam, s = _polish(H, g, C, d, z, lam, s)
            r_st, r_pf, r_co = kkt_residuals(H, g, C, d, z, lam)
            return QpResult(z, lam, s, it, STATUS_OK, r_st, r_pf, r_co)

        # augmented KKT system: stays well-scaled even when s/lam spans many
        # orders of magnitude (the normal-equations form squares that spread)
        K = np.zeros((n + m, n + m))
        K[:n, :n] = H
        K[:n, n:] = C.T
        K[n:, :n] = C
        K[n:, n:] = -np.diag(s / lam) - 1e-14 * np.eye(m)
        try:
            lu = lu_factor(K)
        except (LinAlgError, ValueError):
            _, z, lam, s, r_st, r_pf, r_co = best
            return QpResult(z, lam, s, it, STATUS_NAN, r_st, r_pf, r_co)

        def solve_step(r_c):
            rhs = np.concatenate([-r_d, -r_p + r_c / lam])
            sol = lu_solve(lu, rhs)
            sol += lu_solve(lu, rhs - K @ sol)  # one refinement pass
            dz = sol[:n]
            dlam = sol[n:]
            ds = -r_p - C @ dz
            return dz, ds, dlam

        # affine (predictor) step
        dz_a, ds_a, dl_a = solve_step(lam * s)
        a_p = _max_step(s, ds_a)
        a_d = _max_step(lam, dl_a)
        mu_aff = float((s + a_p * ds_a) @ (lam + a_d * dl_a)) / m
        sigma = (max(mu_aff, 0.0) / mu) ** 3 if mu > 0 else 0.0

        # corrector
        r_c = lam * s + ds_a * dl_a - sigma * mu
        dz, ds, dlam = solve_step(r_c)
        frac = min(0.99995, max(0.995, 1.0 - mu / scale))
        a_p = min(1.0, frac * _max_step(s, ds))
        a_d = min(1.0, frac * _max_step(lam, dlam))
        z = z + a_p * dz
        s = np.maximum(s + a_p * ds, 1e-300)
        lam = np.maximum(lam + a_d * dlam, 1e-300)
        if not np.all(np.isfinite(z)):
            _, z, lam, s, r_st, r_pf, r_co = best
            return QpResult(z, lam, s, it, STATUS_NAN, r_st, r_pf, r_co)

    _, z, lam, s, r_st, r_pf, r_co = best
    status = STATUS_INFEASIBLE if r_pf > 1e-6 else STATUS_MAX_ITER
    return QpResult(z, lam, s, max_iter, status, r_st, r_pf, r_co)


def _polish(H, g, C, d, z, lam, s):
    """Refine a converged interior point by solving the equality KKT system
    of the apparent active set; keeps the interior solution unless the polish
    is consistent (nonnegative multipliers, feasible primal) and tighter."""
    act = np.flatnonzero(lam > s)
    n = len(z)
    r = len(act)
    K = np.zeros((n + r, n + r))
    K[:n, :n] = H
    if r:
        K[:n, n:] = C[act].T
        K[n:, :n] = C[act]
    rhs = np.concatenate([-g, d[act]])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        return z, lam, s
    z_p = sol[:n]
    lam_p = np.zeros(len(d))
    lam_p[act] = sol[n:]
    s_p = d - C @ z_p
    if (r and lam_p[act].min() < 0.0) or (len(d) and s_p.min() < -1e-9):
        return z, lam, s
    old = max(kkt_residuals(H, g, C, d, z, lam))
    new = max(kkt_residuals(H, g, C, d, z_p, lam_p))
    if new <= old:
        return z_p, lam_p, np.maximum(s_p, 0.0)
    return z, lam, s


def _max_step(v, dv) -> float:
    """Largest alpha in (0, 1] keeping v + alpha dv > 0."""
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return min(1.0, float((-v[neg] / dv[neg]).min()))
