"""Ellipsoidal uncertainty-set algebra.

An ellipsoid is the set {q + Q^{1/2} v : ||v|| <= 1} for a symmetric PSD shape
matrix Q. This module provides membership tests, uniform sampling over the
solid ellipsoid, covariance propagation (continuous and discrete Lyapunov
forms) and the constraint back-off term used for robustification.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

#: smoothing constant under the back-off square root (keeps it differentiable
#: at Sigma = 0 while preserving the unsmoothed value to ~1e-6)
BACKOFF_EPS = 1e-12

_SYM_TOL = 1e-12
_PSD_TOL = -1e-10


def _check_shape_matrix(M: np.ndarray, what: str = "matrix") -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"{what} must be square, got shape {M.shape}")
    scale = max(1.0, float(np.abs(M).max(initial=0.0)))
    if np.abs(M - M.T).max(initial=0.0) > _SYM_TOL * scale * 10:
        raise ValueError(f"{what} is not symmetric")
    return 0.5 * (M + M.T)


@dataclass(frozen=True)
class Ellipsoid:
    """Shape matrix Q (n x n, symmetric PSD) and center q (n,)."""

    Q: np.ndarray
    q: np.ndarray = None

    def __post_init__(self):
        Q = _check_shape_matrix(self.Q, "Q")
        w = np.linalg.eigvalsh(Q)
        if w.min(initial=0.0) < _PSD_TOL * max(1.0, abs(w).max(initial=1.0)):
            raise ValueError(f"Q is not PSD (min eigenvalue {w.min():.3e})")
        object.__setattr__(self, "Q", Q)
        q = np.zeros(Q.shape[0]) if self.q is None else np.asarray(self.q, dtype=float)
        if q.shape != (Q.shape[0],):
            raise ValueError("center dimension does not match Q")
        object.__setattr__(self, "q", q)

    @property
    def dim(self) -> int:
        return self.Q.shape[0]


def matrix_sqrt_psd(M: np.ndarray) -> np.ndarray:
    """Principal square root S of a symmetric PSD matrix, S @ S.T == M.

    Rejects non-symmetric or indefinite input with the offending minimum
    eigenvalue in the message.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"matrix_sqrt_psd needs a square matrix, got {M.shape}")
    scale = max(1.0, float(np.abs(M).max(initial=0.0)))
    asym = float(np.abs(M - M.T).max(initial=0.0))
    if asym > 1e-10 * scale:
        raise ValueError(f"matrix is not symmetric (max |M - M.T| = {asym:.3e})")
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    if w.min(initial=0.0) < _PSD_TOL * scale:
        raise ValueError(f"matrix is not PSD (min eigenvalue {w.min():.3e})")
    w = np.clip(w, 0.0, None)
    return (V * np.sqrt(w)) @ V.T


def contains(e: Ellipsoid, point: np.ndarray, tol: float = 1e-9) -> bool:
    """Membership test (point - q)^T Q^+ (point - q) <= 1 + tol.

    A singular Q is handled with the pseudo-inverse; components in the null
    space of Q must vanish exactly (to tolerance) for membership.
    """
    point = np.asarray(point, dtype=float)
    if point.shape != (e.dim,):
        raise ValueError(f"point dimension {point.shape} does not match ellipsoid dim {e.dim}")
    d = point - e.q
    w, V = np.linalg.eigh(e.Q)
    scale = max(abs(w).max(initial=0.0), 1e-30)
    z = V.T @ d
    null = w <= 1e-12 * scale
    if np.any(np.abs(z[null]) > 1e-9 * max(1.0, np.sqrt(scale))):
        return False
    r = z[~null] ** 2 / w[~null]
    return float(r.sum()) <= 1.0 + tol


def sample_uniform(W: np.ndarray, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Uniform samples over the solid ellipsoid E(W) (center zero).

    Gaussian direction, radius U^{1/n}: the pushforward of the uniform ball
    distribution under W^{1/2}. Deterministic for a fixed generator state.
    Returns shape (n,) or (n, size).
    """
    W = _check_shape_matrix(W, "W")
    n = W.shape[0]
    S = matrix_sqrt_psd(W)
    k = 1 if size is None else int(size)
    g = rng.standard_normal((n, k))
    norms = np.linalg.norm(g, axis=0)
    norms[norms == 0.0] = 1.0
    radii = rng.uniform(size=k) ** (1.0 / n)
    v = g / norms * radii
    out = S @ v
    return out[:, 0] if size is None else out


def propagate_discrete(Sigma: np.ndarray, A: np.ndarray, B: np.ndarray, W: np.ndarray) -> np.ndarray:
    """One discrete Lyapunov step A Sigma A^T + B W B^T, symmetrized."""
    M = A @ Sigma @ A.T + B @ W @ B.T
    return 0.5 * (M + M.T)


def propagate_continuous_rhs(Sigma: np.ndarray, A: np.ndarray, B: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Right-hand side of the Lyapunov differential equation.

    A Sigma + Sigma A^T + B W B^T; the covariance dynamics used inside the
    covariance-augmented OCP.
    """
    return A @ Sigma + Sigma @ A.T + B @ W @ B.T


def backoff(grad_h: np.ndarray, Sigma: np.ndarray) -> float:
    """Smoothed constraint back-off sqrt(g^T Sigma g + eps) - sqrt(eps).

    Exactly zero for Sigma = 0 and within ~1e-6 of the unsmoothed
    sqrt(g^T Sigma g) otherwise.
    """
    g = np.asarray(grad_h, dtype=float)
    quad = float(g @ Sigma @ g)
    return float(np.sqrt(max(quad, 0.0) + BACKOFF_EPS) - np.sqrt(BACKOFF_EPS))
