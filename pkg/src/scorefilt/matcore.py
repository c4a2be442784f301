"""Dense symmetric matrix kernels used throughout the package.

Symmetric matrices are plain float ndarrays of shape (k, k).  Wherever a
function documents a ``SymMatrix`` argument it means "symmetric up to a 1e-8
relative tolerance"; inputs are symmetrized on entry via :func:`symmetrize`
and anything more lopsided than that is rejected as a user error.

The eigensolver is a cyclic Jacobi iteration.  It is deliberately
self-contained (no LAPACK) so that every spectral quantity used by the
stability certificates and MSE bounds can be cross-checked against an
independent route in the tests.
"""

from __future__ import annotations

import math

import numpy as np

# Relative asymmetry above which an input stops being "a symmetric matrix
# with roundoff" and becomes a caller bug.
_ASYM_RTOL = 1e-8
# Off-diagonal Frobenius mass, relative to the input norm, at which the
# Jacobi sweep declares convergence.
_JACOBI_RTOL = 1e-12
# lambda_min > _PD_RTOL * max(1, lambda_max) is the positive-definiteness test.
_PD_RTOL = 1e-12

_MAX_SWEEPS = 100


def symmetrize(a: np.ndarray) -> np.ndarray:
    """Return (A + A') / 2, rejecting inputs that are not nearly symmetric.

    Raises ValueError if the asymmetry exceeds 1e-8 relative to the matrix
    norm: that is a caller error, not roundoff.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    scale = max(1.0, float(np.linalg.norm(a)))
    asym = float(np.linalg.norm(a - a.T))
    if asym > _ASYM_RTOL * scale:
        raise ValueError(
            f"matrix is not symmetric (relative asymmetry {asym / scale:.3e})"
        )
    return 0.5 * (a + a.T)


def eig_sym(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns (w, v) with eigenvalues ``w`` sorted ascending and orthonormal
    eigenvectors in the columns of ``v``: a = v @ diag(w) @ v.T.
    """
    a = symmetrize(a)
    k = a.shape[0]
    if k == 1:
        return a[0, :1].copy(), np.ones((1, 1))

    d = a.copy()
    v = np.eye(k)
    norm_a = float(np.linalg.norm(a))
    tol = _JACOBI_RTOL * max(norm_a, 1e-300)

    for _sweep in range(_MAX_SWEEPS):
        off_direct = d.copy()
        np.fill_diagonal(off_direct, 0.0)
        off = float(np.linalg.norm(off_direct))
        if off <= tol:
            break
        for p in range(k - 1):
            for q in range(p + 1, k):
                apq = d[p, q]
                if abs(apq) <= 1e-300:
                    continue
                tau = (d[q, q] - d[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, tau) / (abs(tau) + math.hypot(1.0, tau))
                c = 1.0 / math.hypot(1.0, t)
                s = t * c
                # Apply the rotation J(p, q, theta) on both sides of d.
                dp = d[:, p].copy()
                dq = d[:, q].copy()
                d[:, p] = c * dp - s * dq
                d[:, q] = s * dp + c * dq
                rp = d[p, :].copy()
                rq = d[q, :].copy()
                d[p, :] = c * rp - s * rq
                d[q, :] = s * rp + c * rq
                d[p, q] = 0.0
                d[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        raise RuntimeError("Jacobi eigensolver failed to converge")

    w = np.diag(d).copy()
    order = np.argsort(w, kind="stable")
    w = w[order]
    v = v[:, order]
    # Deterministic sign: largest-magnitude component of each column >= 0.
    for j in range(k):
        i = int(np.argmax(np.abs(v[:, j])))
        if v[i, j] < 0.0:
            v[:, j] = -v[:, j]
    return w, v


def eig_bounds(a: np.ndarray) -> tuple[float, float]:
    """Smallest and largest eigenvalue of a symmetric matrix."""
    w, _ = eig_sym(a)
    return float(w[0]), float(w[-1])


def is_positive_definite(a: np.ndarray) -> bool:
    """Spectral positive-definiteness test: lmin > 1e-12 * max(1, lmax)."""
    lmin, lmax = eig_bounds(a)
    return lmin > _PD_RTOL * max(1.0, lmax)


def require_positive_definite(a: np.ndarray, what: str = "matrix") -> np.ndarray:
    """Symmetrize and return ``a``, raising ValueError unless it is PD."""
    a = symmetrize(a)
    if not is_positive_definite(a):
        raise ValueError(f"{what} must be positive definite")
    return a


def sym_sqrt(a: np.ndarray) -> np.ndarray:
    """Symmetric square root S of a PSD matrix: S @ S = a."""
    w, v = eig_sym(a)
    if w[0] < -_PD_RTOL * max(1.0, abs(float(w[-1]))):
        raise ValueError("matrix must be positive semidefinite for sym_sqrt")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def spectral_norm(a: np.ndarray) -> float:
    """Largest singular value of a (not necessarily symmetric) matrix."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise ValueError("expected a matrix")
    gram = a.T @ a if a.shape[0] >= a.shape[1] else a @ a.T
    w, _ = eig_sym(gram)
    return math.sqrt(max(0.0, float(w[-1])))


def weighted_matrix_norm(a: np.ndarray, p: np.ndarray) -> float:
    """Operator norm of ``a`` in the P-weighted geometry.

    Computes ||P^{1/2} A P^{-1/2}||_2, the induced norm of x -> A x when
    vectors are measured by sqrt(x' P x).  P must be positive definite.
    """
    p = require_positive_definite(p, "weight matrix P")
    a = np.asarray(a, dtype=float)
    if a.shape != p.shape:
        raise ValueError("A and P must have matching shapes")
    s = sym_sqrt(p)
    w, v = eig_sym(p)
    s_inv = (v * (1.0 / np.sqrt(w))) @ v.T
    return spectral_norm(s @ a @ s_inv)


def weighted_norm2(x: np.ndarray, p: np.ndarray) -> float:
    """Squared P-weighted vector norm x' P x."""
    x = np.asarray(x, dtype=float).reshape(-1)
    p = np.asarray(p, dtype=float)
    return float(x @ p @ x)


def gamma_coeff(p: np.ndarray, phi: np.ndarray) -> float:
    """Contraction margin of the prediction map: lmin(P - Phi' P Phi).

    Positive values certify that x -> Phi x is a strict contraction in the
    P-weighted norm; the value can be negative for expanding maps.  P must
    be positive definite.
    """
    p = require_positive_definite(p, "penalty matrix P")
    phi = np.asarray(phi, dtype=float)
    if phi.shape != p.shape:
        raise ValueError("Phi and P must have matching shapes")
    m = symmetrize(p - phi.T @ p @ phi)
    lmin, _ = eig_bounds(m)
    return lmin
