"""Implicit and explicit score-driven filter recursions.

The filtered parameter follows

    prediction:  theta_pred = (I - Phi) omega + Phi theta_prev
    explicit:    theta_upd  = theta_pred + H_t score(y_t, theta_pred)
    implicit:    theta_upd  = argmax_theta { l(y_t, theta)
                                             - 0.5 (theta - theta_pred)' P (theta - theta_pred) }

with a static positive-definite penalty P (H = P^{-1} in the explicit case,
optionally Fisher-scaled by zeta).  The implicit update is computed in
closed form where one exists (Student-t location via a cubic, quadratic-link
Poisson, linear-Gaussian) and by a damped Newton iteration otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import matcore
from .models import ObservationModel

__all__ = [
    "FilterConfig",
    "FilterOutput",
    "predict",
    "update_explicit",
    "update_implicit",
    "update_student_cubic",
    "update_poisson_quadratic",
    "run_filter",
]

# A filtered parameter larger than this in norm counts as divergence.
DIVERGENCE_GUARD = 1e12

_NEWTON_MAX_ITER = 50
_DAMPING_MAX_HALVINGS = 40
# Lower clamp for nonnegative parameter spaces inside the Newton iteration.
_ORTHANT_FLOOR = 1e-12

# Models whose implicit update enumerates every stationary point in closed
# form and returns the global maximizer.  For these the regularized objective
# does not need to be strictly concave for the update to be well defined, so
# the lambda_min(P) > alpha^- construction check is waived; everything that
# goes through the generic Newton solver still requires it.
_EXACT_GLOBAL_ARGMAX = frozenset({"student_location"})


@dataclass(frozen=True)
class FilterConfig:
    """Static configuration of a score-driven filter.

    kind          "implicit" or "explicit"
    model         observation model supplying score/Hessian/support
    omega         unconditional level, shape (k,)
    phi           autoregressive matrix, shape (k, k)
    penalty       positive-definite penalty P, shape (k, k)
    scaling_zeta  Fisher-scaling exponent for explicit updates (0, 0.5 or 1)
    theta_init    starting value theta_{0|0}; defaults to omega
    """

    model: ObservationModel
    kind: str
    omega: np.ndarray
    phi: np.ndarray
    penalty: np.ndarray
    scaling_zeta: float = 0.0
    theta_init: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in ("implicit", "explicit"):
            raise ValueError(f"kind must be 'implicit' or 'explicit', got {self.kind!r}")
        k = self.model.k
        omega = np.asarray(self.omega, dtype=float).reshape(k)
        phi = np.atleast_2d(np.asarray(self.phi, dtype=float))
        if phi.shape != (k, k):
            raise ValueError(f"phi must have shape ({k}, {k})")
        penalty = matcore.require_positive_definite(
            np.atleast_2d(np.asarray(self.penalty, dtype=float)), "penalty P"
        )
        if penalty.shape != (k, k):
            raise ValueError(f"penalty must have shape ({k}, {k})")
        zeta = float(self.scaling_zeta)
        if zeta not in (0.0, 0.5, 1.0):
            raise ValueError("scaling_zeta must be one of 0, 0.5, 1")
        if zeta != 0.0 and self.kind != "explicit":
            raise ValueError("Fisher scaling (zeta != 0) applies to explicit updates only")
        lmin, lmax = matcore.eig_bounds(penalty)
        alpha_minus = max(-float(self.model.alpha), 0.0)
        if (self.kind == "implicit" and alpha_minus > 0.0 and lmin <= alpha_minus
                and self.model.name not in _EXACT_GLOBAL_ARGMAX):
            raise ValueError(
                "implicit update needs lambda_min(P) > "
                f"{alpha_minus} to stay well posed; got {lmin}"
            )
        if self.model.param_space == "nonneg":
            if self.kind == "explicit":
                raise ValueError(
                    "explicit updates require an unrestricted parameter space; "
                    f"model {self.model.name!r} lives on the nonnegative orthant"
                )
            if np.any(omega < 0.0):
                raise ValueError("omega must lie in the nonnegative parameter space")
            off = phi - np.diag(np.diag(phi))
            if np.any(np.abs(off) > 0.0):
                raise ValueError("phi must be diagonal for a constrained parameter space")
            diag = np.diag(phi)
            if np.any(diag < 0.0) or np.any(diag > 1.0):
                raise ValueError("diagonal of phi must lie in [0, 1] for a constrained space")
        theta_init = self.theta_init
        if theta_init is None:
            theta_init = omega.copy()
        else:
            theta_init = np.asarray(theta_init, dtype=float).reshape(k)
            if self.model.param_space == "nonneg" and np.any(theta_init < 0.0):
                raise ValueError("theta_init must lie in the nonnegative parameter space")
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "penalty", penalty)
        object.__setattr__(self, "scaling_zeta", zeta)
        object.__setattr__(self, "theta_init", theta_init)

    @classmethod
    def scalar(cls, model, kind, omega, phi, eta, scaling_zeta=0.0, theta_init=None):
        """Build a config for a scalar parameter with P = 1 / eta."""
        if eta <= 0:
            raise ValueError("eta must be positive")
        return cls(
            model=model,
            kind=kind,
            omega=np.array([float(omega)]),
            phi=np.array([[float(phi)]]),
            penalty=np.array([[1.0 / float(eta)]]),
            scaling_zeta=scaling_zeta,
            theta_init=None if theta_init is None else np.array([float(theta_init)]),
        )


@dataclass(frozen=True)
class FilterOutput:
    """Filtered paths: one row per observation.

    predicted[t] is theta_{t+1|t} in series order (the one-step-ahead value
    used to score y_{t+1}), updated[t] is theta_{t+1|t+1}, and
    loglik_contribs[t] the measurement log density of y at the prediction.
    After a divergence the remaining rows are NaN.
    """

    predicted: np.ndarray
    updated: np.ndarray
    loglik_contribs: np.ndarray
    diverged: bool
    first_divergence: Optional[int]

    @property
    def total_loglik(self) -> float:
        if self.diverged:
            return -math.inf
        return float(np.sum(self.loglik_contribs))


def predict(cfg: FilterConfig, theta: np.ndarray) -> np.ndarray:
    """One-step prediction (I - Phi) omega + Phi theta."""
    theta = np.asarray(theta, dtype=float).reshape(cfg.model.k)
    return (np.eye(cfg.model.k) - cfg.phi) @ cfg.omega + cfg.phi @ theta


def _scaled_gain(cfg: FilterConfig, theta_pred: np.ndarray) -> np.ndarray:
    """H_t = P^{-1} I(theta_pred)^{-zeta} (identity scaling when zeta = 0)."""
    k = cfg.model.k
    p_inv = np.linalg.inv(cfg.penalty)
    if cfg.scaling_zeta == 0.0:
        return p_inv
    from .models import fisher_info

    info = fisher_info(cfg.model, theta_pred if k > 1 else float(theta_pred[0]))
    w, v = matcore.eig_sym(info)
    if np.any(w <= 0):
        raise ValueError("Fisher scaling requires positive-definite information")
    info_pow = (v * w ** (-cfg.scaling_zeta)) @ v.T
    return p_inv @ info_pow


def update_explicit(cfg: FilterConfig, theta_pred: np.ndarray, y) -> np.ndarray:
    """Explicit score step theta_pred + H_t grad l(y | theta_pred)."""
    theta_pred = np.asarray(theta_pred, dtype=float).reshape(cfg.model.k)
    arg = float(theta_pred[0]) if cfg.model.k == 1 else theta_pred
    score = np.atleast_1d(np.asarray(cfg.model.score(y, arg), dtype=float))
    gain = _scaled_gain(cfg, theta_pred)
    return theta_pred + gain @ score


def update_student_cubic(eta, nu, sigma_scale, theta_pred, y):
    """Implicit Student-t location update via its cubic first-order condition.

    Returns (theta_upd, w, n_real_roots) where w in [0, eta / (1 + eta)] is
    the selected shrinkage weight on y - theta_pred and n_real_roots counts
    the stationary points found in the admissible window.  When several
    stationary points exist the one with the highest penalized objective is
    taken; exact ties go to the smaller weight.
    """
    eta = float(eta)
    nu = float(nu)
    sigma_scale = float(sigma_scale)
    theta_pred = float(np.asarray(theta_pred).reshape(()))
    y = float(y)
    if eta <= 0 or nu <= 0 or sigma_scale <= 0:
        raise ValueError("eta, nu and sigma_scale must be positive")
    e = y - theta_pred
    c = e * e / (nu * sigma_scale * sigma_scale)
    if c <= 1e-18 * (1.0 + eta):
        # The curvature term is negligible: the unique stationary point sits
        # at the Gaussian-limit weight (up to O(c) which is below roundoff).
        w = eta / (1.0 + eta)
        return theta_pred + w * e, w, 1
    # c w^3 - 2c w^2 + (c + eta + 1) w - eta = 0
    roots = _cubic_roots(c, -2.0 * c, c + eta + 1.0, -eta)
    window = [r for r in roots if -1e-10 < r < 1.0 + 1e-10]
    window = [min(max(r, 0.0), 1.0) for r in window]
    # Newton polish on the cubic itself.
    polished = []
    for r in window:
        for _ in range(4):
            f = ((c * r - 2.0 * c) * r + (c + eta + 1.0)) * r - eta
            df = (3.0 * c * r - 4.0 * c) * r + (c + eta + 1.0)
            if df == 0.0:
                break
            step = f / df
            r -= step
            if abs(step) < 1e-15:
                break
        polished.append(min(max(r, 0.0), 1.0))
    # Deduplicate near-identical roots.
    polished.sort()
    uniq = []
    for r in polished:
        if not uniq or abs(r - uniq[-1]) > 1e-9:
            uniq.append(r)
    if not uniq:
        raise RuntimeError("no admissible stationary point for the Student-t update")

    def objective(w):
        # Driving objective: scaled log density minus the quadratic penalty.
        u = c * (1.0 - w) ** 2
        pen = 0.5 * (w * e) ** 2 / eta
        return -0.5 * sigma_scale**2 * nu * math.log1p(u) - pen

    best = uniq[0]
    best_val = objective(best)
    for r in uniq[1:]:
        val = objective(r)
        if val > best_val + 1e-14 * (1.0 + abs(best_val)):
            best, best_val = r, val
    w_cap = eta / (1.0 + eta)
    w = min(best, w_cap)
    return theta_pred + w * e, w, len(uniq)


def _cubic_roots(a, b, c, d):
    """Real roots of a x^3 + b x^2 + c x + d with a != 0 (trigonometric form)."""
    b, c, d = b / a, c / a, d / a
    p = c - b * b / 3.0
    q = 2.0 * b**3 / 27.0 - b * c / 3.0 + d
    shift = -b / 3.0
    disc = (q / 2.0) ** 2 + (p / 3.0) ** 3
    if disc > 0.0:
        # One real root (Cardano).
        sq = math.sqrt(disc)
        u = _cbrt(-q / 2.0 + sq)
        v = _cbrt(-q / 2.0 - sq)
        return [u + v + shift]
    if p == 0.0:
        return [shift]
    # Three real roots (possibly repeated): trigonometric method.
    m = 2.0 * math.sqrt(-p / 3.0)
    arg = 3.0 * q / (p * m)
    arg = min(1.0, max(-1.0, arg))
    theta = math.acos(arg) / 3.0
    return [m * math.cos(theta - 2.0 * math.pi * j / 3.0) + shift for j in range(3)]


def _cbrt(x: float) -> float:
    return math.copysign(abs(x) ** (1.0 / 3.0), x)


def update_poisson_quadratic(eta, theta_pred, y):
    """Implicit quadratic-link Poisson update (closed form on the orthant)."""
    eta = float(eta)
    theta_pred = float(np.asarray(theta_pred).reshape(()))
    y = float(y)
    if eta <= 0:
        raise ValueError("eta must be positive")
    if theta_pred < 0:
        raise ValueError("theta_pred must be nonnegative")
    disc = theta_pred * theta_pred + 8.0 * eta * (1.0 + 2.0 * eta) * y
    return (theta_pred + math.sqrt(disc)) / (2.0 * (1.0 + 2.0 * eta))


def _newton_implicit(cfg: FilterConfig, theta_pred: np.ndarray, y) -> np.ndarray:
    """Damped Newton iteration for the implicit update from theta_pred."""
    model = cfg.model
    k = model.k
    p = cfg.penalty
    scalar = k == 1
    clamp = model.param_space == "nonneg"

    def as_arg(theta):
        return float(theta[0]) if scalar else theta

    def objective(theta):
        diff = theta - theta_pred
        return float(model.log_density(y, as_arg(theta))) - 0.5 * float(diff @ p @ diff)

    def residual(theta):
        grad = np.atleast_1d(np.asarray(model.score(y, as_arg(theta)), dtype=float))
        return grad - p @ (theta - theta_pred)

    tol = 1e-10 * (1.0 + float(np.linalg.norm(p @ theta_pred)))
    theta = theta_pred.copy()
    obj = objective(theta)
    for _ in range(_NEWTON_MAX_ITER):
        res = residual(theta)
        if float(np.linalg.norm(res)) <= tol:
            return theta
        hess = np.atleast_2d(np.asarray(model.hessian(y, as_arg(theta)), dtype=float))
        curv = p - hess
        try:
            step = np.linalg.solve(curv, res)
        except np.linalg.LinAlgError:
            step = res / max(float(np.trace(curv)) / k, 1e-8)
        scale = 1.0
        for _half in range(_DAMPING_MAX_HALVINGS):
            cand = theta + scale * step
            if clamp:
                cand = np.maximum(cand, _ORTHANT_FLOOR)
            cand_obj = objective(cand)
            if math.isfinite(cand_obj) and cand_obj >= obj - 1e-14 * (1.0 + abs(obj)):
                theta, obj = cand, cand_obj
                break
            scale *= 0.5
        else:
            raise RuntimeError(
                "implicit update failed: damped Newton could not make progress "
                f"(model {model.name!r})"
            )
    res = residual(theta)
    if float(np.linalg.norm(res)) <= 1e4 * tol:
        return theta
    raise RuntimeError(
        f"implicit update did not converge for model {model.name!r} "
        f"(residual {float(np.linalg.norm(res)):.3e})"
    )


def update_implicit(cfg: FilterConfig, theta_pred: np.ndarray, y) -> np.ndarray:
    """Implicit (proximal) update: closed form where available, else Newton."""
    model = cfg.model
    k = model.k
    theta_pred = np.asarray(theta_pred, dtype=float).reshape(k)

    if model.name == "student_location":
        eta = 1.0 / float(cfg.penalty[0, 0])
        theta_upd, _, _ = update_student_cubic(
            eta, model.shape["nu"], model.shape["scale"], float(theta_pred[0]), float(y)
        )
        out = np.array([theta_upd])
    elif model.name == "poisson_quad":
        eta = 1.0 / float(cfg.penalty[0, 0])
        out = np.array([update_poisson_quadratic(eta, float(theta_pred[0]), float(y))])
    elif model.name in ("gaussian_linear", "least_squares"):
        # Quadratic objective: one linear solve is exact.  The score is
        # affine, score(y, t) = score(y, 0) - G t with G the constant Fisher
        # information, so the first-order condition is linear in theta.
        from .models import fisher_info

        gram = fisher_info(model, theta_pred if k > 1 else 0.0)
        zero = np.zeros(k) if k > 1 else 0.0
        lin = np.atleast_1d(np.asarray(model.score(y, zero), dtype=float))
        out = np.linalg.solve(cfg.penalty + gram, cfg.penalty @ theta_pred + lin)
    else:
        out = _newton_implicit(cfg, theta_pred, y)

    arg_pred = float(theta_pred[0]) if k == 1 else theta_pred
    arg_out = float(out[0]) if k == 1 else out
    l_pred = float(model.log_density(y, arg_pred))
    l_out = float(model.log_density(y, arg_out))
    if l_out < l_pred - 1e-12 * (1.0 + abs(l_pred)):
        raise RuntimeError(
            f"implicit update decreased the driving objective for {model.name!r}"
        )
    return out


def run_filter(cfg: FilterConfig, series) -> FilterOutput:
    """Run the configured filter over a series of observations.

    ``series`` has shape (T,) for scalar observations or (T, n) otherwise.
    Observations outside the model's support raise ValueError with the
    offending index.  Divergence (non-finite or > 1e12 in norm) stops the
    recursion; remaining rows are NaN and ``diverged`` is set.
    """
    model = cfg.model
    k = model.k
    series = np.asarray(series, dtype=float)
    if model.n == 1:
        series = series.reshape(-1)
        T = series.shape[0]
    else:
        if series.ndim != 2 or series.shape[1] != model.n:
            raise ValueError(f"series must have shape (T, {model.n})")
        T = series.shape[0]

    predicted = np.full((T, k), np.nan)
    updated = np.full((T, k), np.nan)
    contribs = np.full(T, np.nan)
    diverged = False
    first_div: Optional[int] = None

    theta = cfg.theta_init.copy()
    eye_minus_phi_omega = (np.eye(k) - cfg.phi) @ cfg.omega
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for t in range(T):
            y = series[t] if model.n == 1 else series[t, :]
            if not model.support(y):
                raise ValueError(
                    f"observation at index {t} is outside the support of {model.name!r}"
                )
            theta_pred = eye_minus_phi_omega + cfg.phi @ theta
            if not _finite_and_bounded(theta_pred):
                diverged, first_div = True, t
                break
            predicted[t] = theta_pred
            arg_pred = float(theta_pred[0]) if k == 1 else theta_pred
            contribs[t] = float(model.measurement_logpdf(y, arg_pred))
            if cfg.kind == "explicit":
                theta_upd = update_explicit(cfg, theta_pred, y)
            else:
                theta_upd = update_implicit(cfg, theta_pred, y)
            if not _finite_and_bounded(theta_upd):
                diverged, first_div = True, t
                predicted[t] = np.nan
                contribs[t] = np.nan
                break
            updated[t] = theta_upd
            theta = theta_upd

    return FilterOutput(
        predicted=predicted,
        updated=updated,
        loglik_contribs=contribs,
        diverged=diverged,
        first_divergence=first_div,
    )


def _finite_and_bounded(theta: np.ndarray) -> bool:
    return bool(np.all(np.isfinite(theta)) and np.linalg.norm(theta) <= DIVERGENCE_GUARD)
