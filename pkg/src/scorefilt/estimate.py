"""Maximum-likelihood calibration of the static filter parameters.

Static parameters (penalty scale, long-run mean, mean reversion, and
optionally distribution shapes) are packed into a single unconstrained
vector through smooth one-to-one transforms, the one-step-ahead
prediction-error log likelihood is evaluated by running the filter, and a
hand-rolled Nelder-Mead simplex searches the unconstrained coordinates.
A derivative-free method is used deliberately: the implicit update is
continuous but not smooth in the parameters wherever the number of
stationary points of the inner problem changes, so gradient estimates are
unreliable there.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import matcore
from .filter import FilterConfig, run_filter
from .models import ObservationModel, make_model

__all__ = ["ParamVector", "FitResult", "neg_loglik", "fit_mle", "nelder_mead"]

_CORE_NAMES = ("omega", "phi", "eta")


def _atanh(x):
    return 0.5 * math.log((1.0 + x) / (1.0 - x))


def _logit(x):
    return math.log(x / (1.0 - x))


def _sigmoid(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@dataclass(frozen=True)
class ParamVector:
    """Natural parameter values plus the list of coordinates being estimated.

    omega is stored as a (k,) array; phi as a () scalar (mean reversion
    phi * I), a (k,) diagonal, or a (k, k) matrix; eta is the scalar penalty
    scale (P = I / eta); ``shape`` holds estimated distribution-shape values
    by name.  ``free_names`` lists the components exposed to the optimizer,
    in encoding order; everything else is held fixed.

    Unconstrained coordinates: omega is raw (log for nonnegative parameter
    spaces), scalar/diagonal phi maps through tanh (sigmoid to (0, 1) for
    nonnegative spaces), full-matrix phi is raw with a spectral clamp at
    decode time, and eta and all shape values map through log.
    """

    kind: str
    k: int
    space: str
    omega: np.ndarray
    phi: np.ndarray
    eta: float
    scaling_zeta: float = 0.0
    shape: tuple[tuple[str, float], ...] = ()
    free_names: tuple[str, ...] = ("omega", "phi", "eta")

    def __post_init__(self):
        omega = np.atleast_1d(np.asarray(self.omega, dtype=float))
        phi = np.asarray(self.phi, dtype=float)
        if omega.shape != (self.k,):
            raise ValueError(f"omega must have shape ({self.k},)")
        if phi.ndim not in (0, 1, 2):
            raise ValueError("phi must be a scalar, a diagonal, or a matrix")
        if phi.ndim == 1 and phi.shape != (self.k,):
            raise ValueError(f"diagonal phi must have shape ({self.k},)")
        if phi.ndim == 2 and phi.shape != (self.k, self.k):
            raise ValueError(f"matrix phi must have shape ({self.k}, {self.k})")
        if self.space not in ("real", "nonneg"):
            raise ValueError("space must be 'real' or 'nonneg'")
        if float(self.eta) <= 0:
            raise ValueError("eta must be positive")
        shape_names = tuple(name for name, _ in self.shape)
        for name in self.free_names:
            if name not in _CORE_NAMES and name not in shape_names:
                raise ValueError(f"unknown free coordinate {name!r}")
        if len(set(self.free_names)) != len(self.free_names):
            raise ValueError("free_names contains duplicates")
        # Fail at build time if a free coordinate has no finite encoding.
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "eta", float(self.eta))
        object.__setattr__(self, "shape", tuple((n, float(v)) for n, v in self.shape))
        _ = self.free

    @classmethod
    def for_model(cls, model: ObservationModel, kind, omega, phi, eta,
                  scaling_zeta=0.0, shape=(), free_names=("omega", "phi", "eta")):
        """Build a vector whose transforms match the model's parameter space."""
        omega = np.atleast_1d(np.asarray(omega, dtype=float))
        if omega.size == 1 and model.k > 1:
            omega = np.full(model.k, float(omega[0]))
        return cls(kind=kind, k=model.k, space=model.param_space, omega=omega,
                   phi=np.asarray(phi, dtype=float), eta=float(eta),
                   scaling_zeta=scaling_zeta, shape=tuple(shape),
                   free_names=tuple(free_names))

    def _encode_component(self, name):
        if name == "omega":
            if self.space == "nonneg":
                if np.any(self.omega <= 0):
                    raise ValueError("free omega must be strictly positive here")
                return np.log(self.omega)
            return np.array(self.omega, dtype=float)
        if name == "phi":
            if self.phi.ndim == 2:
                if matcore.spectral_norm(self.phi) > 1.0 + 1e-12:
                    raise ValueError("free matrix phi must start with norm <= 1")
                return self.phi.ravel().copy()
            vals = np.atleast_1d(self.phi).astype(float)
            if self.space == "nonneg":
                if np.any((vals <= 0.0) | (vals >= 1.0)):
                    raise ValueError("free phi must start strictly inside (0, 1)")
                return np.array([_logit(v) for v in vals])
            if np.any(np.abs(vals) >= 1.0):
                raise ValueError("free phi must start strictly inside (-1, 1)")
            return np.array([_atanh(v) for v in vals])
        if name == "eta":
            return np.array([math.log(self.eta)])
        for key, value in self.shape:
            if key == name:
                if value <= 0:
                    raise ValueError(f"shape {name!r} must be positive")
                return np.array([math.log(value)])
        raise ValueError(f"unknown component {name!r}")

    def _decode_component(self, name, coords):
        if name == "omega":
            if self.space == "nonneg":
                return np.exp(np.clip(coords, -700.0, 700.0))
            return np.array(coords)
        if name == "phi":
            if self.phi.ndim == 2:
                mat = np.array(coords).reshape(self.k, self.k)
                nrm = matcore.spectral_norm(mat)
                if nrm > 1.0:
                    mat = mat / nrm
                return mat
            # Keep strictly inside the open interval so re-encoding stays finite.
            if self.space == "nonneg":
                out = np.clip([_sigmoid(c) for c in coords], 1e-12, 1.0 - 1e-12)
            else:
                out = np.clip(np.tanh(np.array(coords)), -1.0 + 1e-12, 1.0 - 1e-12)
            return out[0] if self.phi.ndim == 0 else out
        # eta and shape values share the log map
        return float(np.exp(np.clip(coords[0], -700.0, 700.0)))

    def _component_size(self, name):
        if name == "omega":
            return self.k
        if name == "phi":
            return self.k * self.k if self.phi.ndim == 2 else max(self.phi.ndim * self.k, 1)
        return 1

    @property
    def free(self) -> np.ndarray:
        """The unconstrained coordinates of the free components, concatenated."""
        if not self.free_names:
            return np.zeros(0)
        return np.concatenate([self._encode_component(n) for n in self.free_names])

    def with_free(self, x) -> "ParamVector":
        """Decode unconstrained coordinates back into natural values."""
        x = np.asarray(x, dtype=float)
        updates = {}
        pos = 0
        for name in self.free_names:
            size = self._component_size(name)
            coords = x[pos:pos + size]
            pos += size
            value = self._decode_component(name, coords)
            if name in _CORE_NAMES:
                updates[name] = value
            else:
                updates.setdefault("shape", dict(self.shape))
                updates["shape"][name] = value
        if pos != x.size:
            raise ValueError(f"expected {pos} coordinates, got {x.size}")
        if "shape" in updates:
            updates["shape"] = tuple(sorted(updates["shape"].items()))
        return replace(self, **updates)

    def config(self, model: ObservationModel) -> FilterConfig:
        """Materialize a FilterConfig, rebuilding the model when shapes moved."""
        if self.shape:
            merged = dict(model.shape)
            merged.update(dict(self.shape))
            model = make_model(model.name, **merged)
        phi = self.phi
        if phi.ndim == 0:
            phi = float(phi) * np.eye(self.k)
        elif phi.ndim == 1:
            phi = np.diag(phi)
        penalty = np.eye(self.k) / self.eta
        return FilterConfig(model=model, kind=self.kind, omega=self.omega,
                            phi=phi, penalty=penalty,
                            scaling_zeta=self.scaling_zeta)


def neg_loglik(params: ParamVector, model: ObservationModel, series) -> float:
    """Negative one-step-ahead log likelihood of the decoded configuration.

    Any invariant failure, filter divergence, or numerical breakdown maps to
    +inf so the optimizer simply avoids that region.
    """
    try:
        cfg = params.config(model)
    except (ValueError, FloatingPointError, OverflowError):
        return math.inf
    try:
        out = run_filter(cfg, series)
    except (ValueError, RuntimeError, FloatingPointError, OverflowError):
        return math.inf
    total = out.total_loglik
    if not math.isfinite(total):
        return math.inf
    return -total


def nelder_mead(fn, x0, step=0.25, max_evals=5000, ftol_rel=1e-9):
    """Minimize fn over R^n with a hand-rolled Nelder-Mead simplex.

    Returns (x_best, f_best, n_evals, converged, spread).  Convergence is
    declared when the simplex function spread falls below
    ftol_rel * (1 + |f_best|).
    """
    x0 = np.asarray(x0, dtype=float)
    n = x0.size
    if n == 0:
        return x0, fn(x0), 1, True, 0.0
    pts = [x0.copy()]
    for i in range(n):
        v = x0.copy()
        v[i] += step if v[i] == 0.0 else step * (1.0 + abs(v[i]))
        pts.append(v)
    vals = [fn(p) for p in pts]
    evals = n + 1
    converged = False
    while evals < max_evals:
        order = np.argsort(vals, kind="stable")
        pts = [pts[i] for i in order]
        vals = [vals[i] for i in order]
        spread = vals[-1] - vals[0]
        if math.isfinite(vals[0]) and (not math.isfinite(spread) or spread >= 0):
            if spread < ftol_rel * (1.0 + abs(vals[0])):
                converged = True
                break
        centroid = np.mean(pts[:-1], axis=0)
        reflected = centroid + (centroid - pts[-1])
        f_r = fn(reflected)
        evals += 1
        if vals[0] <= f_r < vals[-2]:
            pts[-1], vals[-1] = reflected, f_r
            continue
        if f_r < vals[0]:
            expanded = centroid + 2.0 * (centroid - pts[-1])
            f_e = fn(expanded)
            evals += 1
            if f_e < f_r:
                pts[-1], vals[-1] = expanded, f_e
            else:
                pts[-1], vals[-1] = reflected, f_r
            continue
        if f_r < vals[-1]:
            contracted = centroid + 0.5 * (reflected - centroid)
        else:
            contracted = centroid - 0.5 * (centroid - pts[-1])
        f_c = fn(contracted)
        evals += 1
        if f_c < min(f_r, vals[-1]):
            pts[-1], vals[-1] = contracted, f_c
            continue
        # Shrink toward the best vertex.
        for i in range(1, n + 1):
            if evals >= max_evals:
                break
            pts[i] = pts[0] + 0.5 * (pts[i] - pts[0])
            vals[i] = fn(pts[i])
            evals += 1
    best = int(np.argmin(vals))
    spread = (max(vals) - min(vals)) if all(map(math.isfinite, vals)) else math.inf
    return pts[best], vals[best], evals, converged, spread


@dataclass(frozen=True)
class FitResult:
    """Outcome of a maximum-likelihood fit."""

    params: ParamVector
    loglik: float
    n_evals: int
    converged: bool
    restarts: int
    final_spread: float


def fit_mle(model: ObservationModel, series, init: ParamVector,
            restarts: int = 3, seed: int = 0, max_evals: int = 5000) -> FitResult:
    """Fit the free coordinates by prediction-error likelihood maximization.

    Runs Nelder-Mead from the initial point and from ``restarts - 1`` jittered
    copies of the best point found so far, keeping the best result.  The
    reported log likelihood never falls below the one at the initial values.
    """
    series = np.asarray(series, dtype=float)
    n_obs = series.shape[0]
    if n_obs < 20:
        raise ValueError("need at least 20 observations to fit")
    if restarts < 1:
        raise ValueError("restarts must be at least 1")
    rng = np.random.default_rng(seed)

    def objective(x):
        return neg_loglik(init.with_free(x), model, series)

    best_x = np.asarray(init.free, dtype=float)
    best_f = objective(best_x)
    total_evals = 1
    any_converged = False
    spread = math.inf
    for r in range(restarts):
        if r == 0:
            start = np.asarray(init.free, dtype=float)
        else:
            start = best_x + rng.normal(0.0, 0.25, size=best_x.size)
        budget = max_evals - 1 if r == 0 else max_evals
        x, f, used, conv, spr = nelder_mead(objective, start, max_evals=budget)
        total_evals += used
        if f < best_f:
            best_x, best_f = x, f
        if conv:
            any_converged = True
            spread = min(spread, spr)
    if not math.isfinite(best_f):
        raise RuntimeError(
            "estimation failed: every evaluated configuration was rejected "
            "(divergent filter or invalid parameters)"
        )
    return FitResult(params=init.with_free(best_x), loglik=-best_f,
                     n_evals=total_evals, converged=any_converged,
                     restarts=restarts, final_spread=spread)
