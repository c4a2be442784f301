"""Contraction certificates for score-driven filters.

The filtered paths started from two different initializations contract
toward each other at rate tau per step (in the squared P-weighted norm)
whenever tau < 1, where tau multiplies a prediction factor, controlled by
the margin gamma = lmin(P - Phi' P Phi), with a squared update factor
controlled by the curvature range [alpha, beta] of the driving objective.
This module computes those factors, the resulting certificates, and an
empirical two-path contraction diagnostic.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import matcore
from .filter import FilterConfig, run_filter
from .models import ObservationModel, curvature_constants, trigamma

__all__ = [
    "StabilityReport",
    "stability_report",
    "student_conditions",
    "egb2_esd_condition",
    "empirical_invertibility",
]


@dataclass(frozen=True)
class StabilityReport:
    """Certificate ingredients for a filter configuration.

    ``update_norm_bound_*`` bound the P-operator norm of one update step;
    ``tau_*`` are the per-step contraction rates of the squared P-distance
    between two filtered paths (prediction factor times squared update
    factor).  ``certificate_*`` require a strict tau < 1 together with the
    penalty floor lmin(P) > alpha_minus.
    """

    gamma: float
    gamma_plus: float
    gamma_minus: float
    alpha: float
    beta: float
    update_norm_bound_isd: float
    update_norm_bound_esd: float
    tau_im: float
    tau_ex: float
    assumption2_ok: bool
    certificate_isd: bool
    certificate_esd: bool


def stability_report(model: ObservationModel, cfg: FilterConfig) -> StabilityReport:
    """Compute contraction factors and certificates for ``cfg`` under ``model``."""
    p = cfg.penalty
    lmin, lmax = matcore.eig_bounds(p)
    gamma = matcore.gamma_coeff(p, cfg.phi)
    gamma_plus = max(gamma, 0.0)
    gamma_minus = max(-gamma, 0.0)
    alpha, alpha_plus, alpha_minus, beta, _L = curvature_constants(model)

    assumption2_ok = lmin > alpha_minus
    pred_factor = 1.0 - gamma_plus / lmax + gamma_minus / lmin

    if assumption2_ok:
        update_isd = 1.0 - alpha_plus / (lmax + alpha_plus) + alpha_minus / (lmin - alpha_minus)
    else:
        update_isd = math.inf
    if math.isfinite(beta):
        update_esd = 1.0 - min(alpha_plus / lmax - alpha_minus / lmin, 2.0 - beta / lmin)
    else:
        update_esd = math.inf

    tau_im = pred_factor * update_isd**2 if math.isfinite(update_isd) else math.inf
    tau_ex = pred_factor * update_esd**2 if math.isfinite(update_esd) else math.inf

    certificate_isd = assumption2_ok and tau_im < 1.0
    certificate_esd = assumption2_ok and math.isfinite(beta) and tau_ex < 1.0

    return StabilityReport(
        gamma=gamma,
        gamma_plus=gamma_plus,
        gamma_minus=gamma_minus,
        alpha=alpha,
        beta=beta,
        update_norm_bound_isd=update_isd,
        update_norm_bound_esd=update_esd,
        tau_im=tau_im,
        tau_ex=tau_ex,
        assumption2_ok=assumption2_ok,
        certificate_isd=certificate_isd,
        certificate_esd=certificate_esd,
    )


def student_conditions(phi: float, eta: float) -> tuple[bool, bool]:
    """Sufficient-stability checks for the scalar Student-t location filter.

    Returns (esd_ok, isd_ok).  Both demand eta < 8 (the penalty floor for a
    curvature dipping to -1/8).  The explicit check additionally requires

        |phi| < 1,   eta < 8 (1/|phi| - 1),   eta < 1 + 1/|phi|,

    which together are exactly |phi| max(1 + eta/8, eta - 1) < 1.  The
    implicit check is the conservative display |phi| < (1 - eta/8)^2.
    """
    phi = abs(float(phi))
    eta = float(eta)
    if eta <= 0:
        raise ValueError("eta must be positive")
    if phi == 0.0:
        esd_ok = eta < 8.0
    else:
        esd_ok = (
            eta < 8.0
            and phi < 1.0
            and eta < 8.0 * (1.0 / phi - 1.0)
            and eta < 1.0 + 1.0 / phi
        )
    isd_ok = eta < 8.0 and phi < (1.0 - eta / 8.0) ** 2
    return esd_ok, isd_ok


def egb2_esd_condition(phi: float, eta: float, kappa: float) -> tuple[float, bool]:
    """Explicit-update stability check for the EGB2 location filter.

    Returns (lhs, ok) with lhs = phi^2 (kappa psi'(kappa) eta - 1)^2; the
    filter is certified when lhs < 1.
    """
    phi = float(phi)
    eta = float(eta)
    kappa = float(kappa)
    if eta <= 0 or kappa <= 0:
        raise ValueError("eta and kappa must be positive")
    beta = kappa * trigamma(kappa)
    lhs = phi**2 * (beta * eta - 1.0) ** 2
    return lhs, lhs < 1.0


def empirical_invertibility(
    model: ObservationModel,
    cfg: FilterConfig,
    series,
    theta0_a,
    theta0_b,
) -> np.ndarray:
    """Two-path contraction diagnostic.

    Runs the filter from two initializations and returns the squared
    P-weighted gaps [gap_0, gap_1, ..., gap_T] between the updated paths.
    When the configuration is certified, each gap is verified against the
    geometric envelope tau^t gap_0; a violation would falsify the
    certificate and raises RuntimeError.
    """
    k = model.k
    theta0_a = np.asarray(theta0_a, dtype=float).reshape(k)
    theta0_b = np.asarray(theta0_b, dtype=float).reshape(k)
    cfg_a = dataclasses.replace(cfg, theta_init=theta0_a)
    cfg_b = dataclasses.replace(cfg, theta_init=theta0_b)
    out_a = run_filter(cfg_a, series)
    out_b = run_filter(cfg_b, series)
    if out_a.diverged or out_b.diverged:
        raise RuntimeError("filter diverged during the invertibility diagnostic")

    p = cfg.penalty
    T = out_a.updated.shape[0]
    gaps = np.empty(T + 1)
    gaps[0] = matcore.weighted_norm2(theta0_a - theta0_b, p)
    for t in range(T):
        gaps[t + 1] = matcore.weighted_norm2(out_a.updated[t] - out_b.updated[t], p)

    report = stability_report(model, cfg)
    certified = report.certificate_isd if cfg.kind == "implicit" else report.certificate_esd
    if certified:
        tau = report.tau_im if cfg.kind == "implicit" else report.tau_ex
        envelope = gaps[0] * tau ** np.arange(T + 1)
        bad = gaps > envelope * (1.0 + 1e-8) + 1e-300
        if np.any(bad):
            t_bad = int(np.argmax(bad))
            raise RuntimeError(
                f"certified contraction violated at step {t_bad}: "
                f"gap {gaps[t_bad]:.6e} > envelope {envelope[t_bad]:.6e}"
            )
    return gaps
