"""Finite-sample and asymptotic MSE bounds for score-driven filters.

The bounds take the one-step recursion

    MSE_{t|t} <= a MSE_{t|t-1} + b,      MSE_{t+1|t} <= c MSE_{t|t} + d

in the P-weighted squared norm, where (a, b) depend on the update kind
(implicit or explicit) and the curvature range of the driving objective,
and (c, d) on whether the data-generating state dynamics are known or only
bounded through drift moments.  Iterating gives computable finite-sample
envelopes and their fixed points; the helpers at the bottom optimize the
penalty scale against those envelopes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import matcore
from .filter import FilterConfig
from .models import ObservationModel, curvature_constants

__all__ = [
    "KnownDgp",
    "DgpMoments",
    "BoundParams",
    "bound_params",
    "finite_sample_bound",
    "asymptotic_bounds",
    "to_euclidean",
    "optimal_eps_isd",
    "optimal_rho_isd",
    "optimal_eta_ar1",
    "minimize_bound",
    "poisson_quad_moments",
    "golden_section",
]


@dataclass(frozen=True)
class KnownDgp:
    """Known state dynamics: state_t = (I - Phi0) omega0 + Phi0 state_{t-1} + xi_t.

    ``sigma_xi2`` is the (supremum) expected squared Euclidean norm of the
    state innovation.  Phi0 must either be I exactly (random walk) or have
    spectral radius strictly below one.
    """

    omega0: np.ndarray
    Phi0: np.ndarray
    sigma_xi2: float

    def __post_init__(self):
        omega0 = np.atleast_1d(np.asarray(self.omega0, dtype=float))
        phi0 = np.atleast_2d(np.asarray(self.Phi0, dtype=float))
        if phi0.shape[0] != phi0.shape[1] or phi0.shape[0] != omega0.shape[0]:
            raise ValueError("Phi0 must be square and match omega0")
        if float(self.sigma_xi2) < 0:
            raise ValueError("sigma_xi2 must be nonnegative")
        is_identity = np.array_equal(phi0, np.eye(phi0.shape[0]))
        if not is_identity:
            rho = float(np.max(np.abs(np.linalg.eigvals(phi0))))
            if rho >= 1.0:
                raise ValueError(
                    "known dynamics need spectral radius < 1 (or Phi0 = I exactly); "
                    f"got {rho}"
                )
        object.__setattr__(self, "omega0", omega0)
        object.__setattr__(self, "Phi0", phi0)
        object.__setattr__(self, "sigma_xi2", float(self.sigma_xi2))


@dataclass(frozen=True)
class DgpMoments:
    """Moments of the pseudo-true parameter path entering the bounds.

    sigma2     supremum over t of E ||score(y_t, theta*_t)||^2
    q2         supremum of E ||theta*_t - theta*_{t-1}||^2 (squared drift)
    s_omega2   supremum of E ||theta*_t - omega||^2; may be +inf, in which
               case only Phi = I or known-dynamics bounds are available
    known_dgp  optional KnownDgp enabling the sharper known-dynamics branch
    """

    sigma2: float
    q2: float = 0.0
    s_omega2: float = math.inf
    known_dgp: Optional[KnownDgp] = None

    def __post_init__(self):
        if not float(self.sigma2) >= 0:
            raise ValueError("sigma2 must be nonnegative")
        if not float(self.q2) >= 0:
            raise ValueError("q2 must be nonnegative")
        if not float(self.s_omega2) >= 0:
            raise ValueError("s_omega2 must be nonnegative (possibly inf)")


@dataclass(frozen=True)
class BoundParams:
    """Recursion coefficients (a, b, c, d) plus the slack parameters used."""

    a: float
    b: float
    c: float
    d: float
    kind: str
    dgp: str
    eps: Optional[float] = None
    chi: Optional[float] = None


def _update_coeffs(kind, lmin, lmax, alpha_plus, alpha_minus, beta, L, sigma2, chi):
    """(a, b) of the update-step inequality for the given update kind."""
    if kind == "implicit":
        if lmin <= alpha_minus:
            return math.inf, math.inf
        root = 1.0 - alpha_plus / (lmax + alpha_plus) + alpha_minus / (lmin - alpha_minus)
        a = root**2
        return a, a * sigma2 / lmin
    if chi is None or chi <= 0:
        raise ValueError("the explicit bound needs a slack parameter chi > 0")
    if not math.isfinite(beta):
        return math.inf, (1.0 + 1.0 / chi**2) * sigma2 / lmin
    root = 1.0 - min(alpha_plus / lmax - alpha_minus / lmin, 2.0 - beta / lmin)
    a = root**2 + chi**2 * L**2 / lmin**2
    b = (1.0 + 1.0 / chi**2) * sigma2 / lmin
    return a, b


def _prediction_coeffs(lmin, lmax, gamma, moments, norm_i_phi, eps):
    """(c, d) of the unknown-dynamics prediction-step inequality."""
    if eps is None or eps <= 0:
        raise ValueError("the unknown-dynamics bound needs a slack parameter eps > 0")
    gamma_plus, gamma_minus = max(gamma, 0.0), max(-gamma, 0.0)
    c = (1.0 + eps**2) * (1.0 - gamma_plus / lmax + gamma_minus / lmin)
    if norm_i_phi == 0.0:
        drift = math.sqrt(moments.q2)
    else:
        if not math.isfinite(moments.s_omega2):
            raise ValueError(
                "unknown dynamics with Phi != I require a finite s_omega2 moment"
            )
        drift = norm_i_phi * math.sqrt(moments.s_omega2) + math.sqrt(moments.q2)
    d = lmax * (1.0 + 1.0 / eps**2) * drift**2
    return c, d


def bound_params(
    model: ObservationModel,
    cfg: FilterConfig,
    moments: DgpMoments,
    eps: Optional[float] = None,
    chi: Optional[float] = None,
) -> BoundParams:
    """Assemble the (a, b, c, d) recursion coefficients for a configuration."""
    p = cfg.penalty
    lmin, lmax = matcore.eig_bounds(p)
    _alpha, alpha_plus, alpha_minus, beta, L = curvature_constants(model)
    a, b = _update_coeffs(
        cfg.kind, lmin, lmax, alpha_plus, alpha_minus, beta, L, moments.sigma2, chi
    )
    if moments.known_dgp is not None:
        gamma0 = matcore.gamma_coeff(p, moments.known_dgp.Phi0)
        c = 1.0 - max(gamma0, 0.0) / lmax + max(-gamma0, 0.0) / lmin
        d = lmax * moments.known_dgp.sigma_xi2
        dgp = "known"
    else:
        gamma = matcore.gamma_coeff(p, cfg.phi)
        norm_i_phi = matcore.spectral_norm(np.eye(model.k) - cfg.phi)
        c, d = _prediction_coeffs(lmin, lmax, gamma, moments, norm_i_phi, eps)
        dgp = "unknown"
    return BoundParams(a=a, b=b, c=c, d=d, kind=cfg.kind, dgp=dgp, eps=eps, chi=chi)


def finite_sample_bound(bp: BoundParams, mse_1_0: float, t: int) -> float:
    """Bound on the filtered P-weighted MSE after t updates (t >= 1).

    mse_1_0 is the bound (or value) of the initial prediction MSE.
    """
    if t < 1:
        raise ValueError("t must be a positive integer")
    a, b, c, d = bp.a, bp.b, bp.c, bp.d
    if not all(map(math.isfinite, (a, b, c, d))):
        return math.inf
    ac = a * c
    if ac == 1.0:
        raise ValueError("a * c = 1 exactly: use the telescoped form by perturbing")
    try:
        geo_t = (1.0 - ac**t) / (1.0 - ac)
        geo_tm1 = (1.0 - ac ** (t - 1)) / (1.0 - ac)
        return a**t * c ** (t - 1) * mse_1_0 + geo_t * b + geo_tm1 * a * d
    except OverflowError:
        return math.inf


def asymptotic_bounds(bp: BoundParams) -> tuple[float, float]:
    """Fixed points of the recursion: (filter bound, prediction bound).

    The prediction bound always satisfies pred = c * filt + d.  Returns
    (inf, inf) when a c >= 1, where no finite fixed point exists.
    """
    a, b, c, d = bp.a, bp.b, bp.c, bp.d
    if not all(map(math.isfinite, (a, b, c, d))) or a * c >= 1.0:
        return math.inf, math.inf
    filt = (b + a * d) / (1.0 - a * c)
    pred = c * filt + d
    return filt, pred


def to_euclidean(bound: float, p: np.ndarray, w: Optional[np.ndarray] = None) -> float:
    """Convert a P-weighted squared bound to the W-weighted (default Euclidean) one.

    Multiplies by lmax(W) / lmin(P); exact (no slack) when both are scalar
    multiples of the identity.
    """
    lmin_p, _ = matcore.eig_bounds(np.atleast_2d(np.asarray(p, dtype=float)))
    if lmin_p <= 0:
        raise ValueError("P must be positive definite")
    if w is None:
        lmax_w = 1.0
    else:
        _, lmax_w = matcore.eig_bounds(np.atleast_2d(np.asarray(w, dtype=float)))
    if not math.isfinite(bound):
        return math.inf
    return bound * lmax_w / lmin_p


def optimal_eps_isd(tau_im, sigma2, p, phi, s_omega, q) -> float:
    """Bound-minimizing squared slack eps^2 for the implicit unknown-dynamics case.

    Returns +inf when tau_im = 0 (the bound is then decreasing in eps).
    """
    tau = float(tau_im)
    if tau < 0:
        raise ValueError("tau_im must be nonnegative")
    if tau == 0.0:
        return math.inf
    p = np.atleast_2d(np.asarray(p, dtype=float))
    lmin, lmax = matcore.eig_bounds(p)
    phi = np.atleast_2d(np.asarray(phi, dtype=float))
    drift = matcore.spectral_norm(np.eye(phi.shape[0]) - phi) * float(s_omega) + float(q)
    if not math.isfinite(drift):
        raise ValueError("the drift term must be finite; pass s_omega = 0 when Phi = I")
    if drift <= 0:
        raise ValueError("the drift term must be positive")
    inner = tau + tau * (1.0 - tau) * float(sigma2) / (lmax * lmin * drift**2)
    return (1.0 - tau) / (tau + math.sqrt(inner))


def optimal_rho_isd(alpha, sigma2, sigma_xi2, phi0) -> float:
    """Bound-minimizing isotropic penalty scale rho for the implicit filter
    under known dynamics (P = rho I).

    Requires strictly concave curvature alpha > 0 and positive noise levels.
    """
    alpha = float(alpha)
    sigma2 = float(sigma2)
    sigma_xi2 = float(sigma_xi2)
    if alpha <= 0:
        raise ValueError("the closed-form optimum needs alpha > 0")
    if sigma2 <= 0 or sigma_xi2 <= 0:
        raise ValueError("sigma2 and sigma_xi2 must be positive")
    phi0 = np.atleast_2d(np.asarray(phi0, dtype=float))
    nrm2 = matcore.spectral_norm(phi0) ** 2
    gap = sigma2 * (1.0 - nrm2) - alpha**2 * sigma_xi2
    disc = gap**2 + 4.0 * alpha**2 * sigma2 * sigma_xi2
    return (gap + math.sqrt(disc)) / (2.0 * alpha * sigma_xi2)


def optimal_eta_ar1(phi0, sigma_eps2, sigma_xi2) -> float:
    """Bound-minimizing learning rate for the scalar AR(1)-plus-noise model.

    Coincides with the steady-state prediction variance of the exact
    Kalman filter for that model.
    """
    phi0 = float(phi0)
    se2 = float(sigma_eps2)
    sx2 = float(sigma_xi2)
    if se2 <= 0 or sx2 <= 0:
        raise ValueError("noise variances must be positive")
    gap = sx2 - se2 * (1.0 - phi0**2)
    disc = sx2**2 + se2**2 * (1.0 - phi0**2) ** 2 + 2.0 * sx2 * se2 * (1.0 + phi0**2)
    return 0.5 * (gap + math.sqrt(disc))


def golden_section(fn, lo: float, hi: float, probes: int = 64) -> tuple[float, float]:
    """Minimize a unimodal scalar function on [lo, hi] with <= ``probes`` evals.

    Returns (argmin, min).  Written for bound profiles that may evaluate to
    +inf on part of the range.
    """
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = float(lo), float(hi)
    x1 = b - invphi * (b - a)
    x2 = a + invphi * (b - a)
    f1, f2 = fn(x1), fn(x2)
    used = 2
    while used < probes and (b - a) > 1e-13 * (1.0 + abs(a) + abs(b)):
        if f1 <= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - invphi * (b - a)
            f1 = fn(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + invphi * (b - a)
            f2 = fn(x2)
        used += 1
    return (x1, f1) if f1 <= f2 else (x2, f2)


def _scalar_path_bound(model, moments, kind, eta, phi, eps, chi):
    """Euclidean asymptotic filter bound on the P = I/eta path."""
    if eta <= 0:
        return math.inf
    lmin = lmax = 1.0 / eta
    _alpha, alpha_plus, alpha_minus, beta, L = curvature_constants(model)
    a, b = _update_coeffs(kind, lmin, lmax, alpha_plus, alpha_minus, beta, L,
                          moments.sigma2, chi)
    if not math.isfinite(a):
        return math.inf
    if moments.known_dgp is not None:
        phi0 = moments.known_dgp.Phi0
        gamma0 = (1.0 - matcore.spectral_norm(phi0) ** 2) / eta
        c = 1.0 - max(gamma0, 0.0) / lmax + max(-gamma0, 0.0) / lmin
        d = lmax * moments.known_dgp.sigma_xi2
    else:
        phi_abs = abs(float(phi))
        gamma = (1.0 - phi_abs**2) / eta
        try:
            c, d = _prediction_coeffs(lmin, lmax, gamma, moments, abs(1.0 - float(phi)), eps)
        except ValueError:
            return math.inf
    bp = BoundParams(a=a, b=b, c=c, d=d, kind=kind, dgp="x", eps=eps, chi=chi)
    filt, _ = asymptotic_bounds(bp)
    return filt * eta if math.isfinite(filt) else math.inf


def minimize_bound(
    model: ObservationModel,
    moments: DgpMoments,
    kind: str,
    over: str = "eta",
    phi: float = 1.0,
    eta: Optional[float] = None,
    eta_bracket: tuple[float, float] = (1e-5, 1e4),
    chi_bracket: tuple[float, float] = (1e-4, 1e2),
    eps_bracket: tuple[float, float] = (1e-4, 1e2),
) -> dict:
    """Minimize the Euclidean asymptotic filter bound on the P = I/eta path.

    over = "eta"      implicit bound over the learning rate (the slack eps is
                      set to its closed-form optimum when dynamics are unknown)
    over = "eta_chi"  explicit bound jointly over (eta, chi); requires a
                      finite curvature ceiling, otherwise no finite bound exists
    over = "eps"      unknown-dynamics implicit bound over eps at fixed eta

    Returns a dict with the argmin parameters and the minimized "bound".
    All searches are golden-section on a log scale with at most 64 probes
    per level.
    """
    if kind not in ("implicit", "explicit"):
        raise ValueError("kind must be 'implicit' or 'explicit'")
    log_eta = tuple(map(math.log10, eta_bracket))
    log_chi = tuple(map(math.log10, chi_bracket))
    log_eps = tuple(map(math.log10, eps_bracket))

    def eps_star_for(eta_val):
        """Closed-form optimal slack for the implicit unknown-dynamics bound."""
        if moments.known_dgp is not None:
            return None
        lam = 1.0 / eta_val
        _a, ap, am, _b, _L = curvature_constants(model)
        if lam <= am:
            return eps_bracket[0]
        update = 1.0 - ap / (lam + ap) + am / (lam - am)
        tau = phi**2 * update**2  # scalar prediction factor is phi^2 either way
        if tau >= 1.0 or tau <= 0.0:
            return eps_bracket[0]
        if phi == 1.0:
            s_w = 0.0
        elif not math.isfinite(moments.s_omega2):
            return eps_bracket[0]  # bound is infinite regardless of eps
        else:
            s_w = math.sqrt(moments.s_omega2)
        e2 = optimal_eps_isd(tau, moments.sigma2, np.eye(1) / eta_val,
                             np.array([[phi]]), s_w, math.sqrt(moments.q2))
        return math.sqrt(e2) if math.isfinite(e2) else eps_bracket[1]

    if over == "eta":
        if kind != "implicit":
            raise ValueError("over='eta' optimizes the implicit bound; use 'eta_chi'")

        def profile(x):
            eta_val = 10.0**x
            return _scalar_path_bound(model, moments, kind, eta_val, phi,
                                      eps_star_for(eta_val), None)

        x, val = golden_section(profile, *log_eta)
        eta_opt = 10.0**x
        return {"eta": eta_opt, "eps": eps_star_for(eta_opt), "chi": None, "bound": val}

    if over == "eta_chi":
        if kind != "explicit":
            raise ValueError("over='eta_chi' optimizes the explicit bound")
        _a, _ap, _am, _beta, L = curvature_constants(model)
        if not math.isfinite(L):
            raise ValueError(
                "no finite explicit bound exists: the curvature ceiling is infinite"
            )

        def best_chi(eta_val):
            def at_chi(xc):
                chi_val = 10.0**xc
                if moments.known_dgp is None:
                    _, v = golden_section(
                        lambda xe: _scalar_path_bound(model, moments, kind, eta_val,
                                                      phi, 10.0**xe, chi_val),
                        *log_eps, probes=32)
                    return v
                return _scalar_path_bound(model, moments, kind, eta_val, phi,
                                          None, chi_val)

            xc, vc = golden_section(at_chi, *log_chi)
            return 10.0**xc, vc

        x, _ = golden_section(lambda xe: best_chi(10.0**xe)[1], *log_eta)
        eta_opt = 10.0**x
        chi_opt, val = best_chi(eta_opt)
        eps_opt = None
        if moments.known_dgp is None:
            xe, _ = golden_section(
                lambda xe: _scalar_path_bound(model, moments, kind, eta_opt,
                                              phi, 10.0**xe, chi_opt),
                *log_eps)
            eps_opt = 10.0**xe
        return {"eta": eta_opt, "chi": chi_opt, "eps": eps_opt, "bound": val}

    if over == "eps":
        if eta is None:
            raise ValueError("over='eps' needs a fixed eta")
        if moments.known_dgp is not None:
            raise ValueError("eps only enters the unknown-dynamics bound")

        def profile(xe):
            return _scalar_path_bound(model, moments, kind, eta, phi, 10.0**xe, None)

        x, val = golden_section(profile, *log_eps)
        return {"eta": eta, "eps": 10.0**x, "chi": None, "bound": val}

    raise ValueError(f"unknown optimization target {over!r}")


def poisson_quad_moments(omega0, phi0, sigma_xi, omega) -> DgpMoments:
    """Drift moments of the quadratic-link pseudo-truth under a log-linear
    Poisson data generating process.

    The DGP intensity is exp(state) with a stationary Gaussian AR(1) state;
    the quadratic-link pseudo-truth is exp(state / 2).  All three moments
    are lognormal expectations with closed forms; the score second moment
    equals 4 exactly.
    """
    omega0 = float(omega0)
    phi0 = float(phi0)
    sigma_xi = float(sigma_xi)
    omega = float(omega)
    if not -1.0 < phi0 < 1.0:
        raise ValueError("phi0 must lie strictly inside the unit interval")
    if sigma_xi < 0:
        raise ValueError("sigma_xi must be nonnegative")
    var_stat = sigma_xi**2 / (1.0 - phi0**2)
    mean_int = math.exp(omega0 + 0.5 * var_stat)  # E exp(state)
    q2 = 2.0 * mean_int - 2.0 * math.exp(omega0 + sigma_xi**2 / (4.0 * (1.0 - phi0)))
    mean_half = math.exp(0.5 * omega0 + var_stat / 8.0)  # E exp(state / 2)
    s_omega2 = mean_int + omega**2 - 2.0 * omega * mean_half
    return DgpMoments(sigma2=4.0, q2=q2, s_omega2=s_omega2, known_dgp=None)
