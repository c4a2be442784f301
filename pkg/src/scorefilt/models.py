"""Observation-model catalog for score-driven filtering.

Each model packages the *driving* log density ``log_density`` (the objective
whose gradient moves the filtered parameter), its score and Hessian, global
curvature constants ``alpha <= -l'' <= beta``, a closed-form Fisher
information where available, and a sampler for the measurement density.

For most models the driving log density *is* the measurement log density.
The two location families are the exception: their driving objective is the
measurement log density times a constant (scale-dependent) factor chosen so
that the score has unit slope at the centre.  ``measurement_logpdf`` always
evaluates the honest log likelihood used for estimation and reporting.

Scalar-parameter models accept scalar or ndarray ``theta`` / ``y`` and
broadcast, which the simulation code relies on for replication-vectorized
filtering.  Bivariate models take ``y`` with trailing dimension 2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "MODEL_NAMES",
    "ObservationModel",
    "make_model",
    "curvature_constants",
    "fisher_info",
    "trigamma",
]

MODEL_NAMES = (
    "poisson_exp",
    "poisson_quad",
    "negbinom_exp",
    "exponential_exp",
    "gamma_exp",
    "weibull_exp",
    "gauss_vol",
    "student_vol",
    "gauss_dep",
    "student_dep",
    "student_location",
    "egb2_location",
    "gaussian_linear",
    "least_squares",
)


def trigamma(x: float) -> float:
    """Trigamma function psi'(x) for x > 0.

    Uses the recurrence psi'(x) = psi'(x+1) + 1/x^2 to push the argument
    above 8, then an asymptotic Bernoulli-number series; absolute accuracy
    is better than 1e-12 on that range.
    """
    x = float(x)
    if not x > 0.0:
        raise ValueError("trigamma requires x > 0")
    acc = 0.0
    while x < 8.0:
        acc += 1.0 / (x * x)
        x += 1.0
    inv = 1.0 / x
    inv2 = inv * inv
    tail = inv2 * (
        1.0 / 6.0
        - inv2 * (1.0 / 30.0 - inv2 * (1.0 / 42.0 - inv2 * (1.0 / 30.0 - inv2 * 5.0 / 66.0)))
    )
    return acc + inv + 0.5 * inv2 + inv * tail


def _sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


@dataclass(frozen=True)
class ObservationModel:
    """A postulated observation density and its filtering ingredients.

    ``score``/``hessian`` differentiate the driving objective ``log_density``
    with respect to theta.  ``alpha`` and ``beta`` bound the negated Hessian
    uniformly over observations and parameters (beta may be +inf).
    ``fisher`` is the expected outer product of the driving score under the
    measurement density at theta, or None if no closed form is provided.
    ``param_space`` is "real" for unrestricted parameters or "nonneg" when
    the filtered parameter must stay in the closed nonnegative orthant.
    """

    name: str
    k: int
    n: int
    shape: dict = field(default_factory=dict)
    log_density: Callable = None
    measurement_logpdf: Callable = None
    score: Callable = None
    hessian: Callable = None
    fisher: Callable | None = None
    alpha: float = 0.0
    beta: float = math.inf
    param_space: str = "real"
    support: Callable = None
    sample: Callable = None


def curvature_constants(model: ObservationModel) -> tuple[float, float, float, float, float]:
    """Return (alpha, alpha_plus, alpha_minus, beta, L) for the model.

    alpha_plus/alpha_minus split alpha into positive and negative parts;
    L = max(alpha_minus, beta) is the global Lipschitz constant of the score
    and is +inf whenever beta is.
    """
    alpha = float(model.alpha)
    beta = float(model.beta)
    alpha_plus = max(alpha, 0.0)
    alpha_minus = max(-alpha, 0.0)
    L = max(alpha_minus, beta)
    return alpha, alpha_plus, alpha_minus, beta, L


def fisher_info(model: ObservationModel, theta) -> np.ndarray:
    """Closed-form Fisher information at theta as a (k, k) symmetric matrix.

    Raises NotImplementedError when the model carries no closed form.
    """
    if model.fisher is None:
        raise NotImplementedError(f"model {model.name!r} has no closed-form Fisher information")
    out = np.asarray(model.fisher(theta), dtype=float)
    if out.ndim == 0:
        out = out.reshape(1, 1)
    return 0.5 * (out + out.T)


# ---------------------------------------------------------------------------
# scalar count / intensity families (exponential link unless noted)
# ---------------------------------------------------------------------------


def _is_count(y) -> bool:
    arr = np.asarray(y, dtype=float)
    return bool(np.all(np.isfinite(arr)) and np.all(arr >= 0) and np.all(arr == np.round(arr)))


def _poisson_exp() -> ObservationModel:
    def log_density(y, theta):
        return y * theta - np.exp(theta) - _lgamma(y + 1.0)

    def score(y, theta):
        return y - np.exp(theta)

    def hessian(y, theta):
        return -np.exp(theta)

    return ObservationModel(
        name="poisson_exp", k=1, n=1,
        log_density=log_density, measurement_logpdf=log_density,
        score=score, hessian=hessian,
        fisher=lambda theta: np.exp(theta),
        alpha=0.0, beta=math.inf, param_space="real",
        support=_is_count,
        sample=lambda rng, theta: rng.poisson(np.exp(theta)),
    )


def _poisson_quad() -> ObservationModel:
    # Intensity theta^2 keeps the filtered parameter on the nonnegative ray
    # and makes the negated Hessian 2 + 2 y / theta^2 >= 2.
    def log_density(y, theta):
        y = np.asarray(y, dtype=float)
        theta = np.asarray(theta, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            term = np.where(y > 0, 2.0 * y * np.log(np.where(theta > 0, theta, 1.0)), 0.0)
            term = np.where((y > 0) & (theta <= 0), -np.inf, term)
        return term - theta**2 - _lgamma(y + 1.0)

    def score(y, theta):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(
                np.asarray(y) > 0,
                2.0 * np.asarray(y, dtype=float) / np.asarray(theta, dtype=float),
                0.0,
            ) - 2.0 * np.asarray(theta, dtype=float)

    def hessian(y, theta):
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(
                np.asarray(y) > 0,
                np.asarray(y, dtype=float) / np.asarray(theta, dtype=float) ** 2,
                0.0,
            )
        return -2.0 - 2.0 * ratio

    return ObservationModel(
        name="poisson_quad", k=1, n=1,
        log_density=log_density, measurement_logpdf=log_density,
        score=score, hessian=hessian,
        fisher=lambda theta: 4.0 * np.ones_like(np.asarray(theta, dtype=float)),
        alpha=2.0, beta=math.inf, param_space="nonneg",
        support=_is_count,
        sample=lambda rng, theta: rng.poisson(np.asarray(theta, dtype=float) ** 2),
    )


def _negbinom_exp(kappa: float = 4.0) -> ObservationModel:
    kappa = _shape_value(kappa, "negbinom_exp requires kappa > 0")

    def log_density(y, theta):
        lam = np.exp(theta)
        return (
            _lgamma(y + kappa) - _lgamma(kappa) - _lgamma(y + 1.0)
            + kappa * np.log(kappa) + y * theta
            - (kappa + y) * np.log(kappa + lam)
        )

    def score(y, theta):
        lam = np.exp(theta)
        return y - lam * (kappa + y) / (kappa + lam)

    def hessian(y, theta):
        lam = np.exp(theta)
        return -kappa * lam * (kappa + y) / (kappa + lam) ** 2

    return ObservationModel(
        name="negbinom_exp", k=1, n=1, shape={"kappa": kappa},
        log_density=log_density, measurement_logpdf=log_density,
        score=score, hessian=hessian,
        fisher=lambda theta: kappa * np.exp(theta) / (kappa + np.exp(theta)),
        alpha=0.0, beta=math.inf, param_space="real",
        support=_is_count,
        sample=lambda rng, theta: rng.negative_binomial(
            kappa, kappa / (kappa + np.exp(np.asarray(theta, dtype=float)))
        ),
    )


def _exponential_exp() -> ObservationModel:
    def log_density(y, theta):
        return theta - np.exp(theta) * y

    def score(y, theta):
        return 1.0 - np.exp(theta) * y

    def hessian(y, theta):
        return -np.exp(theta) * y

    return ObservationModel(
        name="exponential_exp", k=1, n=1,
        log_density=log_density, measurement_logpdf=log_density,
        score=score, hessian=hessian,
        fisher=lambda theta: np.ones_like(np.asarray(theta, dtype=float)),
        alpha=0.0, beta=math.inf, param_space="real",
        support=lambda y: bool(np.all(np.asarray(y, dtype=float) >= 0)),
        sample=lambda rng, theta: rng.exponential(np.exp(-np.asarray(theta, dtype=float))),
    )


def _gamma_exp(kappa: float = 1.5) -> ObservationModel:
    kappa = _shape_value(kappa, "gamma_exp requires kappa > 0")

    def log_density(y, theta):
        return -kappa * theta - y * np.exp(-theta) + (kappa - 1.0) * np.log(y) - _lgamma(kappa)

    def score(y, theta):
        return y * np.exp(-theta) - kappa

    def hessian(y, theta):
        return -y * np.exp(-theta)

    return ObservationModel(
        name="gamma_exp", k=1, n=1, shape={"kappa": kappa},
        log_density=log_density, measurement_logpdf=log_density,
        score=score, hessian=hessian,
        fisher=lambda theta: kappa * np.ones_like(np.asarray(theta, dtype=float)),
        alpha=0.0, beta=math.inf, param_space="real",
        support=lambda y: bool(np.all(np.asarray(y, dtype=float) > 0)),
        sample=lambda rng, theta: rng.gamma(kappa, scale=np.exp(np.asarray(theta, dtype=float))),
    )


def _weibull_exp(kappa: float = 1.2) -> ObservationModel:
    kappa = _shape_value(kappa, "weibull_exp requires kappa > 0")

    def log_density(y, theta):
        r = y * np.exp(-theta)
        return np.log(kappa) + (kappa - 1.0) * np.log(y) - kappa * theta - r**kappa

    def score(y, theta):
        return kappa * (y * np.exp(-theta)) ** kappa - kappa

    def hessian(y, theta):
        return -(kappa**2) * (y * np.exp(-theta)) ** kappa

    def sample(rng, theta):
        theta = np.asarray(theta, dtype=float)
        return np.exp(theta) * rng.weibull(kappa, size=theta.shape)

    return ObservationModel(
        name="weibull_exp", k=1, n=1, shape={"kappa": kappa},
        log_density=log_density, measurement_logpdf=log_density,
        score=score, hessian=hessian,
        fisher=lambda theta: kappa**2 * np.ones_like(np.asarray(theta, dtype=float)),
        alpha=0.0, beta=math.inf, param_space="real",
        support=lambda y: bool(np.all(np.asarray(y, dtype=float) > 0)),
        sample=sample,
    )


# ---------------------------------------------------------------------------
# volatility families: Var(y) = sigma2 * exp(theta)
# ---------------------------------------------------------------------------


def _gauss_vol(sigma2: float = 1.0) -> ObservationModel:
    sigma2 = float(sigma2)
    if sigma2 <= 0:
        raise ValueError("gauss_vol requires sigma2 > 0")

    def log_density(y, theta):
        return -0.5 * (np.log(2.0 * np.pi * sigma2) + theta + y**2 * np.exp(-theta) / sigma2)

    def score(y, theta):
        return 0.5 * y**2 * np.exp(-theta) / sigma2 - 0.5

    def hessian(y, theta):
        return -0.5 * y**2 * np.exp(-theta) / sigma2

    def sample(rng, theta):
        theta = np.asarray(theta, dtype=float)
        return rng.normal(size=theta.shape) * np.sqrt(sigma2) * np.exp(0.5 * theta)

    return ObservationModel(
        name="gauss_vol", k=1, n=1, shape={"sigma2": sigma2},
        log_density=log_density, measurement_logpdf=log_density,
        score=score, hessian=hessian,
        fisher=lambda theta: 0.5 * np.ones_like(np.asarray(theta, dtype=float)),
        alpha=0.0, beta=math.inf, param_space="real",
        support=lambda y: bool(np.all(np.isfinite(np.asarray(y, dtype=float)))),
        sample=sample,
    )


def _student_vol(nu: float = 6.0, sigma2: float = 1.0) -> ObservationModel:
    nu = float(nu)
    sigma2 = float(sigma2)
    if nu <= 2:
        raise ValueError("student_vol requires nu > 2")
    if sigma2 <= 0:
        raise ValueError("student_vol requires sigma2 > 0")
    const = (
        _lgamma((nu + 1.0) / 2.0) - _lgamma(nu / 2.0)
        - 0.5 * math.log(math.pi * (nu - 2.0)) - 0.5 * math.log(sigma2)
    )

    def log_density(y, theta):
        u = y**2 * np.exp(-theta) / sigma2
        return const - 0.5 * theta - 0.5 * (nu + 1.0) * np.log1p(u / (nu - 2.0))

    def _weight(y, theta):
        u = y**2 * np.exp(-theta) / sigma2
        return (nu + 1.0) / (nu - 2.0 + u), u

    def score(y, theta):
        w, u = _weight(y, theta)
        return 0.5 * w * u - 0.5

    def hessian(y, theta):
        w, u = _weight(y, theta)
        return -0.5 * ((nu - 2.0) / (nu + 1.0)) * w**2 * u

    def sample(rng, theta):
        theta = np.asarray(theta, dtype=float)
        scale = np.sqrt(sigma2 * (nu - 2.0) / nu) * np.exp(0.5 * theta)
        return scale * rng.standard_t(nu, size=theta.shape)

    return ObservationModel(
        name="student_vol", k=1, n=1, shape={"nu": nu, "sigma2": sigma2},
        log_density=log_density, measurement_logpdf=log_density,
        score=score, hessian=hessian,
        fisher=lambda theta: nu / (2.0 * nu + 6.0) * np.ones_like(np.asarray(theta, dtype=float)),
        alpha=0.0, beta=(nu + 1.0) / 8.0, param_space="real",
        support=lambda y: bool(np.all(np.isfinite(np.asarray(y, dtype=float)))),
        sample=sample,
    )


# ---------------------------------------------------------------------------
# bivariate dependence families: correlation rho = tanh(theta / 2)
# ---------------------------------------------------------------------------


def _split_pair(y):
    y = np.asarray(y, dtype=float)
    return y[..., 0], y[..., 1]


def _dep_parts(y, theta):
    y1, y2 = _split_pair(y)
    rho = np.tanh(0.5 * np.asarray(theta, dtype=float))
    one = 1.0 - rho**2
    z1 = y1 - rho * y2
    z2 = y2 - rho * y1
    return y1, y2, rho, one, z1, z2


def _gauss_dep() -> ObservationModel:
    def log_density(y, theta):
        y1, y2, rho, one, _, _ = _dep_parts(y, theta)
        quad = y1**2 - 2.0 * rho * y1 * y2 + y2**2
        return -math.log(2.0 * math.pi) - 0.5 * np.log(one) - 0.5 * quad / one

    def score(y, theta):
        _, _, rho, one, z1, z2 = _dep_parts(y, theta)
        return 0.5 * rho + 0.5 * z1 * z2 / one

    def hessian(y, theta):
        _, _, rho, one, z1, z2 = _dep_parts(y, theta)
        return 0.25 * one - 0.25 * (z1**2 + z2**2) / one

    def fisher(theta):
        rho = np.tanh(0.5 * np.asarray(theta, dtype=float))
        return 0.25 * (1.0 + rho**2)

    def sample(rng, theta):
        theta = np.asarray(theta, dtype=float)
        rho = np.tanh(0.5 * theta)
        g1 = rng.normal(size=theta.shape)
        g2 = rng.normal(size=theta.shape)
        y1 = g1
        y2 = rho * g1 + np.sqrt(1.0 - rho**2) * g2
        return np.stack([y1, y2], axis=-1)

    return ObservationModel(
        name="gauss_dep", k=1, n=2,
        log_density=log_density, measurement_logpdf=log_density,
        score=score, hessian=hessian, fisher=fisher,
        alpha=-0.25, beta=math.inf, param_space="real",
        support=lambda y: np.asarray(y).shape[-1] == 2
        and bool(np.all(np.isfinite(np.asarray(y, dtype=float)))),
        sample=sample,
    )


def _student_dep(nu: float = 6.0) -> ObservationModel:
    nu = float(nu)
    if nu <= 2:
        raise ValueError("student_dep requires nu > 2")
    const = math.log(nu / (2.0 * math.pi * (nu - 2.0)))

    def _parts(y, theta):
        y1, y2, rho, one, z1, z2 = _dep_parts(y, theta)
        quad = (y1**2 - 2.0 * rho * y1 * y2 + y2**2) / one
        w = (nu + 2.0) / (nu - 2.0 + quad)
        return rho, one, z1, z2, quad, w

    def log_density(y, theta):
        rho, one, _, _, quad, _ = _parts(y, theta)
        return const - 0.5 * np.log(one) - 0.5 * (nu + 2.0) * np.log1p(quad / (nu - 2.0))

    def score(y, theta):
        rho, one, z1, z2, _, w = _parts(y, theta)
        return 0.5 * rho + 0.5 * w * z1 * z2 / one

    def hessian(y, theta):
        rho, one, z1, z2, _, w = _parts(y, theta)
        return (
            0.25 * one
            - 0.25 * w * (z1**2 + z2**2) / one
            + 0.5 * w**2 * z1**2 * z2**2 / ((nu + 2.0) * one**2)
        )

    def fisher(theta):
        rho = np.tanh(0.5 * np.asarray(theta, dtype=float))
        return (2.0 + nu * (1.0 + rho**2)) / (4.0 * (nu + 4.0))

    def sample(rng, theta):
        theta = np.asarray(theta, dtype=float)
        rho = np.tanh(0.5 * theta)
        g1 = rng.normal(size=theta.shape)
        g2 = rng.normal(size=theta.shape)
        mix = np.sqrt((nu - 2.0) / rng.chisquare(nu, size=theta.shape))
        y1 = g1 * mix
        y2 = (rho * g1 + np.sqrt(1.0 - rho**2) * g2) * mix
        return np.stack([y1, y2], axis=-1)

    return ObservationModel(
        name="student_dep", k=1, n=2, shape={"nu": nu},
        log_density=log_density, measurement_logpdf=log_density,
        score=score, hessian=hessian, fisher=fisher,
        alpha=-0.25, beta=(nu + 1.0) / 4.0, param_space="real",
        support=lambda y: np.asarray(y).shape[-1] == 2
        and bool(np.all(np.isfinite(np.asarray(y, dtype=float)))),
        sample=sample,
    )


# ---------------------------------------------------------------------------
# location families with scaled driving objectives
# ---------------------------------------------------------------------------


def _student_location(nu: float = 5.0, scale: float = 1.0) -> ObservationModel:
    nu = float(nu)
    scale = float(scale)
    if nu <= 0:
        raise ValueError("student_location requires nu > 0")
    if scale <= 0:
        raise ValueError("student_location requires scale > 0")
    s2 = scale**2
    # Multiplying the Student-t log likelihood by s2 * nu / (nu + 1) makes the
    # driving score (y - theta) / (1 + (y - theta)^2 / (nu s2)), whose slope
    # at the centre is exactly one; its negated Hessian then lives in
    # [-1/8, 1] no matter the scale or degrees of freedom.
    factor = s2 * nu / (nu + 1.0)
    const = (
        _lgamma((nu + 1.0) / 2.0) - _lgamma(nu / 2.0)
        - 0.5 * math.log(nu * math.pi) - math.log(scale)
    )

    def measurement_logpdf(y, theta):
        u = (y - theta) ** 2 / (nu * s2)
        return const - 0.5 * (nu + 1.0) * np.log1p(u)

    def log_density(y, theta):
        return factor * measurement_logpdf(y, theta)

    def score(y, theta):
        e = y - theta
        return e / (1.0 + e**2 / (nu * s2))

    def hessian(y, theta):
        u = (y - theta) ** 2 / (nu * s2)
        return -(1.0 - u) / (1.0 + u) ** 2

    def sample(rng, theta):
        theta = np.asarray(theta, dtype=float)
        return theta + scale * rng.standard_t(nu, size=theta.shape)

    return ObservationModel(
        name="student_location", k=1, n=1, shape={"nu": nu, "scale": scale},
        log_density=log_density, measurement_logpdf=measurement_logpdf,
        score=score, hessian=hessian,
        fisher=lambda theta: s2 * nu**2 / ((nu + 1.0) * (nu + 3.0))
        * np.ones_like(np.asarray(theta, dtype=float)),
        alpha=-0.125, beta=1.0, param_space="real",
        support=lambda y: bool(np.all(np.isfinite(np.asarray(y, dtype=float)))),
        sample=sample,
    )


def _egb2_location(kappa: float = 0.5, scale: float = 1.0) -> ObservationModel:
    kappa = float(kappa)
    scale = float(scale)
    if kappa <= 0:
        raise ValueError("egb2_location requires kappa > 0")
    if scale <= 0:
        raise ValueError("egb2_location requires scale > 0")
    psi1 = trigamma(kappa)
    slope = math.sqrt(2.0 * psi1) / scale  # dz/dy for the standardized variate
    log_norm = 0.5 * math.log(2.0 * psi1) - math.log(scale) - (
        2.0 * _lgamma_f(kappa) - _lgamma_f(2.0 * kappa)
    )
    s2 = scale**2
    beta_curv = kappa * psi1  # sup of the negated driving Hessian

    def measurement_logpdf(y, theta):
        z = slope * (y - theta)
        return kappa * z - 2.0 * kappa * np.logaddexp(0.0, z) + log_norm

    def log_density(y, theta):
        # Scaling by scale^2 gives a scale-free curvature range (0, kappa psi'(kappa)].
        return s2 * measurement_logpdf(y, theta)

    def score(y, theta):
        z = slope * (y - theta)
        return s2 * slope * kappa * (2.0 * _sigmoid(z) - 1.0)

    def hessian(y, theta):
        z = slope * (y - theta)
        sig = _sigmoid(z)
        return -4.0 * kappa * psi1 * sig * (1.0 - sig)

    def sample(rng, theta):
        theta = np.asarray(theta, dtype=float)
        b = rng.beta(kappa, kappa, size=theta.shape)
        z = np.log(b) - np.log1p(-b)
        return theta + z / slope

    return ObservationModel(
        name="egb2_location", k=1, n=1, shape={"kappa": kappa, "scale": scale},
        log_density=log_density, measurement_logpdf=measurement_logpdf,
        score=score, hessian=hessian,
        fisher=lambda theta: 2.0 * kappa**2 * psi1 * s2 / (2.0 * kappa + 1.0)
        * np.ones_like(np.asarray(theta, dtype=float)),
        alpha=0.0, beta=beta_curv, param_space="real",
        support=lambda y: bool(np.all(np.isfinite(np.asarray(y, dtype=float)))),
        sample=sample,
    )


# ---------------------------------------------------------------------------
# linear-Gaussian families (vector parameter)
# ---------------------------------------------------------------------------


def _gaussian_linear(d=None, Z=None, Sigma_eps=None) -> ObservationModel:
    Z = np.atleast_2d(np.asarray(Z if Z is not None else [[1.0]], dtype=float))
    n, k = Z.shape
    d = np.zeros(n) if d is None else np.asarray(d, dtype=float).reshape(n)
    Sigma_eps = (
        np.eye(n) if Sigma_eps is None else np.atleast_2d(np.asarray(Sigma_eps, dtype=float))
    )
    if Sigma_eps.shape != (n, n):
        raise ValueError("Sigma_eps must be n x n")
    Sigma_inv = np.linalg.inv(Sigma_eps)
    Sigma_inv = 0.5 * (Sigma_inv + Sigma_inv.T)
    info = Z.T @ Sigma_inv @ Z
    info = 0.5 * (info + info.T)
    chol = np.linalg.cholesky(Sigma_eps)
    sign, logdet = np.linalg.slogdet(Sigma_eps)
    if sign <= 0:
        raise ValueError("Sigma_eps must be positive definite")
    log_const = -0.5 * (n * math.log(2.0 * math.pi) + logdet)
    from . import matcore

    lmin, lmax = matcore.eig_bounds(info)

    def _residual(y, theta):
        y = np.asarray(y, dtype=float)
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        return y - d - theta @ Z.T if theta.ndim > 1 else y - d - Z @ theta

    def log_density(y, theta):
        r = _residual(y, theta)
        return log_const - 0.5 * np.einsum("...i,ij,...j->...", r, Sigma_inv, r)

    def score(y, theta):
        r = _residual(y, theta)
        return r @ Sigma_inv @ Z if r.ndim > 1 else Z.T @ Sigma_inv @ r

    def sample(rng, theta):
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        mean = d + (theta @ Z.T if theta.ndim > 1 else Z @ theta)
        noise = rng.normal(size=mean.shape) @ chol.T
        return mean + noise

    return ObservationModel(
        name="gaussian_linear", k=k, n=n,
        shape={"d": d, "Z": Z, "Sigma_eps": Sigma_eps},
        log_density=log_density, measurement_logpdf=log_density,
        score=score, hessian=lambda y, theta: -info,
        fisher=lambda theta: info,
        alpha=lmin, beta=lmax, param_space="real",
        support=lambda y: np.atleast_1d(np.asarray(y, dtype=float)).shape[-1] == n
        and bool(np.all(np.isfinite(np.asarray(y, dtype=float)))),
        sample=sample,
    )


def _least_squares(A=None) -> ObservationModel:
    A = np.atleast_2d(np.asarray(A if A is not None else [[1.0]], dtype=float))
    n, k = A.shape
    gram = A.T @ A
    gram = 0.5 * (gram + gram.T)
    from . import matcore

    lmin, lmax = matcore.eig_bounds(gram)
    log_const = -0.5 * n * math.log(2.0 * math.pi)

    def _residual(y, theta):
        y = np.asarray(y, dtype=float)
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        return y - theta @ A.T if theta.ndim > 1 else y - A @ theta

    def log_density(y, theta):
        r = _residual(y, theta)
        return log_const - 0.5 * np.sum(r * r, axis=-1)

    def score(y, theta):
        r = _residual(y, theta)
        return r @ A if r.ndim > 1 else A.T @ r

    def sample(rng, theta):
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        mean = theta @ A.T if theta.ndim > 1 else A @ theta
        return mean + rng.normal(size=mean.shape)

    return ObservationModel(
        name="least_squares", k=k, n=n, shape={"A": A},
        log_density=log_density, measurement_logpdf=log_density,
        score=score, hessian=lambda y, theta: -gram,
        fisher=lambda theta: gram,
        alpha=lmin, beta=lmax, param_space="real",
        support=lambda y: np.atleast_1d(np.asarray(y, dtype=float)).shape[-1] == n
        and bool(np.all(np.isfinite(np.asarray(y, dtype=float)))),
        sample=sample,
    )


def _lgamma(x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        return math.lgamma(float(x))
    return np.vectorize(math.lgamma)(x)


def _lgamma_f(x: float) -> float:
    return math.lgamma(float(x))


_CATALOG: dict[str, Callable[..., ObservationModel]] = {
    "poisson_exp": _poisson_exp,
    "poisson_quad": _poisson_quad,
    "negbinom_exp": _negbinom_exp,
    "exponential_exp": _exponential_exp,
    "gamma_exp": _gamma_exp,
    "weibull_exp": _weibull_exp,
    "gauss_vol": _gauss_vol,
    "student_vol": _student_vol,
    "gauss_dep": _gauss_dep,
    "student_dep": _student_dep,
    "student_location": _student_location,
    "egb2_location": _egb2_location,
    "gaussian_linear": _gaussian_linear,
    "least_squares": _least_squares,
}


def make_model(name: str, **shape) -> ObservationModel:
    """Build a catalog model by name, passing shape parameters through.

    Raises ValueError for unknown names; unknown shape keywords surface as
    TypeError from the specific builder.
    """
    try:
        builder = _CATALOG[name]
    except KeyError:
        raise ValueError(
            f"unknown model {name!r}; available: {', '.join(MODEL_NAMES)}"
        ) from None
    return builder(**shape)
