"""Package-level acceptance checks.

Each test pins one headline guarantee of the filtering toolkit end to end,
with explicit numeric tolerances.  Two tests are heavyweight by design: the
nine-model grid replication is gated behind SCOREFILT_SLOW=1 (roughly an
hour of single-core compute), and the Poisson-link divergence study runs
per-replication calibration (several minutes).  The Treasury-bill study is
skipped when the dataset has not been fetched (see scripts/fetch_tbill.py).
"""

import math
import os
import subprocess
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from numpy.testing import assert_allclose

from scorefilt.bounds import (
    DgpMoments,
    KnownDgp,
    asymptotic_bounds,
    bound_params,
    minimize_bound,
    optimal_eta_ar1,
    poisson_quad_moments,
)
from scorefilt.estimate import ParamVector, fit_mle
from scorefilt.filter import FilterConfig, run_filter, update_explicit, update_implicit
from scorefilt.models import make_model
from scorefilt.simlab import (
    DgpSpec,
    _simulate_scalar_batch,
    filter_batch,
    kalman_reference,
    kalman_steady_state,
    run_experiment,
    simulate,
)
from scorefilt.stability import egb2_esd_condition, stability_report, student_conditions

REPO_ROOT = Path(__file__).resolve().parent.parent


def _random_psd(rng, n, jitter=0.3):
    root = rng.normal(size=(n, n))
    return root @ root.T + jitter * np.eye(n)


def _stable_matrix(rng, k, radius):
    raw = rng.normal(size=(k, k))
    scale = max(abs(np.linalg.eigvals(raw)))
    return radius * raw / scale


# ---------------------------------------------------------------------------
# 1. Kalman equivalence on random linear-Gaussian instances
# ---------------------------------------------------------------------------


def test_kalman_equivalence_random_instances():
    # ISD with learning rate = prediction covariance and ESD with learning
    # rate = updated covariance both reproduce the Kalman mean update to
    # 1e-10 on 50 random instances (state dim <= 4, obs dim <= 6), in < 5 s.
    rng = np.random.default_rng(20240514)
    started = time.monotonic()
    for _ in range(50):
        k = int(rng.integers(1, 5))
        n = int(rng.integers(1, 7))
        d = rng.normal(size=n)
        Z = rng.normal(size=(n, k))
        Sigma_eps = _random_psd(rng, n)
        Sigma_xi = _random_psd(rng, k, jitter=0.1)
        omega0 = rng.normal(size=k)
        Phi0 = _stable_matrix(rng, k, radius=rng.uniform(0.3, 0.95))
        series = rng.normal(scale=2.0, size=(6, n))
        model = make_model("gaussian_linear", d=d, Z=Z, Sigma_eps=Sigma_eps)
        ref = kalman_reference(d, Z, Sigma_eps, omega0, Phi0, Sigma_xi, series,
                               theta0=omega0, P0=_random_psd(rng, k, jitter=0.2))
        for t in range(series.shape[0]):
            cfg_im = FilterConfig(model=model, kind="implicit", omega=omega0,
                                  phi=Phi0, penalty=np.linalg.inv(ref.pred_cov[t]))
            cfg_ex = FilterConfig(model=model, kind="explicit", omega=omega0,
                                  phi=Phi0, penalty=np.linalg.inv(ref.upd_cov[t]))
            got_im = update_implicit(cfg_im, ref.pred_mean[t], series[t])
            got_ex = update_explicit(cfg_ex, ref.pred_mean[t], series[t])
            assert_allclose(got_im, ref.upd_mean[t], rtol=0, atol=1e-10)
            assert_allclose(got_ex, ref.upd_mean[t], rtol=0, atol=1e-10)
    assert time.monotonic() - started < 5.0


# ---------------------------------------------------------------------------
# 2. Steady-state learning-rate exactness for the scalar AR(1)
# ---------------------------------------------------------------------------


def test_steady_state_learning_rate_exactness():
    # The closed-form optimal learning rate equals the iterated-Riccati
    # steady-state prediction variance to 1e-8 on a 20-point grid, and the
    # minimized Euclidean filter bound equals the steady-state filtered
    # variance to 1e-8.
    grid = [(phi0, se2, sx2)
            for phi0 in (0.5, 0.8, 0.95, 1.0)
            for se2, sx2 in ((1.0, 1.0), (0.5, 2.0), (2.0, 0.5),
                             (1.0, 0.25), (4.0, 1.0))]
    assert len(grid) == 20
    for phi0, se2, sx2 in grid:
        eta_star = optimal_eta_ar1(phi0, se2, sx2)
        p_pred, p_upd = kalman_steady_state(
            np.eye(1), np.eye(1) * se2, np.eye(1) * phi0, np.eye(1) * sx2)
        assert abs(eta_star - p_pred[0, 0]) <= 1e-8
        model = make_model("gaussian_linear", Z=np.eye(1),
                           Sigma_eps=np.eye(1) * se2)
        moments = DgpMoments(sigma2=1.0 / se2, known_dgp=KnownDgp(
            np.zeros(1), np.eye(1) * phi0, sx2))
        res = minimize_bound(model, moments, "implicit", over="eta", phi=phi0)
        assert abs(res["bound"] - p_upd[0, 0]) <= 1e-8


# ---------------------------------------------------------------------------
# 3. Stability certificates for the fitted T-bill configurations
# ---------------------------------------------------------------------------


def test_stability_certificates_tbill_configs():
    # Fitted explicit Student's-t location filter: certified.
    esd_ok, _ = student_conditions(0.714, 2.194)
    assert esd_ok is True
    # Fitted implicit filter with a large learning rate: not certified.
    esd_big, isd_big = student_conditions(0.751, 23.713)
    assert isd_big is False and esd_big is False
    # Fitted explicit EGB2 filter: lhs = 1.395 +- 0.02, not certified.
    lhs, ok = egb2_esd_condition(0.714, 0.441, 0.173)
    assert abs(lhs - 1.395) <= 0.02
    assert ok is False


# ---------------------------------------------------------------------------
# 4. Geometric two-start gap contraction on certified configurations
# ---------------------------------------------------------------------------


def _draw_certified(rng, model_name, eta_range):
    model = make_model(model_name)
    while True:
        omega0 = float(rng.uniform(-0.5, 0.8))
        phi0 = float(rng.uniform(0.4, 0.9))
        eta = float(rng.uniform(*eta_range))
        cfg = FilterConfig(model=model, kind="implicit",
                           omega=np.array([omega0]), phi=np.array([[phi0]]),
                           penalty=np.array([[1.0 / eta]]))
        report = stability_report(model, cfg)
        if report.certificate_isd:
            return cfg, report.tau_im


def test_two_start_gap_contraction():
    # For 20 certified configs the squared P-distance between two filtered
    # paths started 3.5 apart decays at least geometrically with the
    # certified rate at every one of 500 steps; total runtime < 30 s.
    started = time.monotonic()
    rng = np.random.default_rng(99)
    cells = [("student_location", (0.2, 5.0), 7),
             ("gauss_vol", (0.1, 2.0), 7),
             ("poisson_exp", (0.1, 1.5), 6)]
    checked = 0
    for model_name, eta_range, n_cfg in cells:
        for i in range(n_cfg):
            cfg, tau = _draw_certified(rng, model_name, eta_range)
            assert tau < 1.0
            spec = DgpSpec(model_name=model_name, T=500,
                           seed=int(rng.integers(2**31)),
                           omega0=float(cfg.omega[0]),
                           phi0=float(cfg.phi[0, 0]), sigma_xi=0.15)
            _, obs = simulate(spec)
            base = float(cfg.omega[0])
            out_a = run_filter(replace(cfg, theta_init=np.array([base + 2.0])), obs)
            out_b = run_filter(replace(cfg, theta_init=np.array([base - 1.5])), obs)
            assert not out_a.diverged and not out_b.diverged
            p = float(cfg.penalty[0, 0])
            gap2_0 = p * 3.5**2
            gap2 = p * (out_a.updated[:, 0] - out_b.updated[:, 0]) ** 2
            steps = np.arange(1, gap2.size + 1)
            envelope = gap2_0 * tau**steps
            assert np.all(gap2 <= envelope * (1.0 + 1e-9) + 1e-15)
            checked += 1
    assert checked == 20
    assert time.monotonic() - started < 30.0


# ---------------------------------------------------------------------------
# 5. Asymptotic MSE bound validity on known-DGP simulations
# ---------------------------------------------------------------------------

_CHI_GRID = np.logspace(-4.0, 2.0, 160)


def _tightest_filter_bound(model, cfg, moments):
    if cfg.kind == "implicit":
        return asymptotic_bounds(bound_params(model, cfg, moments))[0]
    # The explicit bound holds for every Young slack chi > 0; scan for the
    # tightest one.
    return min(asymptotic_bounds(bound_params(model, cfg, moments,
                                              chi=float(chi)))[0]
               for chi in _CHI_GRID)


def _bound_validity_cell(model, kind, draw, sigma2_of, seed, n_cfg=20,
                         reps=100, T=2000):
    rng = np.random.default_rng(seed)
    certificate = "certificate_isd" if kind == "implicit" else "certificate_esd"
    failures = []
    for i in range(n_cfg):
        while True:
            omega0, phi0, sigma_xi, eta = draw(rng)
            cfg = FilterConfig(model=model, kind=kind,
                               omega=np.array([omega0]),
                               phi=np.array([[phi0]]),
                               penalty=np.array([[1.0 / eta]]))
            if getattr(stability_report(model, cfg), certificate):
                break
        moments = DgpMoments(
            sigma2=sigma2_of(omega0, phi0, sigma_xi),
            known_dgp=KnownDgp(np.array([omega0]), np.array([[phi0]]),
                               sigma_xi**2))
        bound = _tightest_filter_bound(model, cfg, moments)
        states, obs = _simulate_scalar_batch(
            model, reps, T, omega0, phi0, sigma_xi, "gaussian", 6.0,
            np.random.default_rng(rng.integers(2**63)))
        out = filter_batch(cfg, obs)
        assert not out.diverged.any()
        p = 1.0 / eta
        per_rep = p * np.mean((out.updated - states[:, 1:]) ** 2, axis=1)
        mse = float(per_rep.mean())
        se = float(per_rep.std(ddof=1)) / math.sqrt(reps)
        if mse > bound + 3.0 * se:
            failures.append((i, mse, bound, se))
    assert not failures, failures


def test_mse_bound_validity_gaussian_linear():
    se2 = 1.3
    model = make_model("gaussian_linear", Z=np.eye(1), Sigma_eps=np.eye(1) * se2)
    _bound_validity_cell(
        model, "implicit",
        lambda r: (r.uniform(-1.0, 1.0), r.uniform(0.5, 0.95),
                   r.uniform(0.05, 0.4), r.uniform(0.1, 2.0)),
        lambda w, p, s: 1.0 / se2,
        seed=501)


def test_mse_bound_validity_poisson_implicit():
    model = make_model("poisson_exp")
    # Score second moment under the log-linear DGP: the mean intensity.
    _bound_validity_cell(
        model, "implicit",
        lambda r: (r.uniform(-0.5, 0.8), r.uniform(0.5, 0.9),
                   r.uniform(0.05, 0.3), r.uniform(0.1, 1.5)),
        lambda w, p, s: float(np.exp(w + 0.5 * s**2 / (1.0 - p**2))),
        seed=502)


def test_mse_bound_validity_student_vol_both_kinds():
    model = make_model("student_vol", nu=6.0)
    # Score second moment = Fisher information = nu / (2 nu + 6) = 1/3.
    _bound_validity_cell(
        model, "implicit",
        lambda r: (r.uniform(-0.5, 0.5), r.uniform(0.5, 0.9),
                   r.uniform(0.05, 0.3), r.uniform(0.1, 2.0)),
        lambda w, p, s: 1.0 / 3.0,
        seed=503)
    _bound_validity_cell(
        model, "explicit",
        lambda r: (r.uniform(-0.5, 0.5), r.uniform(0.5, 0.9),
                   r.uniform(0.05, 0.3), r.uniform(0.1, 1.0)),
        lambda w, p, s: 1.0 / 3.0,
        seed=504)


# ---------------------------------------------------------------------------
# 6. High-dimensional least-squares tracking at desk scale
# ---------------------------------------------------------------------------


def _cell(result, label):
    for cell in result.results:
        if cell.label == label:
            return cell
    raise AssertionError(f"missing cell {label!r}")


def test_least_squares_desk_scale():
    # reps=100, T=500, k=50, n=100, alpha=beta=1, sigma=10, sigma_xi=1:
    # sphere initialization makes the initial MSE exactly 100; at T=500 the
    # implicit filter beats the explicit one, which beats every competitor;
    # the implicit minimized bound beats the explicit one; and with alpha=1
    # the implicit MSE decreases monotonically across beta in {1, 10, 40}
    # while at least one competitor does not.  Runtime < 10 min.
    started = time.monotonic()
    result = run_experiment("ls_recovery", seed=42)
    algos = ("isd", "esd", "onm", "madden_gd", "cutler_sgm")
    final = {}
    for algo in algos:
        cell = _cell(result, algo)
        assert cell.mse_over_time[0] == 100.0
        final[algo] = cell.mse_over_time[-1]
    assert final["isd"] < final["esd"]
    for competitor in ("onm", "madden_gd", "cutler_sgm"):
        assert final["esd"] < final[competitor]
    assert result.meta["bound_im"] < result.meta["bound_ex"]

    isd_curve, competitor_curves = [], {a: [] for a in algos[2:]}
    for beta in (1.0, 10.0, 40.0):
        res_b = run_experiment("ls_recovery", seed=42,
                               overrides={"beta": beta})
        isd_curve.append(_cell(res_b, "isd").mse_over_time[-1])
        for algo in competitor_curves:
            competitor_curves[algo].append(_cell(res_b, algo).mse_over_time[-1])
    assert isd_curve[0] > isd_curve[1] > isd_curve[2]
    assert any(not (c[0] > c[1] > c[2]) for c in competitor_curves.values())
    assert time.monotonic() - started < 600.0


# ---------------------------------------------------------------------------
# 7. Nine-model state-space grid at desk scale (slow, flag-gated)
# ---------------------------------------------------------------------------

BETA_FINITE = ("student_vol", "student_dep")
BETA_INFINITE = ("poisson_exp", "negbinom_exp", "exponential_exp", "gamma_exp",
                 "weibull_exp", "gauss_vol", "gauss_dep")


@pytest.mark.skipif(os.environ.get("SCOREFILT_SLOW") != "1",
                    reason="hour-scale grid; set SCOREFILT_SLOW=1 to run")
def test_state_space_grid_desk_scale():
    # reps=100, Student-t(6) state innovations: implicit Poisson low-vol
    # out-of-sample MSE = 0.146 +- 0.03 and both student_vol filters
    # 0.226 +- 0.03; in the high-vol setting every explicit filter of an
    # unbounded-curvature model flags divergence or exceeds 10x its implicit
    # counterpart, while the two bounded-curvature models stay within 10%.
    # Runtime < 60 min.
    started = time.monotonic()
    result = run_experiment("koopman_grid", seed=42)
    assert abs(_cell(result, "poisson_exp:isd:0.15").mse - 0.146) <= 0.03
    assert abs(_cell(result, "student_vol:isd:0.15").mse - 0.226) <= 0.03
    assert abs(_cell(result, "student_vol:esd:0.15").mse - 0.226) <= 0.03
    for name in BETA_INFINITE:
        esd = _cell(result, f"{name}:esd:0.6")
        isd = _cell(result, f"{name}:isd:0.6")
        assert isd.n_diverged == 0
        blew_up = (esd.n_diverged >= 1
                   or esd.mse_completed > 10.0 * isd.mse_completed)
        assert blew_up, (name, esd.mse_completed, isd.mse_completed)
    for name in BETA_FINITE:
        esd = _cell(result, f"{name}:esd:0.6")
        isd = _cell(result, f"{name}:isd:0.6")
        assert esd.n_diverged == 0 and isd.n_diverged == 0
        assert abs(esd.mse - isd.mse) <= 0.10 * isd.mse, (name, esd.mse, isd.mse)
    assert time.monotonic() - started < 3600.0


# ---------------------------------------------------------------------------
# 8. Poisson link study: explicit divergence, implicit stability, moments
# ---------------------------------------------------------------------------


def test_poisson_link_divergence_and_moments():
    # At state volatility 0.5 with per-replication calibration, each of the
    # three Fisher-scaled explicit filters flags divergence on at least one
    # of 100 replications while neither implicit link ever does.
    result = run_experiment("poisson_links", seed=42,
                            overrides={"vols": (0.5,), "fit_mode": "per_rep"})
    for label in ("esd_zeta0:0.5", "esd_zeta05:0.5", "esd_zeta1:0.5"):
        assert _cell(result, label).n_diverged >= 1, label
    for label in ("isd_exp:0.5", "isd_quad:0.5"):
        assert _cell(result, label).n_diverged == 0, label

    # Quadratic-link drift moments: the score second moment is 4 exactly and
    # the closed-form q2, s_omega2 match a one-million-draw simulation within
    # three standard errors.
    omega0, phi0, sigma_xi, omega = 0.0, 0.98, 0.5, 1.0
    mom = poisson_quad_moments(omega0, phi0, sigma_xi, omega)
    assert mom.sigma2 == 4.0
    rng = np.random.default_rng(7_000_000)
    n_draw = 1_000_000
    var_stat = sigma_xi**2 / (1.0 - phi0**2)
    prev = omega0 + math.sqrt(var_stat) * rng.standard_normal(n_draw)
    curr = omega0 * (1.0 - phi0) + phi0 * prev \
        + sigma_xi * rng.standard_normal(n_draw)
    drift_sq = (np.exp(curr / 2.0) - np.exp(prev / 2.0)) ** 2
    level_sq = (np.exp(curr / 2.0) - omega) ** 2
    for sample, closed in ((drift_sq, mom.q2), (level_sq, mom.s_omega2)):
        se = float(sample.std(ddof=1)) / math.sqrt(n_draw)
        assert abs(float(sample.mean()) - closed) <= 3.0 * se


# ---------------------------------------------------------------------------
# 9. Treasury-bill spread study (skipped without the dataset)
# ---------------------------------------------------------------------------


def _tbill_path():
    base = os.environ.get("SCOREFILT_DATA_DIR")
    candidates = []
    if base:
        candidates.append(Path(base) / "tb6m3m.csv")
    candidates.append(REPO_ROOT / "data" / "tb6m3m.csv")
    for path in candidates:
        if path.exists():
            return path
    return None


def test_tbill_empirical_study():
    path = _tbill_path()
    if path is None:
        pytest.skip("T-bill dataset not fetched (scripts/fetch_tbill.py)")
    from scorefilt.cli import ingest_series

    y = ingest_series(path, "TB6M3M", scale=10.0)
    assert y.shape[0] == 249

    # Log likelihood at the published explicit Student's-t estimates.
    student = make_model("student_location", nu=2.632,
                         scale=math.sqrt(0.516))
    cfg_esd = FilterConfig(model=student, kind="explicit",
                           omega=np.array([1.234]), phi=np.array([[0.714]]),
                           penalty=np.array([[1.0 / 2.194]]))
    out = run_filter(cfg_esd, y)
    assert abs(out.total_loglik - (-370.6)) <= 0.5

    def refit(model_name, kind, shape_init, shape_free):
        model = make_model(model_name, **shape_init)
        init = ParamVector.for_model(
            model, kind, omega=1.0, phi=0.7, eta=1.0,
            shape=tuple((name, model.shape[name]) for name in shape_free),
            free_names=("omega", "phi", "eta") + shape_free)
        res = fit_mle(model, y, init, restarts=2)
        cfg = res.params.config(make_model(model_name, **{
            **shape_init, **{n: res.params.shape[n] for n in shape_free}}))
        paths = run_filter(cfg, y)
        pred_mse = float(np.mean((y - paths.predicted[:, 0]) ** 2))
        return res.loglik, pred_mse

    ll_esd_t, mse_esd_t = refit("student_location", "explicit",
                                {"nu": 3.0, "scale": 0.8}, ("nu", "scale"))
    ll_isd_t, mse_isd_t = refit("student_location", "implicit",
                                {"nu": 3.0, "scale": 0.8}, ("nu", "scale"))
    ll_esd_e, _ = refit("egb2_location", "explicit",
                        {"kappa": 0.2, "scale": 1.2}, ("kappa", "scale"))
    ll_isd_e, _ = refit("egb2_location", "implicit",
                        {"kappa": 0.2, "scale": 1.2}, ("kappa", "scale"))
    assert ll_isd_t > ll_esd_t
    assert ll_isd_e > ll_esd_e
    # In-sample prediction MSE improvement of at least 10% for Student's t.
    assert mse_isd_t <= 0.9 * mse_esd_t


# ---------------------------------------------------------------------------
# 10. Property suites run standalone inside two minutes
# ---------------------------------------------------------------------------


def test_property_suites_standalone():
    # Finite-difference score/Hessian checks, implicit-ascent and interval
    # containment, closed-form vs Newton equivalence, the cubic weight cap,
    # and the analytic-vs-numeric optimal-rate agreements all live in the
    # model/filter/bound suites, which must pass on their own in < 2 min.
    started = time.monotonic()
    proc = subprocess.run(
        [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
         "tests/test_models.py", "tests/test_filter.py", "tests/test_bounds.py"],
        cwd=REPO_ROOT, capture_output=True, text=True)
    assert proc.returncode == 0, proc.stdout[-2000:] + proc.stderr[-2000:]
    assert time.monotonic() - started < 120.0
