"""Command-line entry point.

Subcommands: filter, fit, stability, bounds, simulate, experiment.  Options
come from (in increasing precedence) built-in defaults, a flat key=value
config file, repeated ``--set key=value`` overrides, and named flags.  Unknown
keys are rejected rather than ignored.  All artifacts are deterministic in
(config, seed): repeated runs produce byte-identical CSV and JSON.

Exit codes: 0 success, 2 configuration/usage error, 3 data or estimation
failure, 4 run completed but flagged divergence.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import math
import os
import sys
from typing import Optional

import numpy as np

from .bounds import (
    DgpMoments,
    KnownDgp,
    asymptotic_bounds,
    bound_params,
    finite_sample_bound,
    minimize_bound,
    optimal_eta_ar1,
    to_euclidean,
)
from .estimate import ParamVector, fit_mle
from .filter import FilterConfig, run_filter
from .models import MODEL_NAMES, make_model
from .simlab import DgpSpec, run_experiment, simulate, write_json, write_rows_csv
from .stability import stability_report

DATA_DIR_ENV = "SCOREFILT_DATA_DIR"

_SHAPE_KEYS = ("nu", "kappa", "scale", "sigma2")
_COMMON_KEYS = {"seed", "out", "emit"}
_FILTER_KEYS = _COMMON_KEYS | set(_SHAPE_KEYS) | {
    "model", "kind", "omega", "phi", "eta", "zeta", "theta_init",
    "data", "column", "data_scale",
}
_KNOWN_KEYS = {
    "filter": _FILTER_KEYS,
    "fit": _FILTER_KEYS | {"free", "restarts"},
    "stability": _COMMON_KEYS | set(_SHAPE_KEYS) | {
        "model", "kind", "omega", "phi", "eta", "zeta"},
    "bounds": _COMMON_KEYS | set(_SHAPE_KEYS) | {
        "mode", "model", "kind", "omega", "phi", "eta", "zeta",
        "sigma2_sup", "q2", "s_omega2", "phi0", "omega0", "sigma_xi2",
        "sigma_eps2", "eps", "chi", "over", "horizon", "mse_init"},
    "simulate": _COMMON_KEYS | set(_SHAPE_KEYS) | {
        "model", "T", "omega0", "phi0", "sigma_xi", "innovation",
        "innovation_df", "init", "init_radius"},
    "experiment": _COMMON_KEYS | {
        "name", "reps", "T", "in_sample", "vols", "models", "alpha", "beta",
        "k", "n", "sigma", "sigma_xi", "fit_mode", "phi0", "omega0",
        "innovation", "innovation_df", "paper_scale"},
}
_PAPER_REPS = {"ls_recovery": 100, "koopman_grid": 1000, "poisson_links": 500}


class CliError(Exception):
    """Carries the exit code alongside the message."""

    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# configuration plumbing
# ---------------------------------------------------------------------------


def _parse_value(raw: str):
    text = raw.strip()
    if "," in text:
        return tuple(_parse_value(part) for part in text.split(","))
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def load_config_file(path) -> dict:
    """Flat key=value file; '#' starts a comment; values are typed."""
    values = {}
    try:
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                body = line.split("#", 1)[0].strip()
                if not body:
                    continue
                if "=" not in body:
                    raise CliError(2, f"{path}:{lineno}: expected key=value, "
                                      f"got {body!r}")
                key, raw = body.split("=", 1)
                values[key.strip()] = _parse_value(raw)
    except OSError as exc:
        raise CliError(2, f"cannot read config file {path}: {exc}") from exc
    return values


def resolve_data_path(path) -> str:
    """Literal path first, then relative to $SCOREFILT_DATA_DIR."""
    if os.path.exists(path):
        return str(path)
    env = os.environ.get(DATA_DIR_ENV)
    if env:
        candidate = os.path.join(env, str(path))
        if os.path.exists(candidate):
            return candidate
    raise CliError(3, f"data file not found: {path}"
                      + (f" (also tried {DATA_DIR_ENV}={env})" if env else ""))


def ingest_series(path, column: str, scale: float = 1.0) -> np.ndarray:
    """Read one numeric column from a headed CSV file.

    Blank or non-numeric cells are errors naming the offending data row
    (1-based, excluding the header).
    """
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise CliError(3, f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or column not in header:
            have = ", ".join(header or ())
            raise CliError(3, f"column {column!r} not in {path} (have: {have})")
        idx = header.index(column)
        values = []
        # plain csv.reader keeps blank lines as empty rows, so a missing
        # cell is reported against the physical data row it sits on
        for row_number, row in enumerate(reader, start=1):
            cell = row[idx].strip() if idx < len(row) else ""
            try:
                value = float(cell)
            except ValueError:
                raise CliError(3, f"non-numeric value {cell!r} in column "
                                  f"{column!r} at row {row_number}") from None
            # float("nan")/float("inf") parse, so screen them explicitly
            if not math.isfinite(value):
                raise CliError(3, f"non-finite value {cell!r} in column "
                                  f"{column!r} at row {row_number}")
            values.append(value)
    if not values:
        raise CliError(3, f"no data rows in {path}")
    return scale * np.asarray(values)


def _merge_options(sub: str, args) -> dict:
    values = {}
    if args.config:
        values.update(load_config_file(args.config))
    for item in args.set or ():
        if "=" not in item:
            raise CliError(2, f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        values[key.strip()] = _parse_value(raw)
    for key in _KNOWN_KEYS[sub]:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    if getattr(args, "paper_scale", False):
        values["paper_scale"] = True
    unknown = sorted(set(values) - _KNOWN_KEYS[sub])
    if unknown:
        raise CliError(2, f"unknown config key(s) for {sub}: {', '.join(unknown)}")
    return values


def _need(values: dict, key: str):
    if key not in values:
        raise CliError(2, f"missing required option {key!r}")
    return values[key]


def _emit_targets(values: dict) -> set:
    raw = values.get("emit", ("csv", "json"))
    if isinstance(raw, str):
        raw = raw.split(",")
    targets = {str(item).strip() for item in raw}
    if not targets <= {"csv", "json"}:
        raise CliError(2, f"--emit accepts csv,json; got {sorted(targets)}")
    return targets


def _build_model(values: dict):
    name = _need(values, "model")
    if name not in MODEL_NAMES:
        raise CliError(2, f"unknown model {name!r}; choose from "
                          f"{', '.join(MODEL_NAMES)}")
    shape = {k: float(values[k]) for k in _SHAPE_KEYS if k in values}
    try:
        model = make_model(name, **shape)
    except (TypeError, ValueError) as exc:
        raise CliError(2, f"bad model shape for {name}: {exc}") from exc
    if model.k != 1:
        raise CliError(2, "the command line drives scalar-parameter models; "
                          "use the library API for vector states")
    return model


def _build_filter_config(values: dict, model) -> FilterConfig:
    kind = _need(values, "kind")
    eta = float(_need(values, "eta"))
    omega = float(values.get("omega", 0.0))
    phi = float(values.get("phi", 1.0))
    theta_init = values.get("theta_init")
    try:
        return FilterConfig(
            model=model, kind=kind, omega=np.array([omega]),
            phi=np.array([[phi]]), penalty=np.array([[1.0 / eta]]),
            scaling_zeta=float(values.get("zeta", 0.0)),
            theta_init=None if theta_init is None else np.array([float(theta_init)]),
        )
    except ValueError as exc:
        raise CliError(2, f"invalid filter configuration: {exc}") from exc


def _load_series(values: dict) -> np.ndarray:
    path = resolve_data_path(_need(values, "data"))
    column = str(values.get("column", "y"))
    return ingest_series(path, column, float(values.get("data_scale", 1.0)))


def _write_paths_csv(out_dir, emit, output) -> Optional[str]:
    if "csv" not in emit:
        return None
    os.makedirs(out_dir, exist_ok=True)
    pred = np.atleast_2d(output.predicted.T).T
    upd = np.atleast_2d(output.updated.T).T
    k = pred.shape[1]
    if k == 1:
        columns = ["t", "theta_pred", "theta_upd", "loglik_contrib"]
    else:
        columns = (["t"] + [f"theta_pred_{i}" for i in range(k)]
                   + [f"theta_upd_{i}" for i in range(k)] + ["loglik_contrib"])
    rows = []
    for t in range(pred.shape[0]):
        row = {"t": t + 1, "loglik_contrib": float(output.loglik_contribs[t])}
        if k == 1:
            row["theta_pred"] = float(pred[t, 0])
            row["theta_upd"] = float(upd[t, 0])
        else:
            for i in range(k):
                row[f"theta_pred_{i}"] = float(pred[t, i])
                row[f"theta_upd_{i}"] = float(upd[t, i])
        rows.append(row)
    path = os.path.join(out_dir, "paths.csv")
    write_rows_csv(path, rows, columns)
    return path


def _write_report(out_dir, emit, report: dict) -> Optional[str]:
    if "json" not in emit:
        return None
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "report.json")
    write_json(path, report)
    return path


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_filter(values: dict) -> int:
    model = _build_model(values)
    cfg = _build_filter_config(values, model)
    series = _load_series(values)
    out_dir = str(values.get("out", "."))
    emit = _emit_targets(values)
    output = run_filter(cfg, series)
    report = {
        "subcommand": "filter",
        "model": model.name,
        "kind": cfg.kind,
        "eta": float(_need(values, "eta")),
        "omega": float(cfg.omega[0]),
        "phi": float(cfg.phi[0, 0]),
        "zeta": cfg.scaling_zeta,
        "n_obs": int(series.shape[0]),
        "total_loglik": output.total_loglik,
        "diverged": bool(output.diverged),
        "first_divergence": output.first_divergence,
    }
    _write_paths_csv(out_dir, emit, output)
    _write_report(out_dir, emit, report)
    return 4 if output.diverged else 0


def cmd_fit(values: dict) -> int:
    model = _build_model(values)
    kind = _need(values, "kind")
    series = _load_series(values)
    free = values.get("free", ("omega", "phi", "eta"))
    if isinstance(free, str):
        free = tuple(part.strip() for part in free.split(","))
    if model.param_space == "nonneg":
        omega0, phi0 = 1.0, 0.9
    else:
        omega0, phi0 = 0.0, 0.9
    shape_init = tuple((k, float(values[k])) if k in values else (k, model.shape[k])
                       for k in _SHAPE_KEYS if k in model.shape)
    try:
        init = ParamVector.for_model(
            model, kind,
            omega=float(values.get("omega", omega0)),
            phi=float(values.get("phi", phi0)),
            eta=float(values.get("eta", 0.3)),
            scaling_zeta=float(values.get("zeta", 0.0)),
            shape=shape_init, free_names=tuple(free))
    except ValueError as exc:
        raise CliError(2, f"invalid starting point: {exc}") from exc
    try:
        res = fit_mle(model, series, init, restarts=int(values.get("restarts", 3)),
                      seed=int(values.get("seed", 0)))
    except (ValueError, RuntimeError) as exc:
        raise CliError(3, f"estimation failed: {exc}") from exc
    fitted = res.params
    cfg = fitted.config(model)
    output = run_filter(cfg, series)
    cert = dataclasses.asdict(stability_report(cfg.model, cfg))
    report = {
        "subcommand": "fit",
        "model": model.name,
        "kind": kind,
        "free": list(free),
        "estimates": {
            "omega": float(fitted.omega[0]),
            "phi": float(np.atleast_1d(fitted.phi)[0]),
            "eta": fitted.eta,
            **{k: float(v) for k, v in fitted.shape},
        },
        "loglik": res.loglik,
        "converged": res.converged,
        "n_evals": res.n_evals,
        "restarts": res.restarts,
        "final_spread": res.final_spread,
        "certificate": cert,
    }
    out_dir = str(values.get("out", "."))
    emit = _emit_targets(values)
    _write_paths_csv(out_dir, emit, output)
    _write_report(out_dir, emit, report)
    return 0


def cmd_stability(values: dict) -> int:
    model = _build_model(values)
    cfg = _build_filter_config(values, model)
    report = dataclasses.asdict(stability_report(model, cfg))
    report.update(subcommand="stability", model=model.name, kind=cfg.kind,
                  eta=float(_need(values, "eta")), phi=float(cfg.phi[0, 0]))
    _write_report(str(values.get("out", ".")), _emit_targets(values), report)
    return 0


def _moments_from(values: dict) -> DgpMoments:
    known = None
    if "sigma_xi2" in values:
        known = KnownDgp(
            omega0=np.array([float(values.get("omega0", 0.0))]),
            Phi0=np.array([[float(_need(values, "phi0"))]]),
            sigma_xi2=float(values["sigma_xi2"]))
    return DgpMoments(
        sigma2=float(_need(values, "sigma2_sup")),
        q2=float(values.get("q2", 0.0)),
        s_omega2=float(values.get("s_omega2", math.inf)),
        known_dgp=known)


def cmd_bounds(values: dict) -> int:
    mode = values.get("mode", "coeffs")
    if mode == "ar1":
        phi0 = float(_need(values, "phi0"))
        se2 = float(_need(values, "sigma_eps2"))
        sx2 = float(_need(values, "sigma_xi2"))
        eta_star = optimal_eta_ar1(phi0, se2, sx2)
        model = make_model("gaussian_linear", Z=[[1.0]], d=[0.0],
                           Sigma_eps=[[se2]])
        moments = DgpMoments(sigma2=1.0 / se2,
                             known_dgp=KnownDgp(np.zeros(1), np.array([[phi0]]),
                                                sx2))
        res = minimize_bound(model, moments, "implicit", over="eta", phi=phi0)
        report = {"subcommand": "bounds", "mode": "ar1", "phi0": phi0,
                  "sigma_eps2": se2, "sigma_xi2": sx2, "eta_star": eta_star,
                  "eta_argmin": res["eta"], "bound": res["bound"]}
    elif mode == "minimize":
        model = _build_model(values)
        moments = _moments_from(values)
        try:
            res = minimize_bound(model, moments, _need(values, "kind"),
                                 over=str(values.get("over", "eta")),
                                 phi=float(values.get("phi", 1.0)),
                                 eta=(float(values["eta"]) if "eta" in values
                                      else None))
        except ValueError as exc:
            raise CliError(2, f"bound minimization rejected: {exc}") from exc
        report = {"subcommand": "bounds", "mode": "minimize",
                  "model": model.name, **res}
    elif mode == "coeffs":
        model = _build_model(values)
        cfg = _build_filter_config(values, model)
        moments = _moments_from(values)
        try:
            bp = bound_params(model, cfg, moments,
                              eps=(float(values["eps"]) if "eps" in values else None),
                              chi=(float(values["chi"]) if "chi" in values else None))
        except ValueError as exc:
            raise CliError(2, f"bound construction rejected: {exc}") from exc
        filt, pred = asymptotic_bounds(bp)
        report = {"subcommand": "bounds", "mode": "coeffs", "model": model.name,
                  "a": bp.a, "b": bp.b, "c": bp.c, "d": bp.d,
                  "asymptotic_filter": filt, "asymptotic_prediction": pred,
                  "asymptotic_filter_euclidean": to_euclidean(filt, cfg.penalty),
                  "asymptotic_prediction_euclidean": to_euclidean(pred, cfg.penalty)}
        if "horizon" in values:
            report["finite_sample"] = finite_sample_bound(
                bp, float(_need(values, "mse_init")), int(values["horizon"]))
    else:
        raise CliError(2, f"unknown bounds mode {mode!r} (coeffs, minimize, ar1)")
    _write_report(str(values.get("out", ".")), _emit_targets(values), report)
    return 0


def cmd_simulate(values: dict) -> int:
    name = _need(values, "model")
    shape = tuple((k, float(values[k])) for k in _SHAPE_KEYS if k in values)
    try:
        spec = DgpSpec(
            model_name=name,
            T=int(_need(values, "T")),
            seed=int(values.get("seed", 42)),
            omega0=[float(values.get("omega0", 0.0))],
            phi0=[[float(values.get("phi0", 0.95))]],
            sigma_xi=float(values.get("sigma_xi", 0.3)),
            innovation=str(values.get("innovation", "gaussian")),
            innovation_df=float(values.get("innovation_df", 6.0)),
            init=str(values.get("init", "mean")),
            init_radius=float(values.get("init_radius", 10.0)),
            shape=shape,
        )
        states, obs = simulate(spec)
    except (ValueError, TypeError) as exc:
        raise CliError(2, f"invalid simulation spec: {exc}") from exc
    out_dir = str(values.get("out", "."))
    emit = _emit_targets(values)
    if "csv" in emit:
        os.makedirs(out_dir, exist_ok=True)
        n = obs.shape[1]
        y_cols = ["y"] if n == 1 else [f"y_{i}" for i in range(n)]
        rows = []
        for t in range(obs.shape[0]):
            row = {"t": t + 1, "state": float(states[t + 1, 0])}
            if n == 1:
                row["y"] = float(obs[t, 0])
            else:
                for i in range(n):
                    row[f"y_{i}"] = float(obs[t, i])
            rows.append(row)
        write_rows_csv(os.path.join(out_dir, "series.csv"),
                       rows, ["t"] + y_cols + ["state"])
    report = {"subcommand": "simulate", "model": name, "T": spec.T,
              "seed": spec.seed, "omega0": float(spec.omega0[0]),
              "phi0": float(spec.phi0[0, 0]), "sigma_xi": spec.sigma_xi,
              "innovation": spec.innovation, "init": spec.init,
              "state_initial": float(states[0, 0]),
              "state_final": float(states[-1, 0])}
    _write_report(out_dir, emit, report)
    return 0


def cmd_experiment(values: dict) -> int:
    name = _need(values, "name")
    seed = int(values.get("seed", 42))
    overrides = {k: values[k] for k in values
                 if k in ("reps", "T", "in_sample", "vols", "models", "alpha",
                          "beta", "k", "n", "sigma", "sigma_xi", "fit_mode",
                          "phi0", "omega0", "innovation", "innovation_df")}
    if values.get("paper_scale"):
        overrides.setdefault("fit_mode", "per_rep")
        if name in _PAPER_REPS:
            overrides.setdefault("reps", _PAPER_REPS[name])
    out_dir = str(values.get("out", "."))
    try:
        result = run_experiment(name, overrides=overrides, seed=seed,
                                out_dir=out_dir)
    except ValueError as exc:
        raise CliError(2, str(exc)) from exc
    divergent = [r.label for r in result.results if r.n_diverged > 0]
    all_divergent = (len(result.results) > 0
                     and all(r.n_diverged == r.per_rep.size for r in result.results))
    sys.stdout.write(f"{name}: {len(result.results)} cells -> "
                     f"{os.path.join(out_dir, name + '_results.csv')}\n")
    if divergent:
        sys.stdout.write("divergence flagged in: " + ", ".join(divergent) + "\n")
    return 4 if all_divergent else 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scorefilt",
        description="Score-driven filters: runs, fits, certificates, bounds, "
                    "and simulation studies.")
    subs = parser.add_subparsers(dest="subcommand", required=True)

    def add_common(sp):
        sp.add_argument("--config", help="flat key=value option file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a single option (repeatable)")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--emit", default=None, help="csv,json subset")

    def add_model_flags(sp):
        sp.add_argument("--model", default=None)
        sp.add_argument("--kind", choices=("implicit", "explicit"), default=None)
        sp.add_argument("--eta", type=float, default=None)
        sp.add_argument("--omega", type=float, default=None)
        sp.add_argument("--phi", type=float, default=None)
        sp.add_argument("--zeta", type=float, default=None)

    sp = subs.add_parser("filter", help="run one filter over a CSV series")
    add_common(sp)
    add_model_flags(sp)
    sp.add_argument("--data", default=None)
    sp.add_argument("--column", default=None)
    sp.add_argument("--data-scale", dest="data_scale", type=float, default=None)

    sp = subs.add_parser("fit", help="maximum-likelihood calibration")
    add_common(sp)
    add_model_flags(sp)
    sp.add_argument("--data", default=None)
    sp.add_argument("--column", default=None)
    sp.add_argument("--data-scale", dest="data_scale", type=float, default=None)
    sp.add_argument("--free", default=None,
                    help="comma-separated parameter names to estimate")
    sp.add_argument("--restarts", type=int, default=None)

    sp = subs.add_parser("stability", help="contraction certificate for a config")
    add_common(sp)
    add_model_flags(sp)

    sp = subs.add_parser("bounds", help="error-bound coefficients and tuning")
    add_common(sp)
    add_model_flags(sp)
    sp.add_argument("--mode", choices=("coeffs", "minimize", "ar1"), default=None)
    sp.add_argument("--over", default=None)

    sp = subs.add_parser("simulate", help="draw one path from a named DGP")
    add_common(sp)
    sp.add_argument("--model", default=None)
    sp.add_argument("--T", type=int, default=None)

    sp = subs.add_parser("experiment", help="run a named simulation study")
    add_common(sp)
    sp.add_argument("name", nargs="?", default=None)
    sp.add_argument("--reps", type=int, default=None)
    sp.add_argument("--paper-scale", dest="paper_scale", action="store_true",
                    help="replication counts and per-replication fits from "
                         "the full-scale studies")
    return parser


_COMMANDS = {
    "filter": cmd_filter,
    "fit": cmd_fit,
    "stability": cmd_stability,
    "bounds": cmd_bounds,
    "simulate": cmd_simulate,
    "experiment": cmd_experiment,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = exc.code or 0
        return 0 if code == 0 else 2
    try:
        values = _merge_options(args.subcommand, args)
        if args.subcommand == "experiment" and "name" not in values:
            raise CliError(2, "experiment needs a study name "
                              "(ls_recovery, koopman_grid, poisson_links)")
        return _COMMANDS[args.subcommand](values)
    except CliError as exc:
        sys.stderr.write(f"scorefilt {args.subcommand}: {exc}\n")
        return exc.code
    except ValueError as exc:
        sys.stderr.write(f"scorefilt {args.subcommand}: {exc}\n")
        return 2
    except (RuntimeError, FloatingPointError, OverflowError) as exc:
        sys.stderr.write(f"scorefilt {args.subcommand}: numeric failure: {exc}\n")
        return 4


if __name__ == "__main__":
    sys.exit(main())
