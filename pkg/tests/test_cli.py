"""End-to-end tests of the command-line interface: option plumbing, data
ingestion, artifact formats, determinism, and exit codes."""

import json
import math
import os

import numpy as np
import pytest
from numpy.testing import assert_allclose

from scorefilt.cli import (
    CliError,
    ingest_series,
    load_config_file,
    main,
    resolve_data_path,
)
from scorefilt.filter import FilterConfig, run_filter
from scorefilt.models import make_model


def _write(path, text):
    path.write_text(text)
    return str(path)


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------


def test_ingest_toy_csv(tmp_path):
    path = _write(tmp_path / "toy.csv", "v\n1\n2\n3\n")
    assert_allclose(ingest_series(path, "v"), [1.0, 2.0, 3.0])


def test_ingest_scale_flag(tmp_path):
    path = _write(tmp_path / "toy.csv", "v\n0.5\n-0.25\n")
    assert_allclose(ingest_series(path, "v", scale=10.0), [5.0, -2.5])


def test_ingest_blank_cell_cites_row(tmp_path):
    rows = ["v"] + [str(i) for i in range(1, 7)] + ["", "8"]
    path = _write(tmp_path / "gap.csv", "\n".join(rows) + "\n")
    with pytest.raises(CliError, match="row 7"):
        ingest_series(path, "v")


def test_ingest_nan_cell_cites_row(tmp_path):
    path = _write(tmp_path / "bad.csv", "v\n1\nnan\n3\n")
    with pytest.raises(CliError, match="row 2"):
        ingest_series(path, "v")


def test_ingest_missing_column(tmp_path):
    path = _write(tmp_path / "cols.csv", "a,b\n1,2\n")
    with pytest.raises(CliError, match="column 'v'"):
        ingest_series(path, "v")


def test_ingest_missing_file(tmp_path):
    with pytest.raises(CliError):
        ingest_series(tmp_path / "absent.csv", "v")


def test_resolve_data_path_uses_env_dir(tmp_path, monkeypatch):
    target = tmp_path / "store" / "series.csv"
    target.parent.mkdir()
    target.write_text("v\n1\n")
    monkeypatch.setenv("SCOREFILT_DATA_DIR", str(target.parent))
    assert resolve_data_path("series.csv") == str(target)
    with pytest.raises(CliError, match="not found"):
        resolve_data_path("other.csv")


# ---------------------------------------------------------------------------
# configuration plumbing
# ---------------------------------------------------------------------------


def test_load_config_file_types_and_comments(tmp_path):
    path = _write(tmp_path / "run.cfg", """
# filter options
model = poisson_exp
eta = 0.4          # learning rate
phi = 0.9
kind = implicit
vols = 0.1,0.3
flag = true
""")
    values = load_config_file(path)
    assert values["model"] == "poisson_exp"
    assert values["eta"] == 0.4 and isinstance(values["eta"], float)
    assert values["vols"] == (0.1, 0.3)
    assert values["flag"] is True


def test_load_config_file_rejects_bare_words(tmp_path):
    path = _write(tmp_path / "run.cfg", "model poisson\n")
    with pytest.raises(CliError, match="key=value"):
        load_config_file(path)


def test_unknown_config_key_is_exit_2(tmp_path, capsys):
    series = _write(tmp_path / "s.csv", "y\n1\n2\n")
    code = main(["filter", "--model", "poisson_exp", "--kind", "implicit",
                 "--eta", "0.4", "--data", series, "--set", "bogus=1",
                 "--out", str(tmp_path)])
    assert code == 2
    assert "bogus" in capsys.readouterr().err


def test_flags_override_config_file(tmp_path):
    series = _write(tmp_path / "s.csv", "y\n1\n0\n2\n1\n")
    cfg = _write(tmp_path / "run.cfg",
                 "model = poisson_exp\nkind = implicit\neta = 0.1\ncolumn = y\n")
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    out_a.mkdir()
    out_b.mkdir()
    assert main(["filter", "--config", cfg, "--data", series,
                 "--out", str(out_a)]) == 0
    assert main(["filter", "--config", cfg, "--data", series,
                 "--eta", "0.9", "--out", str(out_b)]) == 0
    rep_a = json.loads((out_a / "report.json").read_text())
    rep_b = json.loads((out_b / "report.json").read_text())
    assert rep_a["eta"] == 0.1 and rep_b["eta"] == 0.9


def test_missing_required_option_is_exit_2(tmp_path, capsys):
    series = _write(tmp_path / "s.csv", "y\n1\n2\n")
    code = main(["filter", "--model", "poisson_exp", "--kind", "implicit",
                 "--data", series, "--out", str(tmp_path)])
    assert code == 2
    assert "eta" in capsys.readouterr().err


def test_missing_data_file_is_exit_3(tmp_path, capsys):
    code = main(["filter", "--model", "poisson_exp", "--kind", "implicit",
                 "--eta", "0.4", "--data", str(tmp_path / "absent.csv"),
                 "--out", str(tmp_path)])
    assert code == 3


# ---------------------------------------------------------------------------
# filter subcommand artifacts
# ---------------------------------------------------------------------------


def _poisson_series(tmp_path, T=40, seed=3):
    rng = np.random.default_rng(seed)
    y = rng.poisson(2.0, size=T).astype(float)
    lines = "y\n" + "\n".join(format(v, ".17g") for v in y) + "\n"
    return _write(tmp_path / "series.csv", lines), y


def test_filter_paths_csv_matches_library(tmp_path):
    series_path, y = _poisson_series(tmp_path)
    out = tmp_path / "run"
    out.mkdir()
    assert main(["filter", "--model", "poisson_exp", "--kind", "implicit",
                 "--eta", "0.4", "--phi", "0.9", "--data", series_path,
                 "--out", str(out)]) == 0
    lines = (out / "paths.csv").read_text().splitlines()
    assert lines[0] == "t,theta_pred,theta_upd,loglik_contrib"
    assert len(lines) == 1 + y.size
    model = make_model("poisson_exp")
    cfg = FilterConfig(model=model, kind="implicit", omega=np.array([0.0]),
                       phi=np.array([[0.9]]), penalty=np.array([[1.0 / 0.4]]))
    ref = run_filter(cfg, y)
    got_upd = np.array([float(line.split(",")[2]) for line in lines[1:]])
    assert_allclose(got_upd, ref.updated.ravel(), rtol=0, atol=1e-15)
    report = json.loads((out / "report.json").read_text())
    assert_allclose(report["total_loglik"], ref.total_loglik, rtol=1e-15)
    assert report["diverged"] is False


def test_filter_rerun_is_byte_identical(tmp_path):
    series_path, _ = _poisson_series(tmp_path)
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    out_a.mkdir()
    out_b.mkdir()
    args = ["filter", "--model", "poisson_exp", "--kind", "explicit",
            "--eta", "0.2", "--phi", "0.95", "--data", series_path]
    assert main(args + ["--out", str(out_a)]) == 0
    assert main(args + ["--out", str(out_b)]) == 0
    assert (out_a / "paths.csv").read_bytes() == (out_b / "paths.csv").read_bytes()
    assert (out_a / "report.json").read_bytes() == (out_b / "report.json").read_bytes()


def test_filter_divergence_is_exit_4(tmp_path):
    lines = "y\n" + "\n".join(["1", "2", "1", "1000000", "2", "1"]) + "\n"
    series = _write(tmp_path / "wild.csv", lines)
    code = main(["filter", "--model", "poisson_exp", "--kind", "explicit",
                 "--eta", "3.0", "--phi", "0.98", "--data", series,
                 "--out", str(tmp_path)])
    assert code == 4
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["diverged"] is True
    assert report["first_divergence"] is not None


def test_emit_subsets(tmp_path):
    series_path, _ = _poisson_series(tmp_path)
    out_json = tmp_path / "only_json"
    out_csv = tmp_path / "only_csv"
    out_json.mkdir()
    out_csv.mkdir()
    base = ["filter", "--model", "poisson_exp", "--kind", "implicit",
            "--eta", "0.4", "--data", series_path]
    assert main(base + ["--emit", "json", "--out", str(out_json)]) == 0
    assert main(base + ["--emit", "csv", "--out", str(out_csv)]) == 0
    assert not (out_json / "paths.csv").exists()
    assert (out_json / "report.json").exists()
    assert (out_csv / "paths.csv").exists()
    assert not (out_csv / "report.json").exists()


# ---------------------------------------------------------------------------
# fit / stability / bounds subcommands
# ---------------------------------------------------------------------------


def test_fit_subcommand_reports_estimates(tmp_path):
    rng = np.random.default_rng(8)
    y = rng.poisson(3.0, size=150).astype(float)
    series = _write(tmp_path / "fit.csv",
                    "y\n" + "\n".join(format(v, ".17g") for v in y) + "\n")
    assert main(["fit", "--model", "poisson_exp", "--kind", "implicit",
                 "--data", series, "--free", "omega,eta", "--phi", "0.8",
                 "--restarts", "1", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    est = report["estimates"]
    assert est["eta"] > 0 and math.isfinite(report["loglik"])
    assert report["free"] == ["omega", "eta"]
    assert abs(est["phi"] - 0.8) < 1e-12  # held fixed
    assert "certificate_isd" in report["certificate"]
    assert (tmp_path / "paths.csv").exists()


def test_stability_subcommand_tbill_esd_certificate(tmp_path):
    # Fitted explicit Student's-t location config: certified stable.
    assert main(["stability", "--model", "student_location",
                 "--set", "nu=2.632", "--set", "scale=0.516",
                 "--kind", "explicit", "--phi", "0.714", "--eta", "2.194",
                 "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["certificate_esd"] is True
    assert report["tau_ex"] < 1.0
    assert report["alpha"] == pytest.approx(-0.125)


def test_bounds_ar1_local_level_pin(tmp_path):
    assert main(["bounds", "--mode", "ar1", "--set", "phi0=1.0",
                 "--set", "sigma_eps2=1.0", "--set", "sigma_xi2=1.0",
                 "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    golden = (1.0 + math.sqrt(5.0)) / 2.0
    assert report["eta_star"] == pytest.approx(golden, rel=1e-12)
    assert report["bound"] == pytest.approx(golden / (golden + 1.0), rel=1e-6)


def test_bounds_coeffs_matches_library(tmp_path):
    from scorefilt.bounds import (DgpMoments, KnownDgp, asymptotic_bounds,
                                  bound_params)

    assert main(["bounds", "--mode", "coeffs", "--model", "gauss_vol",
                 "--kind", "implicit", "--eta", "0.5", "--phi", "0.9",
                 "--set", "sigma2_sup=0.5", "--set", "phi0=0.9",
                 "--set", "sigma_xi2=0.1", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    model = make_model("gauss_vol")
    cfg = FilterConfig(model=model, kind="implicit", omega=np.array([0.0]),
                       phi=np.array([[0.9]]), penalty=np.array([[2.0]]))
    moments = DgpMoments(sigma2=0.5, known_dgp=KnownDgp(
        np.zeros(1), np.array([[0.9]]), 0.1))
    bp = bound_params(model, cfg, moments)
    filt, pred = asymptotic_bounds(bp)
    assert report["a"] == pytest.approx(bp.a, rel=1e-12)
    assert report["asymptotic_filter"] == pytest.approx(filt, rel=1e-12)
    assert report["asymptotic_prediction"] == pytest.approx(pred, rel=1e-12)


def test_bounds_unknown_mode_is_exit_2(tmp_path, capsys):
    assert main(["bounds", "--set", "mode=fancy", "--out", str(tmp_path)]) == 2


# ---------------------------------------------------------------------------
# simulate / experiment subcommands
# ---------------------------------------------------------------------------


def test_simulate_deterministic_series(tmp_path):
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    out_a.mkdir()
    out_b.mkdir()
    args = ["simulate", "--model", "gauss_dep", "--T", "25", "--seed", "9",
            "--set", "phi0=0.9", "--set", "sigma_xi=0.2"]
    assert main(args + ["--out", str(out_a)]) == 0
    assert main(args + ["--out", str(out_b)]) == 0
    text = (out_a / "series.csv").read_text()
    assert text == (out_b / "series.csv").read_text()
    header = text.splitlines()[0]
    assert header == "t,y_0,y_1,state"
    assert len(text.splitlines()) == 26


def test_experiment_cli_smoke_and_determinism(tmp_path):
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    out_a.mkdir()
    out_b.mkdir()
    args = ["experiment", "ls_recovery", "--set", "reps=2", "--set", "T=10",
            "--set", "k=3", "--set", "n=4", "--seed", "11"]
    assert main(args + ["--out", str(out_a)]) == 0
    assert main(args + ["--out", str(out_b)]) == 0
    csv_a = (out_a / "ls_recovery_results.csv").read_bytes()
    assert csv_a == (out_b / "ls_recovery_results.csv").read_bytes()
    # header + 5 algorithms x 2 replications
    assert len(csv_a.decode().splitlines()) == 11
    summary = json.loads((out_a / "ls_recovery_summary.json").read_text())
    assert summary["experiment"] == "ls_recovery"
    assert len(summary["cells"]) == 5


def test_experiment_requires_name(capsys):
    assert main(["experiment"]) == 2
    assert "study name" in capsys.readouterr().err


def test_unknown_model_is_exit_2(tmp_path, capsys):
    series = _write(tmp_path / "s.csv", "y\n1\n")
    code = main(["filter", "--model", "mystery", "--kind", "implicit",
                 "--eta", "0.4", "--data", series, "--out", str(tmp_path)])
    assert code == 2
    assert "unknown model" in capsys.readouterr().err
