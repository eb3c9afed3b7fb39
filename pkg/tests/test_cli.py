import itertools
import json

import numpy as np
import pandas as pd
import pytest

from relrisk import generate, inverse, logop_design
from relrisk.cli import main

FACTORS = ["x1", "x2", "x3", "x4"]
ALL_TERMS = ",".join(":".join(c) for k in (1, 2, 3) for c in itertools.combinations(FACTORS, k))


def read(path):
    return pd.read_csv(path, comment="#")


@pytest.fixture(scope="module")
def sim_csv(tmp_path_factory):
    p = tmp_path_factory.mktemp("data") / "sim.csv"
    generate(logop_design("rr", n=500, seed=1)).to_frame().to_csv(p, index=False)
    return p


@pytest.fixture(scope="module")
def factorial_csv(tmp_path_factory):
    """Four binary factors, risks driven by mains and one interaction."""
    rng = np.random.default_rng(5)
    n = 6000
    x = {k: rng.integers(0, 2, n).astype(float) for k in FACTORS}
    theta = 0.3 + 0.2 * x["x1"] - 0.3 * x["x2"] + 0.15 * x["x3"] * x["x4"]
    phi = -1.0 + 0.4 * x["x1"] + 0.3 * x["x2"] - 0.5 * x["x3"] + 0.2 * x["x4"]
    p0, p1 = inverse(theta, phi, "rr")
    a = (rng.random(n) < 1 / (1 + np.exp(-(-0.2 + 0.5 * x["x1"] - 0.4 * x["x3"])))).astype(int)
    y = (rng.random(n) < np.where(a == 1, p1, p0)).astype(int)
    path = tmp_path_factory.mktemp("data") / "factorial.csv"
    pd.DataFrame({"y": y, "a": a, **x}).to_csv(path, index=False)
    return path


def test_fit_mle_writes_tables(sim_csv, tmp_path):
    assert main(["fit", "--data", str(sim_csv), "--w-terms", "v", "--out", str(tmp_path)]) == 0
    coef = read(tmp_path / "coefficients.csv")
    assert list(coef.term) == ["alpha:intercept", "alpha:v", "beta:intercept", "beta:v"]
    assert {"estimate", "se", "ci_low", "ci_high", "p_value"} <= set(coef.columns)
    header = (tmp_path / "coefficients.csv").read_text().splitlines()[:4]
    assert header[0].startswith("# tool") and any("config_hash" in h for h in header)
    meta = json.loads((tmp_path / "fit.json").read_text())
    assert meta["fit"]["converged"] and "loglik" in meta["fit"]
    assert np.array(meta["covariance"]).shape == (4, 4)


def test_drw_without_propensity_design_is_spec_error(sim_csv, tmp_path, capsys):
    code = main(["fit", "--data", str(sim_csv), "--w-terms", "v", "--estimator", "drw", "--out", str(tmp_path)])
    assert code == 4
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "spec"


@pytest.mark.parametrize("est,var", [("mle", "sandwich"), ("drw", "fisher"), ("dr-p0", "fisher")])
def test_invalid_variance_combinations(sim_csv, tmp_path, est, var):
    args = ["fit", "--data", str(sim_csv), "--w-terms", "v", "--x-terms", "v", "--estimator", est,
            "--variance", var, "--out", str(tmp_path)]
    assert main(args) == 4


def test_error_categories(tmp_path, sim_csv, capsys):
    assert main(["fit", "--data", str(tmp_path / "none.csv"), "--out", str(tmp_path)]) == 3
    bad = tmp_path / "bad.csv"
    bad.write_text("y,a,v\n0,1,1\n2,0,1\n")
    assert main(["fit", "--data", str(bad), "--w-terms", "v", "--out", str(tmp_path)]) == 3
    assert "row 2" in capsys.readouterr().err
    assert main(["fit", "--data", str(sim_csv), "--w-terms", "nope", "--out", str(tmp_path)]) == 3
    dup = tmp_path / "dup.csv"
    df = read(sim_csv)
    df["v2"] = df.v
    df.to_csv(dup, index=False)
    assert main(["fit", "--data", str(dup), "--w-terms", "v", "--z-terms", "v,v2", "--out", str(tmp_path)]) == 6
    with pytest.raises(SystemExit) as info:
        main(["fit", "--estimator", "ols"])
    assert info.value.code == 2


def test_config_file_with_flag_override(sim_csv, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"data": str(sim_csv), "w-terms": "v", "x_terms": "v", "estimator": "dru",
                               "measure": "rd", "out": str(tmp_path / "a")}))
    assert main(["fit", "--config", str(cfg), "--estimator", "drw"]) == 0
    meta = json.loads((tmp_path / "a" / "fit.json").read_text())
    assert meta["estimator"] == "drw" and meta["spec"]["measure"] == "rd"
    assert meta["variance"] == "sandwich" and len(meta["coefficients"]) == 2


def test_dr_p0_uses_linear_baseline(sim_csv, tmp_path):
    assert main(["fit", "--data", str(sim_csv), "--w-terms", "v", "--x-terms", "v", "--estimator", "dr-p0",
                 "--out", str(tmp_path)]) == 0
    meta = json.loads((tmp_path / "fit.json").read_text())
    assert meta["spec"]["nuisance"] == "linear_p0"
    assert meta["fit"]["weight_kind"] == "naive"


def test_factorial_analysis_and_predictions(factorial_csv, tmp_path):
    out = tmp_path / "fit"
    assert main(["fit", "--data", str(factorial_csv), "--w-terms", ALL_TERMS, "--x-terms", ALL_TERMS,
                 "--estimator", "drw", "--out", str(out)]) == 0
    coef = read(out / "coefficients.csv")
    assert len(coef) == 15
    covs = tmp_path / "new.csv"
    grid = pd.DataFrame(list(itertools.product([0.0, 1.0], repeat=4)), columns=FACTORS)
    grid.to_csv(covs, index=False)
    pred_path = tmp_path / "pred.csv"
    assert main(["predict", "--fit", str(out / "fit.json"), "--data", str(covs), "--se",
                 "--out", str(pred_path)]) == 0
    pred = read(pred_path)
    assert len(pred) == 16
    alpha = coef.estimate.to_numpy()
    w_row = np.r_[1.0, np.zeros(14)]  # all factors zero
    assert pred.rr[0] == pytest.approx(np.exp(alpha @ w_row))
    np.testing.assert_allclose(pred.rr, np.exp(pred.theta))
    assert pred.theta_se[0] == pytest.approx(coef.se[0], rel=1e-8)
    assert np.all((pred.p1 > 0) & (pred.p1 < 1))


def test_intercept_only_prediction_is_constant(tmp_path):
    data = tmp_path / "d.csv"
    pd.DataFrame({"y": [0, 1, 0, 1], "a": [0, 0, 1, 1], "x": [1, 2, 3, 4]}).to_csv(data, index=False)
    assert main(["fit", "--data", str(data), "--out", str(tmp_path / "f")]) == 0
    assert main(["predict", "--fit", str(tmp_path / "f" / "fit.json"), "--data", str(data),
                 "--out", str(tmp_path / "p.csv")]) == 0
    pred = read(tmp_path / "p.csv")
    np.testing.assert_allclose(pred[["theta", "p0", "p1", "rr"]], [[0, 0.5, 0.5, 1]] * 4, atol=1e-8)


def test_bootstrap_ci_from_replicates(sim_csv, tmp_path):
    out = tmp_path / "b"
    assert main(["fit", "--data", str(sim_csv), "--w-terms", "v", "--variance", "bootstrap", "--boot-reps", "60",
                 "--seed", "4", "--out", str(out)]) == 0
    reps = read(out / "bootstrap_replicates.csv")
    assert len(reps) == 60
    covs = tmp_path / "sub.csv"
    pd.DataFrame({"v": [0.5]}).to_csv(covs, index=False)
    assert main(["predict", "--fit", str(out / "fit.json"), "--data", str(covs), "--bootstrap-ci",
                 "--out", str(tmp_path / "p.csv")]) == 0
    pred = read(tmp_path / "p.csv")
    draws = np.exp(reps["alpha:intercept"] + 0.5 * reps["alpha:v"])
    lo, hi = np.percentile(draws, [2.5, 97.5])
    assert pred.rr_ci_low[0] == pytest.approx(lo) and pred.rr_ci_high[0] == pytest.approx(hi)
    assert lo < pred.rr[0] < hi
    # same seed, different output directory: identical files
    assert main(["fit", "--data", str(sim_csv), "--w-terms", "v", "--variance", "bootstrap", "--boot-reps", "60",
                 "--seed", "4", "--out", str(tmp_path / "b2")]) == 0
    assert (out / "coefficients.csv").read_bytes() == (tmp_path / "b2" / "coefficients.csv").read_bytes()


def test_predict_column_mismatch(sim_csv, tmp_path):
    assert main(["fit", "--data", str(sim_csv), "--w-terms", "v", "--out", str(tmp_path)]) == 0
    other = tmp_path / "o.csv"
    pd.DataFrame({"u": [1.0]}).to_csv(other, index=False)
    assert main(["predict", "--fit", str(tmp_path / "fit.json"), "--data", str(other)]) == 4


def test_simulate_fast_and_deterministic(tmp_path):
    args = ["simulate", "--measure", "rd", "--reps", "8", "--n", "200", "--seed", "2"]
    assert main(args + ["--out", str(tmp_path / "s1")]) == 0
    assert main(args + ["--out", str(tmp_path / "s2")]) == 0
    for f in ("table.csv", "summary.csv", "study.json"):
        assert (tmp_path / "s1" / f).read_bytes() == (tmp_path / "s2" / f).read_bytes()
    table = read(tmp_path / "s1" / "table.csv")
    assert list(table.row[:3]) == ["mle.bth", "mle.psc", "mle.orc"] and len(table) == 12
    assert main(["simulate", "--fast", "--n", "100", "--scenarios", "bth", "--estimators", "mle",
                 "--out", str(tmp_path / "f")]) == 0
    meta = json.loads((tmp_path / "f" / "study.json").read_text())["metadata"]
    assert meta["fast_mode"] is True and meta["reps"] == 200


def test_curves(tmp_path, capsys):
    assert main(["curves", "--measure", "rr", "--theta-grid", "0,0.6931471805599453", "--phi-grid", "0"]) == 0
    df = pd.read_csv(__import__("io").StringIO(capsys.readouterr().out))
    assert list(df.columns) == ["theta", "phi", "p0", "p1"]
    np.testing.assert_allclose(df.iloc[1][["p0", "p1"]], [1 / 3, 2 / 3], atol=1e-9)
    out = tmp_path / "c.csv"
    assert main(["curves", "--measure", "rd", "--phi-grid=-2:2:5", "--out", str(out)]) == 0
    assert len(read(out)) == 13 * 5
