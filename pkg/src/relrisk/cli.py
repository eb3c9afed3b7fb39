"""Command-line front end: ``fit``, ``predict``, ``simulate`` and ``curves``.

Options can be given as flags or in a JSON file passed with ``--config``;
flags win. Every output file begins with ``#`` metadata lines (tool version,
seed, hash of the resolved configuration), so tables read back with
``pandas.read_csv(path, comment="#")``.

Exit codes: 0 success, 1 other package error, 2 usage error, 3 input file
(io), 4 specification, 5 convergence, 6 singularity, 7 domain.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .design import Dataset, DesignSpec, build_design, load_covariates, load_csv
from .estimators import Estimator, EstimatorKind
from .exceptions import RelRiskError, SpecError
from .linkmap import Measure, emit_curves
from .mle import NuisanceForm, OutcomeModelSpec, outcome_probs
from .simulation import ESTIMATORS, SCENARIOS, run_study, logop_design, linear_baseline_design
from .variance import bootstrap, wald_summary

log = logging.getLogger("relrisk")

VALID_VARIANCE = {"mle": {"fisher", "bootstrap"}}
FAST_REPS = 200

_DEFAULTS = {
    "y": "y", "a": "a", "w_terms": "", "z_terms": None, "x_terms": None, "measure": "rr",
    "estimator": "mle", "variance": None, "nuisance": "log_op", "boot_reps": 1000, "seed": 0,
    "level": 0.95, "design": "logop", "reps": 1000, "n": 500, "fast": False,
    "scenarios": list(SCENARIOS), "estimators": list(ESTIMATORS), "theta_grid": "-3:3:13",
    "phi_grid": "-6:6:49", "se": False, "bootstrap_ci": False,
}


# -- configuration ---------------------------------------------------------------


def _resolve(args: argparse.Namespace) -> dict:
    cfg = {}
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise SpecError(f"cannot read config {args.config}: {exc}") from None
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    out = dict(_DEFAULTS)
    out.update(cfg)
    for key, val in vars(args).items():
        if val is not None and key not in ("func", "config"):
            out[key] = val
    out["command"] = args.command
    return out


def _config_hash(cfg: dict) -> str:
    # output location and verbosity do not affect results
    core = {k: v for k, v in cfg.items() if k not in ("out", "verbose")}
    blob = json.dumps(core, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _metadata(cfg: dict, **extra) -> dict:
    return {"tool": "relrisk", "version": __version__, "seed": cfg.get("seed"),
            "config_hash": _config_hash(cfg), **extra}


def _write_csv(path: Path, df: pd.DataFrame, meta: dict, index: bool = False):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        for key, val in meta.items():
            fh.write(f"# {key}: {json.dumps(val, default=str)}\n")
        df.to_csv(fh, index=index, float_format="%.10g")


def _write_json(path: Path, obj: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    return str(o)


def _terms(text) -> DesignSpec | None:
    if text is None:
        return None
    return DesignSpec.parse(text)


def _out_dir(cfg) -> Path:
    if not cfg.get("out"):
        raise SpecError("--out is required")
    return Path(cfg["out"])


# -- fit -------------------------------------------------------------------------


def cmd_fit(cfg: dict) -> int:
    if not cfg.get("data"):
        raise SpecError("--data is required")
    kind = EstimatorKind.coerce(cfg["estimator"])
    variance = cfg["variance"] or ("fisher" if kind is EstimatorKind.MLE else "sandwich")
    allowed = VALID_VARIANCE.get(kind.value, {"sandwich", "bootstrap"})
    if variance not in allowed:
        raise SpecError(f"variance {variance!r} is not available for {kind.value}; "
                        f"choose from {sorted(allowed)}")
    w = _terms(cfg["w_terms"])
    z = _terms(cfg["z_terms"]) if cfg["z_terms"] is not None else w
    x = _terms(cfg["x_terms"])
    if kind.is_dr and x is None:
        raise SpecError(f"estimator {kind.value} needs --x-terms (propensity design)")
    cols = sorted(w.columns() | z.columns() | (x.columns() if x else set()))
    data = load_csv(cfg["data"], cfg["y"], cfg["a"], cols)
    log.info("loaded %d rows from %s", data.n, cfg["data"])
    spec = OutcomeModelSpec(cfg["measure"], w, z, cfg["nuisance"])
    est = Estimator(kind, spec, x)
    fit = est.fit(data, variance=(variance != "bootstrap"))
    out = _out_dir(cfg)
    meta = _metadata(cfg, estimator=kind.value, variance=variance)
    boot = None
    cov = fit.cov
    if variance == "bootstrap":
        boot = bootstrap(data, est, int(cfg["boot_reps"]), int(cfg["seed"]), names=fit.names)
        cov = np.cov(boot.estimates, rowvar=False, ddof=1).reshape(len(fit.names), -1)
        reps = pd.DataFrame(boot.estimates, columns=fit.names)
        reps.insert(0, "replicate", [b for b in range(boot.replicates)
                                     if b not in {f for f, _ in boot.failures}])
        _write_csv(out / "bootstrap_replicates.csv", reps, meta)
    table = wald_summary(fit.estimates, cov, float(cfg["level"]), fit.names)
    if boot is not None:
        table["boot_ci_low"], table["boot_ci_high"] = boot.ci_low, boot.ci_high
    _write_csv(out / "coefficients.csv", table.reset_index(), meta)
    summary = {
        "metadata": meta,
        "config": {k: v for k, v in cfg.items() if k != "command"},
        "spec": est.spec.to_dict(),
        "propensity_design": x.to_dict() if x else None,
        "estimator": kind.value,
        "variance": variance,
        "n": data.n,
        "coefficients": table.reset_index().to_dict(orient="records"),
        "covariance": cov,
        "names": fit.names,
        "alpha": fit.alpha,
        "nuisance_beta": fit.nuisance.beta,
        "fit": fit.to_dict(),
    }
    if boot is not None:
        summary["bootstrap"] = {"replicates": boot.replicates, "failures": len(boot.failures),
                                "file": "bootstrap_replicates.csv"}
    _write_json(out / "fit.json", summary)
    print(table.to_string(float_format=lambda v: f"{v:.4g}"))
    return 0


# -- predict ---------------------------------------------------------------------


def cmd_predict(cfg: dict) -> int:
    if not cfg.get("fit") or not cfg.get("data"):
        raise SpecError("predict needs --fit (a fit.json) and --data (covariate CSV)")
    fit_path = Path(cfg["fit"])
    try:
        saved = json.loads(fit_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SpecError(f"cannot read fit file {fit_path}: {exc}") from None
    spec = OutcomeModelSpec.from_dict(saved["spec"])
    covs = load_covariates(cfg["data"])
    n = len(next(iter(covs.values()))) if covs else None
    W = build_design(covs, spec.w, n=n).values
    Z = build_design(covs, spec.z, n=W.shape[0]).values
    alpha = np.asarray(saved["alpha"], dtype=float)
    beta = np.asarray(saved["nuisance_beta"], dtype=float)
    if W.shape[1] != alpha.size or Z.shape[1] != beta.size:
        raise SpecError("covariate file does not match the saved designs")
    theta = W @ alpha
    p0, p1, *_ = outcome_probs(theta, Z @ beta, spec.measure, spec.nuisance)
    measure_col = "rr" if spec.measure is Measure.RR else "rd"
    to_measure = np.exp if spec.measure is Measure.RR else np.tanh
    out = pd.DataFrame({"theta": theta, "p0": p0, "p1": p1, measure_col: to_measure(theta)})
    k = alpha.size
    if cfg.get("se"):
        cov = np.asarray(saved["covariance"], dtype=float)[:k, :k]
        out["theta_se"] = np.sqrt(np.einsum("ij,jk,ik->i", W, cov, W))
    if cfg.get("bootstrap_ci"):
        if "bootstrap" not in saved:
            raise SpecError("the saved fit has no bootstrap replicates; refit with --variance bootstrap")
        reps = pd.read_csv(fit_path.parent / saved["bootstrap"]["file"], comment="#")
        A = reps[saved["names"][:k]].to_numpy()
        draws = to_measure(W @ A.T)
        out[f"{measure_col}_ci_low"], out[f"{measure_col}_ci_high"] = np.percentile(draws, [2.5, 97.5], axis=1)
    dest = Path(cfg["out"]) if cfg.get("out") else None
    meta = _metadata(cfg, fit=str(fit_path))
    if dest is None:
        print(out.to_csv(index=False), end="")
    else:
        _write_csv(dest, out, meta)
    return 0


# -- simulate --------------------------------------------------------------------


def cmd_simulate(cfg: dict) -> int:
    makers = {"logop": logop_design, "linear": linear_baseline_design}
    if cfg["design"] not in makers:
        raise SpecError(f"unknown design {cfg['design']!r}; expected logop or linear")
    reps = FAST_REPS if cfg["fast"] else int(cfg["reps"])
    design = makers[cfg["design"]](cfg["measure"], n=int(cfg["n"]), seed=int(cfg["seed"]))
    scenarios = cfg["scenarios"]
    estimators = cfg["estimators"]
    if isinstance(scenarios, str):
        scenarios = [s.strip() for s in scenarios.split(",") if s.strip()]
    if isinstance(estimators, str):
        estimators = [s.strip() for s in estimators.split(",") if s.strip()]
    res = run_study(design, scenarios, estimators, reps, nuisance_form=cfg["nuisance"])
    out = _out_dir(cfg)
    meta = _metadata(cfg, fast_mode=bool(cfg["fast"]), reps=reps, design=design.to_dict(),
                     nuisance_form=NuisanceForm.coerce(cfg["nuisance"]).value)
    _write_csv(out / "table.csv", res.table().reset_index(), meta)
    _write_csv(out / "summary.csv", res.summary, meta)
    _write_json(out / "study.json", {"metadata": meta, **res.metadata})
    print(res.table().to_string(float_format=lambda v: f"{v:.3f}"))
    return 0


# -- curves ----------------------------------------------------------------------


def _grid(text) -> list[float]:
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    text = str(text).strip()
    if ":" in text:
        lo, hi, num = text.split(":")
        return np.linspace(float(lo), float(hi), int(num)).tolist()
    return [float(v) for v in text.split(",") if v.strip()]


def cmd_curves(cfg: dict) -> int:
    try:
        th, ph = _grid(cfg["theta_grid"]), _grid(cfg["phi_grid"])
    except ValueError as exc:
        raise SpecError(f"bad grid: {exc}") from None
    df = emit_curves(cfg["measure"], th, ph)
    if cfg.get("out"):
        _write_csv(Path(cfg["out"]), df, _metadata(cfg, measure=Measure.coerce(cfg["measure"]).value))
    else:
        print(df.to_csv(index=False, float_format="%.10g"), end="")
    return 0


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="relrisk", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"relrisk {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON file with default options")
        sp.add_argument("--out", help="output directory (fit, simulate) or file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--measure", choices=["rr", "rd"])

    f = sub.add_parser("fit", help="fit a model to a CSV file")
    common(f)
    f.add_argument("--data")
    f.add_argument("--y", help="outcome column (default y)")
    f.add_argument("--a", help="exposure column (default a)")
    f.add_argument("--w-terms", help="target design terms, comma separated; ':' for interactions")
    f.add_argument("--z-terms", help="nuisance design terms (default: same as W)")
    f.add_argument("--x-terms", help="propensity design terms (required for DR estimators)")
    f.add_argument("--estimator", choices=[k.value for k in EstimatorKind])
    f.add_argument("--variance", choices=["fisher", "sandwich", "bootstrap"])
    f.add_argument("--nuisance", choices=["log_op", "linear_p0"])
    f.add_argument("--boot-reps", type=int)
    f.add_argument("--level", type=float)
    f.set_defaults(func=cmd_fit)

    pr = sub.add_parser("predict", help="per-row predictions from a saved fit")
    common(pr)
    pr.add_argument("--fit", help="fit.json written by 'relrisk fit'")
    pr.add_argument("--data", help="CSV of covariates")
    pr.add_argument("--se", action="store_true", default=None, help="delta-method SE of theta")
    pr.add_argument("--bootstrap-ci", action="store_true", default=None,
                    help="percentile interval from saved bootstrap replicates")
    pr.set_defaults(func=cmd_predict)

    s = sub.add_parser("simulate", help="Monte Carlo scenario study")
    common(s)
    s.add_argument("--design", choices=["logop", "linear"])
    s.add_argument("--nuisance", choices=["log_op", "linear_p0"])
    s.add_argument("--reps", type=int)
    s.add_argument("--n", type=int)
    s.add_argument("--fast", action="store_true", default=None, help=f"{FAST_REPS} replicates")
    s.add_argument("--scenarios", help="comma separated subset of bth,psc,orc,bad")
    s.add_argument("--estimators", help="comma separated subset of mle,drw,dru")
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("curves", help="risk pairs implied by a (theta, phi) grid")
    common(c)
    c.add_argument("--theta-grid", help="'lo:hi:num' or comma separated values")
    c.add_argument("--phi-grid", help="'lo:hi:num' or comma separated values; write "
                   "--phi-grid=-6:6:49 when the first value is negative")
    c.set_defaults(func=cmd_curves)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve(args)
        return args.func(cfg)
    except RelRiskError as exc:
        print(json.dumps({"error": exc.category, "message": str(exc)}), file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
