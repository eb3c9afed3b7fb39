"""Simulation designs and the Monte Carlo scenario harness.

A design draws a covariate ``v`` and an independent irrelevant covariate
``vdag`` from the same uniform law. Exposure follows a logistic model in
``(1, v)`` and the outcome follows the target model with either a log
odds-product or a linear baseline-risk nuisance, both in ``(1, v)``.

The analyst always uses ``W = (1, v)``; the four scenarios differ in
whether ``v`` or ``vdag`` enters the nuisance (Z) and propensity (X) designs:

====  ============  ==============
name  nuisance (Z)  propensity (X)
====  ============  ==============
bth   v             v
psc   vdag          v
orc   v             vdag
bad   vdag          vdag
====  ============  ==============
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
from scipy import stats
from scipy.special import expit

from .design import Dataset, DesignSpec
from .estimators import Estimator, EstimatorKind
from .exceptions import ConvergenceError, RelRiskError, SpecError
from .linkmap import Measure
from .mle import NuisanceForm, OutcomeModelSpec, fit_mle, outcome_probs
from .propensity import fit_propensity

log = logging.getLogger(__name__)

SCENARIOS = {"bth": None, "psc": "nuisance", "orc": "propensity", "bad": "both"}
ESTIMATORS = ("mle", "drw", "dru")


@dataclass(frozen=True)
class SimDesign:
    n: int
    alpha: tuple
    beta: tuple
    gamma: tuple
    low: float
    high: float
    measure: Measure
    truth_nuisance: NuisanceForm = NuisanceForm.LOG_OP
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "measure", Measure.coerce(self.measure))
        object.__setattr__(self, "truth_nuisance", NuisanceForm.coerce(self.truth_nuisance))
        for key in ("alpha", "beta", "gamma"):
            object.__setattr__(self, key, tuple(float(x) for x in getattr(self, key)))
        if self.n < 1 or not self.low < self.high:
            raise SpecError("design needs n >= 1 and low < high")
        if self.truth_nuisance is NuisanceForm.LINEAR_P0:
            self._check_feasible()

    def _check_feasible(self):
        # endpoints plus a dense grid: p1 need not be monotone in v
        v = np.concatenate([[self.low, self.high], np.linspace(self.low, self.high, 2001)])
        p0, p1, *_ = self.risks(v)
        if not (np.all((p0 > 0) & (p0 < 1)) and np.all((p1 > 0) & (p1 < 1))):
            raise SpecError("linear baseline-risk truth leaves (0, 1) on the covariate range")

    def risks(self, v):
        V = np.column_stack([np.ones_like(v), v])
        return outcome_probs(V @ np.array(self.alpha), V @ np.array(self.beta),
                             self.measure, self.truth_nuisance)[:4]

    def with_(self, **changes) -> "SimDesign":
        return SimDesign(**{**asdict(self), **changes})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["measure"] = self.measure.value
        d["truth_nuisance"] = self.truth_nuisance.value
        return d


def logop_design(measure="rr", n: int = 500, seed: int = 0) -> SimDesign:
    """Log odds-product truth, ``v ~ Unif(-2, 2)``."""
    return SimDesign(n, (0.0, -1.0), (-0.5, 1.0), (0.1, -0.5), -2.0, 2.0, measure,
                     NuisanceForm.LOG_OP, seed)


def linear_baseline_design(measure="rr", n: int = 500, seed: int = 0) -> SimDesign:
    """Linear baseline-risk truth ``p0 = 0.5 + 0.2 v``, ``v ~ Unif(-1, 1)``."""
    return SimDesign(n, (0.0, 0.3), (0.5, 0.2), (0.1, -0.5), -1.0, 1.0, measure,
                     NuisanceForm.LINEAR_P0, seed)


def generate(design: SimDesign, rep: int | None = None) -> Dataset:
    """Draw one dataset; ``rep`` selects the stream ``default_rng([seed, rep])``."""
    rng = np.random.default_rng(design.seed if rep is None else [design.seed, rep])
    n = design.n
    v = rng.uniform(design.low, design.high, n)
    vdag = rng.uniform(design.low, design.high, n)
    e = expit(design.gamma[0] + design.gamma[1] * v)
    a = (rng.random(n) < e).astype(float)
    p0, p1, *_ = design.risks(v)
    y = (rng.random(n) < np.where(a == 1, p1, p0)).astype(float)
    return Dataset(y, a, {"v": v, "vdag": vdag})


def _swap(which: str | None) -> tuple[DesignSpec, DesignSpec]:
    which = None if which in (None, "none") else str(which)
    if which not in (None, "nuisance", "propensity", "both"):
        raise SpecError(f"unknown corruption {which!r}")
    z = "vdag" if which in ("nuisance", "both") else "v"
    x = "vdag" if which in ("propensity", "both") else "v"
    return DesignSpec.parse([z]), DesignSpec.parse([x])


def corrupt_design(dataset: Dataset, which: str | None) -> tuple[DesignSpec, DesignSpec]:
    """Analyst (Z, X) designs with ``vdag`` swapped in for the named model(s)."""
    if "vdag" not in dataset.covariates:
        raise SpecError("dataset lacks the irrelevant covariate 'vdag'")
    return _swap(which)


def scenario_designs(scenario: str) -> tuple[DesignSpec, DesignSpec]:
    """(Z, X) designs for a named scenario."""
    if scenario not in SCENARIOS:
        raise SpecError(f"unknown scenario {scenario!r}; expected one of {list(SCENARIOS)}")
    return _swap(SCENARIOS[scenario])


def _replicate(args):
    design, rep, scenarios, estimators, form = args
    data = generate(design, rep)
    w = DesignSpec.parse(["v"])
    nuis_cache, prop_cache = {}, {}
    records = []
    for sc in scenarios:
        z, x = scenario_designs(sc)
        spec = OutcomeModelSpec(design.measure, w, z, form)
        for est_name in estimators:
            est = Estimator(est_name, spec, x)
            try:
                key = z.terms
                if key not in nuis_cache:
                    try:
                        nuis_cache[key] = fit_mle(data, est.spec)
                    except RelRiskError as exc:
                        nuis_cache[key] = exc
                nuis = nuis_cache[key]
                if isinstance(nuis, Exception):
                    raise nuis
                prop = None
                if est.kind.is_dr:
                    if x.terms not in prop_cache:
                        try:
                            prop_cache[x.terms] = fit_propensity(data, x)
                        except RelRiskError as exc:
                            prop_cache[x.terms] = exc
                    prop = prop_cache[x.terms]
                    if isinstance(prop, Exception):
                        raise prop
                fit = est.fit(data, nuisance=nuis, propensity=prop)
                k = w.size
                for j in range(k):
                    records.append((rep, sc, est.kind.value, j, fit.estimates[j],
                                    float(np.sqrt(fit.cov[j, j])), ""))
            except (RelRiskError, np.linalg.LinAlgError, AssertionError) as exc:
                for j in range(w.size):
                    records.append((rep, sc, EstimatorKind.coerce(est_name).value, j, np.nan,
                                    np.nan, f"{type(exc).__name__}: {exc}"))
    return records


@dataclass
class StudyResult:
    design: SimDesign
    nuisance_form: NuisanceForm
    replicates: pd.DataFrame
    summary: pd.DataFrame
    metadata: dict = field(default_factory=dict)

    def estimates(self, scenario: str, estimator: str) -> np.ndarray:
        """Replicate-by-coefficient matrix of point estimates (NaN for failures)."""
        sub = self.replicates[(self.replicates.scenario == scenario)
                              & (self.replicates.estimator == estimator)]
        return sub.pivot(index="rep", columns="coef", values="estimate").to_numpy()

    def cell(self, scenario: str, estimator: str, coef: int) -> pd.Series:
        s = self.summary
        return s[(s.scenario == scenario) & (s.estimator == estimator) & (s.coef == coef)].iloc[0]

    def table(self) -> pd.DataFrame:
        """Wide layout with one row per ``estimator.scenario`` and a column group per coefficient."""
        s = self.summary.copy()
        s["row"] = s.estimator + "." + s.scenario
        wide = s.pivot(index="row", columns="coef",
                       values=["bias", "mc_se", "sd_accuracy", "coverage"])
        wide.columns = [f"alpha{c}_{stat}" for stat, c in wide.columns]
        order = [f"{e}.{sc}" for e in s.estimator.unique() for sc in s.scenario.unique()]
        cols = [f"alpha{c}_{stat}" for c in sorted(s.coef.unique())
                for stat in ("bias", "mc_se", "sd_accuracy", "coverage")]
        return wide.loc[[r for r in order if r in wide.index], cols]


def _summarize(df: pd.DataFrame, truth, level: float = 0.95) -> pd.DataFrame:
    z = stats.norm.ppf(0.5 + level / 2)
    rows = []
    for (sc, est, j), g in df.groupby(["scenario", "estimator", "coef"], sort=False):
        ok = g[g.error == ""]
        x, se = ok.estimate.to_numpy(), ok.se.to_numpy()
        m = x.size
        t = truth[j]
        mc_sd = float(np.std(x, ddof=1)) if m > 1 else np.nan
        est_sd = float(np.mean(se)) if m else np.nan
        rows.append({
            "scenario": sc, "estimator": est, "coef": j, "truth": t,
            "mean": float(np.mean(x)) if m else np.nan,
            "bias": float(np.mean(x) - t) if m else np.nan,
            "mc_sd": mc_sd, "mc_se": mc_sd / np.sqrt(m) if m > 1 else np.nan,
            "est_sd": est_sd, "sd_accuracy": est_sd / mc_sd if m > 1 else np.nan,
            "coverage": float(np.mean(np.abs(x - t) <= z * se)) if m else np.nan,
            "reps": m, "failures": int(len(g) - m),
        })
    return pd.DataFrame(rows)


def run_study(design: SimDesign, scenarios=tuple(SCENARIOS), estimators=ESTIMATORS, reps: int = 1000,
              seed: int | None = None, nuisance_form=NuisanceForm.LOG_OP, *, workers: int | None = None,
              max_fail_frac: float = 0.10) -> StudyResult:
    """Run ``reps`` replicates of every scenario x estimator cell.

    Replicate ``i`` draws its data from ``default_rng([seed, i])`` and all
    cells of that replicate share it; fits depending only on the nuisance
    or propensity design are computed once per replicate. Results are
    collected in replicate order, so they do not depend on ``workers``.
    """
    if reps < 1:
        raise SpecError("reps must be at least 1")
    if seed is not None:
        design = design.with_(seed=seed)
    form = NuisanceForm.coerce(nuisance_form)
    estimators = [EstimatorKind.coerce(e).value for e in estimators]
    for sc in scenarios:
        scenario_designs(sc)
    if workers is None:
        workers = int(os.environ.get("RELRISK_WORKERS", "1"))
    jobs = [(design, i, tuple(scenarios), tuple(estimators), form) for i in range(reps)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_replicate, jobs, chunksize=max(1, reps // (8 * workers))))
    else:
        chunks = [_replicate(j) for j in jobs]
    df = pd.DataFrame([r for c in chunks for r in c],
                      columns=["rep", "scenario", "estimator", "coef", "estimate", "se", "error"])
    failed = df[df.error != ""].groupby(["scenario", "estimator"]).rep.nunique()
    for (sc, est), count in failed.items():
        log.warning("%s.%s: %d of %d replicates failed", est, sc, count, reps)
        if count > max_fail_frac * reps:
            example = df[(df.error != "") & (df.scenario == sc) & (df.estimator == est)].error.iloc[0]
            raise ConvergenceError(f"{est}.{sc}: {count} of {reps} replicates failed (e.g. {example})")
    summary = _summarize(df, design.alpha)
    meta = {"design": design.to_dict(), "nuisance_form": form.value, "reps": reps,
            "scenarios": list(scenarios), "estimators": estimators}
    return StudyResult(design, form, df, summary, meta)
