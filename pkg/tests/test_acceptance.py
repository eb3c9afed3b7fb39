"""Acceptance criteria, one PASS/FAIL line per check.

Monte Carlo studies use seed 7 and are computed once per session.
"""

import math
import time
from functools import lru_cache

import numpy as np
import pytest

from oracles import enumerate_cells
from relrisk import (Dataset, DesignSpec, Estimator, OutcomeModelSpec, bootstrap, fit_mle, fit_propensity,
                     generate, inverse, make_weights, run_study, solve_dr, logop_design, linear_baseline_design)
from relrisk.linkmap import forward, h_transform
from relrisk.mle import _Likelihood
from report import verdict

SEED = 7
REPS = 1000
MEASURES = ["rr", "rd"]
CONSISTENT = [("mle", "bth"), ("mle", "orc")] + [(e, s) for e in ("drw", "dru") for s in ("bth", "psc", "orc")]
_TIMES = {}


@lru_cache(maxsize=None)
def logop_study(measure, n=500):
    t0 = time.perf_counter()
    res = run_study(logop_design(measure, n=n), reps=REPS, seed=SEED)
    _TIMES[("logop", measure, n)] = time.perf_counter() - t0
    return res


@lru_cache(maxsize=None)
def linear_study(measure, form):
    return run_study(linear_baseline_design(measure, n=500), estimators=["mle", "drw"], reps=REPS, seed=SEED,
                     nuisance_form=form)


def fmt(x):
    return f"{x:+.4f}"


# -- 1 ----------------------------------------------------------------------------


@pytest.mark.parametrize("m", MEASURES)
def test_c1_bijection_suite(m):
    t0 = time.perf_counter()
    g = np.linspace(-6, 6, 241)
    tt, ff = (a.ravel() for a in np.meshgrid(g, g))
    rand = np.random.default_rng(SEED).uniform(-6, 6, size=(10_000, 2))
    th = np.r_[tt, rand[:, 0]]
    ph = np.r_[ff, rand[:, 1]]
    t2, f2 = forward(*inverse(th, ph, m), m)
    # error relative to max(1, |value|): near p = 1 - 3e-8 even correctly rounded
    # doubles lose about 1.6e-9 of phi in absolute terms
    scale = np.maximum(1.0, np.abs(np.r_[th, ph]))
    rel = float(np.max(np.abs(np.r_[t2 - th, f2 - ph]) / scale))
    err = float(np.max(np.abs(np.r_[t2 - th, f2 - ph])))
    ok = verdict("C1", rel < 1e-9, f"{m} round trip on 241x241 grid + 1e4 points: max error {rel:.2e} < 1e-9 "
                                   f"relative to max(1, |value|) (absolute {err:.2e})")

    big = np.linspace(-30, 30, 601)
    bt, bf = (a.ravel() for a in np.meshgrid(big, big))
    p0, p1 = inverse(bt, bf, m)
    finite = bool(np.all(np.isfinite(p0)) and np.all(np.isfinite(p1)))
    ok &= verdict("C1", finite, f"{m} no NaN/Inf for |theta|,|phi| <= 30")

    base = np.column_stack(inverse(g, 0.0, m))
    jump = max(np.max(np.abs(np.column_stack(inverse(g, s, m)) - base)) for s in (1e-12, -1e-12, 1e-15))
    ok &= verdict("C1", jump < 1e-9, f"{m} continuity at phi=0: max jump {jump:.2e} < 1e-9")
    elapsed = time.perf_counter() - t0
    ok &= verdict("C1", elapsed < 5.0, f"{m} runtime {elapsed:.2f}s < 5s")
    assert ok


# -- 2 ----------------------------------------------------------------------------


def test_c2_exact_small_cases():
    p0, p1 = inverse(math.log(2), 0.0, "rr")
    ok = verdict("C2", abs(p0 - 1 / 3) < 1e-12 and abs(p1 - 2 / 3) < 1e-12,
                 f"inverse(log 2, 0, RR) = ({p0:.15f}, {p1:.15f})")
    for m in MEASURES:
        r = inverse(0.0, 0.0, m)
        ok &= verdict("C2", r == (0.5, 0.5), f"inverse(0, 0, {m}) = {r}")
    assert ok


# -- 3 ----------------------------------------------------------------------------


@pytest.mark.parametrize("m", MEASURES)
def test_c3_gradient_suite(m):
    rng = np.random.default_rng(SEED)
    data = generate(logop_design(m, n=300, seed=SEED))
    v = DesignSpec.parse("v")
    lik = _Likelihood(data, OutcomeModelSpec(m, v, v))
    worst = 0.0
    for _ in range(50):
        x = rng.normal(scale=0.7, size=4)
        g = lik.score(x)
        fd = np.empty(4)
        for j in range(4):
            h = 1e-5 * (1 + abs(x[j]))
            e = np.zeros(4)
            e[j] = h
            fd[j] = (lik.loglik(x + e) - lik.loglik(x - e)) / (2 * h)
        worst = max(worst, float(np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1.0))))
    assert verdict("C3", worst < 1e-6, f"{m} score vs central differences at 50 points: max rel err {worst:.2e}")


# -- 4 ----------------------------------------------------------------------------


def test_c4_logop_design_study():
    rr, rd = logop_study("rr"), logop_study("rd")
    ok = True
    for j, target in enumerate((0.008, -0.021)):
        b = rr.cell("bth", "mle", j).bias
        ok &= verdict("C4", abs(b - target) <= 0.02, f"mle.bth RR alpha{j} bias {fmt(b)} within 0.02 of {target}")
    c = rr.cell("bad", "mle", 0)
    ok &= verdict("C4", abs(c.bias + 0.403) <= 0.03, f"mle.bad RR alpha0 bias {fmt(c.bias)} within 0.03 of -0.403")
    ok &= verdict("C4", c.coverage < 0.10, f"mle.bad RR alpha0 coverage {c.coverage:.3f} < 0.10")
    for name, res in (("RR", rr), ("RD", rd)):
        for sc in ("psc", "orc"):
            for j in range(2):
                b = res.cell(sc, "drw", j).bias
                ok &= verdict("C4", abs(b) < 0.03, f"drw.{sc} {name} alpha{j} |bias| {abs(b):.4f} < 0.03")
    b = rr.cell("bad", "drw", 0).bias
    ok &= verdict("C4", b < -0.05, f"drw.bad RR alpha0 bias {fmt(b)} < -0.05")
    for name, res in (("RR", rr), ("RD", rd)):
        for est, sc in CONSISTENT:
            for j in range(2):
                cov = res.cell(sc, est, j).coverage
                ok &= verdict("C4", 0.93 <= cov <= 0.97, f"{est}.{sc} {name} alpha{j} coverage {cov:.3f} in [0.93, 0.97]")
    for name, res in (("RR", rr), ("RD", rd)):
        for j in range(2):
            c = res.cell("psc", "mle", j)
            verdict("C4", True, f"(info) mle.psc {name} alpha{j}, misspecified outcome model: "
                                f"bias {fmt(c.bias)}, coverage {c.coverage:.3f}")
    for m in MEASURES:
        secs = _TIMES[("logop", m, 500)]
        ok &= verdict("C4", secs < 600, f"log-OP design study {m} runtime {secs:.0f}s < 600s")
    fails = int(rr.summary.failures.sum() + rd.summary.failures.sum())
    verdict("C4", True, f"(info) failed fits across both studies: {fails}")
    assert ok


# -- 5 ----------------------------------------------------------------------------


def test_c5_linear_baseline_study():
    ok = True
    lin_rr = linear_study("rr", "linear_p0")
    b = lin_rr.cell("bad", "mle", 1).bias
    ok &= verdict("C5", abs(b - 0.357) <= 0.03, f"mle.bad LINEAR_P0 RR alpha1 bias {fmt(b)} within 0.03 of 0.357")
    for form in ("log_op", "linear_p0"):
        for m in MEASURES:
            res = linear_study(m, form)
            for sc in ("bth", "psc", "orc"):
                for j in range(2):
                    b = res.cell(sc, "drw", j).bias
                    ok &= verdict("C5", abs(b) < 0.02, f"drw.{sc} {form} {m.upper()} alpha{j} |bias| {abs(b):.4f} < 0.02")
    for form, target in (("log_op", -0.061), ("linear_p0", -0.040)):
        b = linear_study("rd", form).cell("bad", "drw", 0).bias
        ok &= verdict("C5", abs(b - target) <= 0.02, f"drw.bad {form} RD alpha0 bias {fmt(b)} within 0.02 of {target}")
    assert ok


# -- 6 ----------------------------------------------------------------------------


def test_c6_sd_accuracy_n1000():
    ok = True
    for m in MEASURES:
        res = logop_study(m, 1000)
        for est, sc in CONSISTENT:
            for j in range(2):
                r = res.cell(sc, est, j).sd_accuracy
                ok &= verdict("C6", 0.90 <= r <= 1.10, f"{est}.{sc} {m.upper()} alpha{j} SD accuracy {r:.3f} in [0.90, 1.10]")
        for j in range(2):
            c = res.cell("psc", "mle", j)
            verdict("C6", True, f"(info) mle.psc {m.upper()} alpha{j}, misspecified outcome model: "
                                f"SD accuracy {c.sd_accuracy:.3f}, coverage {c.coverage:.3f}")
    assert ok


# -- 7 ----------------------------------------------------------------------------


def test_c7_efficiency_ordering():
    ok = True
    for m in MEASURES:
        res = logop_study(m)
        for j in range(2):
            sd = {e: res.cell("bth", e, j).mc_sd for e in ("mle", "drw", "dru")}
            good = sd["mle"] <= 1.05 * sd["drw"] and sd["drw"] <= 1.05 * sd["dru"]
            ok &= verdict("C7", good, f"{m.upper()} alpha{j} MC SD mle {sd['mle']:.4f} <= drw {sd['drw']:.4f} "
                                      f"<= dru {sd['dru']:.4f} (5% slack)")
    assert ok


# -- 8 ----------------------------------------------------------------------------


def test_c8_property_suite():
    rng = np.random.default_rng(SEED)
    worst = 0.0
    for m in MEASURES:
        for p0, p1, e in rng.uniform(0.01, 0.99, size=(100, 3)):
            theta = forward(p0, p1, m)[0]
            cells = enumerate_cells(p0, p1, e)
            eh = sum(pr * h_transform(y, a, theta, m) for a, y, pr in cells)
            eah = sum(pr * a * h_transform(y, a, theta, m) for a, y, pr in cells)
            worst = max(worst, abs(eh - p0), abs(eah - p0 * e))
    ok = verdict("C8", worst < 1e-12, f"E[H|V]=p0 and E[AH|V]=p0 e over 100 triples: max error {worst:.1e}")

    v = DesignSpec.parse("v")
    data = generate(logop_design("rr", n=500, seed=SEED))
    spec = OutcomeModelSpec("rr", v, v)
    nuis, prop = fit_mle(data, spec), fit_propensity(data, v)
    w = make_weights(data, spec, nuis, prop, "efficient")
    base = solve_dr(data, spec, nuis, prop, weights=w).alpha
    shift = max(np.max(np.abs(solve_dr(data, spec, nuis, prop, weights=c * w).alpha - base)) for c in (0.01, 3.0, 1e3))
    ok &= verdict("C8", shift < 1e-9, f"DR root under weight scaling: max change {shift:.1e} < 1e-9")

    cell_rng = np.random.default_rng(SEED + 1)
    n = 2000
    x = cell_rng.integers(0, 2, n).astype(float)
    a = cell_rng.integers(0, 2, n).astype(float)
    y = (cell_rng.random(n) < np.array([[0.25, 0.4], [0.55, 0.7]])[x.astype(int), a.astype(int)]).astype(float)
    sat = Dataset(y, a, {"x": x})
    xs = DesignSpec.parse("x")
    for m in MEASURES:
        fit = fit_mle(sat, OutcomeModelSpec(m, xs, xs))
        gap = 0.0
        for cell in (0.0, 1.0):
            i = np.flatnonzero(x == cell)[0]
            gap = max(gap, abs(fit.p0[i] - y[(x == cell) & (a == 0)].mean()),
                      abs(fit.p1[i] - y[(x == cell) & (a == 1)].mean()))
        ok &= verdict("C8", gap < 1e-8, f"saturated {m.upper()} MLE vs cell proportions: max gap {gap:.1e}")

    est = Estimator("mle", spec)
    b1, b2 = bootstrap(data, est, 20, seed=SEED), bootstrap(data, est, 20, seed=SEED)
    ok &= verdict("C8", np.array_equal(b1.estimates, b2.estimates), "bootstrap replicates identical for equal seeds")
    assert ok
