"""Variance estimation: inverse information, influence-function sandwich,
nonparametric bootstrap and Wald summaries."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import pandas as pd
from scipy import stats
from scipy.special import expit

from .design import Dataset, build_design
from .dr import DrFit, WeightKind, _equation
from .exceptions import ConvergenceError, RelRiskError, SingularityError, SpecError
from .mle import NuisanceFit, information_inverse, outcome_probs

log = logging.getLogger(__name__)

RCOND_MIN = 1e-12


@dataclass
class InfluenceDecomposition:
    """Pieces of the sandwich ``tau^-1 Sigma tau^-T / n``.

    ``u_tilde`` holds the per-observation estimating function after
    subtracting the first-order effect of estimating the plug-ins.
    """

    tau: np.ndarray
    u_tilde: np.ndarray
    sigma_hat: np.ndarray
    cov_alpha: np.ndarray
    names: list[str] = field(default_factory=list)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov_alpha))

    @property
    def influence(self) -> np.ndarray:
        """Per-observation influence values ``tau^-1 U~_i``."""
        return np.linalg.solve(self.tau, self.u_tilde.T).T


def fisher_variance(fit: NuisanceFit) -> np.ndarray:
    """Covariance of ``(alpha, beta)`` as the inverse observed information."""
    return information_inverse(fit.information, fit.names, RCOND_MIN)


def _solve_guarded(mat: np.ndarray, rhs: np.ndarray, what: str) -> np.ndarray:
    if np.linalg.cond(mat) * RCOND_MIN > 1:
        raise SingularityError(f"{what} is singular or ill-conditioned")
    return np.linalg.solve(mat, rhs)


def _fd_block(row_fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray) -> np.ndarray:
    """Mean Jacobian of per-row vectors by central differences, shape (dim U, dim x)."""
    cols = []
    for j in range(x.size):
        h = 1e-6 * (1.0 + abs(x[j]))
        up, dn = x.copy(), x.copy()
        up[j] += h
        dn[j] -= h
        cols.append((row_fn(up).mean(axis=0) - row_fn(dn).mean(axis=0)) / (2 * h))
    return np.column_stack(cols)


def sandwich_dr(dr: DrFit, data: Dataset) -> InfluenceDecomposition:
    """Influence-function sandwich for a doubly robust fit.

    The weights are held at their fitted values. For efficient weights this
    drops the terms from differentiating the weights, which vanish when at
    least one plug-in model is correct.
    """
    nuis, prop, spec = dr.nuisance, dr.propensity, dr.spec
    eq = _equation(data, spec, nuis, prop, dr.weights)
    n = data.n
    alpha = dr.alpha
    u = eq.rows(alpha)
    tau = -eq.jacobian(alpha)

    # correction for the outcome-nuisance fit, through p0(alpha_n, beta)
    W = eq.W
    Z = build_design(data, spec.z).values
    p = W.shape[1]

    def rows_eta(x):
        p0 = outcome_probs(W @ x[:p], Z @ x[p:], spec.measure, spec.nuisance)[0]
        return eq.rows(alpha, p0=p0)

    b1 = _fd_block(rows_eta, nuis.params)
    score_rows = _score_rows(nuis, data)
    mean_hess = -nuis.information / n
    corr1 = _solve_guarded(mean_hess, score_rows.T, "outcome-model information").T @ b1.T

    # correction for the propensity fit, through e(gamma)
    X = build_design(data, prop.spec).values

    def rows_gamma(g):
        return eq.rows(alpha, e=expit(X @ g))

    b2 = _fd_block(rows_gamma, prop.gamma)
    e = prop.fitted_e
    prop_rows = X * (data.a - e)[:, None]
    mean_dprop = -prop.information / n
    corr2 = _solve_guarded(mean_dprop, prop_rows.T, "propensity information").T @ b2.T

    u_tilde = u - corr1 - corr2
    sigma = u_tilde.T @ u_tilde / n
    tau_inv = _solve_guarded(tau, np.eye(tau.shape[0]), "derivative of the estimating equation")
    cov = tau_inv @ sigma @ tau_inv.T / n
    cov = 0.5 * (cov + cov.T)
    evals = np.linalg.eigvalsh(cov)
    assert evals.min() >= -1e-10 * max(1.0, abs(evals.max())), "sandwich covariance is not PSD"
    return InfluenceDecomposition(tau=tau, u_tilde=u_tilde, sigma_hat=sigma, cov_alpha=cov,
                                  names=dr.names)


def efficient_sandwich(dr: DrFit, data: Dataset) -> InfluenceDecomposition:
    """:func:`sandwich_dr` for a fit with efficient weights."""
    if dr.weight_kind is not WeightKind.EFFICIENT:
        raise SpecError("efficient_sandwich needs a fit with efficient weights")
    return sandwich_dr(dr, data)


def _score_rows(fit: NuisanceFit, data: Dataset) -> np.ndarray:
    from .mle import _Likelihood

    return _Likelihood(data, fit.spec).score_rows(fit.params)


# -- bootstrap -------------------------------------------------------------------


@dataclass
class BootstrapResult:
    estimates: np.ndarray  # successful replicates x parameters, in replicate order
    se: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    failures: list[tuple[int, str]]
    replicates: int
    seed: int
    names: list[str] = field(default_factory=list)

    def summary(self) -> pd.DataFrame:
        return pd.DataFrame({"se": self.se, "ci_low": self.ci_low, "ci_high": self.ci_high},
                            index=self.names or None)


def _one_replicate(args):
    estimator, data, seed, b = args
    rng = np.random.default_rng([seed, b])
    idx = rng.integers(0, data.n, size=data.n)
    try:
        return b, np.asarray(estimator(data.take(idx)), dtype=float), None
    except (RelRiskError, np.linalg.LinAlgError, FloatingPointError) as exc:
        return b, None, f"{type(exc).__name__}: {exc}"


def bootstrap(data: Dataset, estimator: Callable[[Dataset], np.ndarray], B: int, seed: int, *,
              names=None, max_fail_frac: float = 0.10, workers: int | None = None) -> BootstrapResult:
    """Nonparametric row-resampling bootstrap.

    Replicate ``b`` resamples with ``numpy.random.default_rng([seed, b])``,
    so output does not depend on the worker count. Failed replicates are
    dropped and listed in ``failures``.
    """
    if B < 2:
        raise SpecError("bootstrap needs at least 2 replicates")
    if workers is None:
        workers = int(os.environ.get("RELRISK_WORKERS", "1"))
    jobs = [(estimator, data, seed, b) for b in range(B)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(_one_replicate, jobs, chunksize=max(1, B // (4 * workers))))
    else:
        out = [_one_replicate(j) for j in jobs]
    ok = [est for _, est, err in out if err is None]
    failures = [(b, err) for b, _, err in out if err is not None]
    if len(failures) > max_fail_frac * B:
        detail = "; ".join(f"#{b}: {msg}" for b, msg in failures[:5])
        raise ConvergenceError(f"{len(failures)} of {B} bootstrap replicates failed ({detail})")
    for b, msg in failures:
        log.warning("bootstrap replicate %d excluded: %s", b, msg)
    est = np.vstack(ok)
    lo, hi = np.percentile(est, [2.5, 97.5], axis=0)
    return BootstrapResult(estimates=est, se=est.std(axis=0, ddof=1), ci_low=lo, ci_high=hi,
                           failures=failures, replicates=B, seed=seed, names=list(names or []))


# -- Wald summaries --------------------------------------------------------------


def wald_summary(estimates, cov, level: float = 0.95, names=None) -> pd.DataFrame:
    """Normal-reference Wald table: estimate, SE, CI bounds and two-sided p-value."""
    if not 0 < level < 1:
        raise SpecError(f"confidence level must lie in (0, 1), got {level}")
    est = np.atleast_1d(np.asarray(estimates, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if cov.shape != (est.size, est.size):
        raise SpecError(f"covariance shape {cov.shape} does not match {est.size} estimates")
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    z = stats.norm.ppf(0.5 + level / 2)
    with np.errstate(divide="ignore", invalid="ignore"):
        stat = np.where(se > 0, est / np.where(se > 0, se, 1.0), np.where(est == 0, 0.0, np.inf))
    pval = 2 * stats.norm.sf(np.abs(stat))
    return pd.DataFrame({"estimate": est, "se": se, "ci_low": est - z * se, "ci_high": est + z * se,
                         "p_value": pval},
                        index=pd.Index(list(names) if names is not None else range(est.size), name="term"))
