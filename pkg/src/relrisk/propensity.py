"""Logistic propensity-score model ``e(V) = expit(gamma' X)``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit

from .design import Dataset, DesignMatrix, DesignSpec, build_design
from .exceptions import ConvergenceError, SpecError

SEPARATION_BOUND = 50.0
_ONE_MINUS = np.nextafter(1.0, 0.0)


def _expit(eta):
    # keep probabilities strictly inside (0, 1) even where expit rounds to 1
    return np.clip(expit(eta), np.finfo(float).tiny, _ONE_MINUS)


@dataclass
class PropensityFit:
    gamma: np.ndarray
    fitted_e: np.ndarray
    converged: bool
    iterations: int
    spec: DesignSpec
    x_names: list[str]
    information: np.ndarray  # X' diag(e(1-e)) X, summed over rows
    balance_norm: float = np.nan

    def to_dict(self) -> dict:
        return {
            "gamma": dict(zip(self.x_names, self.gamma.tolist())),
            "design": self.spec.to_dict(),
            "converged": self.converged,
            "iterations": self.iterations,
            "balance_norm": self.balance_norm,
        }


def predict_e(gamma, x_matrix: DesignMatrix | np.ndarray) -> np.ndarray:
    """Fitted exposure probabilities ``expit(X gamma)``."""
    X = x_matrix.values if isinstance(x_matrix, DesignMatrix) else np.asarray(x_matrix, dtype=float)
    gamma = np.atleast_1d(np.asarray(gamma, dtype=float))
    if X.ndim != 2 or X.shape[1] != gamma.size:
        raise SpecError(f"design has {X.shape[-1]} columns but gamma has {gamma.size} entries")
    return _expit(X @ gamma)


def _loglik(X, a, gamma):
    eta = X @ gamma
    return float(np.sum(a * log_expit(eta) + (1 - a) * log_expit(-eta)))


def fit_propensity(data: Dataset, x_design: DesignSpec, *, max_iter: int = 100,
                   tol: float = 1e-8) -> PropensityFit:
    """Solve the logistic score equation ``mean[X (A - e)] = 0`` by IRLS.

    Steps are halved until the log-likelihood does not decrease. Raises
    :class:`ConvergenceError` if any coefficient exceeds 50 in absolute value
    (quasi-complete separation) or the iteration limit is hit.
    """
    a = data.a
    if data.n == 0 or a.min() == a.max():
        raise SpecError("propensity model needs both exposed and unexposed rows")
    X = build_design(data, x_design).values
    n, k = X.shape
    gamma = np.zeros(k)
    ll = _loglik(X, a, gamma)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        e = _expit(X @ gamma)
        g = X.T @ (a - e)
        if np.max(np.abs(g)) / n < tol:
            converged, it = True, it - 1
            break
        info = (X * (e * (1 - e))[:, None]).T @ X
        try:
            step = np.linalg.solve(info, g)
        except np.linalg.LinAlgError:
            raise ConvergenceError("singular propensity information; check the X design", gamma) from None
        t = 1.0
        for _ in range(40):
            cand = gamma + t * step
            ll_new = _loglik(X, a, cand)
            if ll_new >= ll:
                break
            t *= 0.5
        gamma, ll = cand, ll_new
        if np.max(np.abs(gamma)) > SEPARATION_BOUND:
            raise ConvergenceError("propensity coefficients diverge (|gamma| > 50): "
                                   "likely complete separation", gamma,
                                   float(np.max(np.abs(g)) / n))
    e = _expit(X @ gamma)
    bal = float(np.max(np.abs(X.T @ (a - e))) / n)
    if not converged:
        if bal < tol:
            converged = True
        else:
            raise ConvergenceError(f"propensity fit did not converge (balance {bal:.3g})", gamma, bal)
    # one full Newton step past the tolerance, kept only if balance improves
    info = (X * (e * (1 - e))[:, None]).T @ X
    try:
        cand = gamma + np.linalg.solve(info, X.T @ (a - e))
        e_new = _expit(X @ cand)
        bal_new = float(np.max(np.abs(X.T @ (a - e_new))) / n)
        if bal_new < bal:
            gamma, e, bal = cand, e_new, bal_new
    except np.linalg.LinAlgError:
        pass
    info = (X * (e * (1 - e))[:, None]).T @ X
    return PropensityFit(gamma=gamma, fitted_e=e, converged=converged, iterations=it,
                         spec=x_design, x_names=x_design.column_names, information=info,
                         balance_norm=bal)
