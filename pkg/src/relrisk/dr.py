"""Doubly robust estimation of the target coefficients.

Solves ``mean[omega(V) (A - e(V)) (H(alpha) - p0(V))] = 0`` where ``e`` and
``p0`` are plug-ins from the propensity and nuisance fits and ``H`` is the
exposure-removed outcome. The root is consistent when either plug-in model
is correct. ``omega`` is the target design row (naive weights) or the
efficient weighting function evaluated at the plug-in fits.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .design import Dataset, DesignMatrix, build_design
from .exceptions import ConvergenceError, PositivityError, SingularityError, SpecError
from .linkmap import Measure, h_transform
from .mle import NuisanceFit, OutcomeModelSpec
from .propensity import PropensityFit

PROB_FLOOR = 1e-6


class WeightKind(str, enum.Enum):
    NAIVE = "naive"
    EFFICIENT = "efficient"

    @classmethod
    def coerce(cls, value) -> "WeightKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise SpecError(f"unknown weight kind {value!r}") from None


def efficient_weights(p0, p1, e, w_matrix, measure) -> np.ndarray:
    """Efficient weighting function, one row per observation.

    The conditional expectations over the exposure are expanded with weights
    ``(1 - e, e)``:

    * RR: ``W / (e (1 - p0)) * e r1 / ((1 - e) r0 + e r1)`` with ``r = p / (1 - p)``
    * RD: ``W (1 - rho^2) / ((1 - e) p1 (1 - p1) + e p0 (1 - p0))``

    Inputs must lie strictly inside (0, 1); they are then floored at 1e-6
    away from the boundary.
    """
    measure = Measure.coerce(measure)
    W = w_matrix.values if isinstance(w_matrix, DesignMatrix) else np.asarray(w_matrix, dtype=float)
    arrs = [np.asarray(x, dtype=float) for x in (p0, p1, e)]
    for label, x in zip(("p0", "p1", "e"), arrs):
        if not np.all((x > 0) & (x < 1)):
            raise PositivityError(f"{label} outside (0, 1); the positivity assumption "
                                  "e(V), p0(V) in (sigma, 1 - sigma) is violated")
    p0, p1, e = (np.clip(x, PROB_FLOOR, 1 - PROB_FLOOR) for x in arrs)
    q0, q1 = 1 - p0, 1 - p1
    if measure is Measure.RR:
        r0, r1 = p0 / q0, p1 / q1
        factor = r1 / (q0 * ((1 - e) * r0 + e * r1))
    else:
        factor = (q1 + p0) * (q0 + p1) / ((1 - e) * p1 * q1 + e * p0 * q0)
    return factor[:, None] * W


class _Equation:
    """Per-row estimating function with the weights and plug-ins frozen."""

    def __init__(self, W, y, a, e, p0, omega, measure):
        self.W, self.y, self.a, self.e, self.p0 = W, y, a, e, p0
        self.omega = omega
        self.measure = Measure.coerce(measure)

    def rows(self, alpha, p0=None, e=None):
        p0 = self.p0 if p0 is None else p0
        e = self.e if e is None else e
        h = h_transform(self.y, self.a, self.W @ alpha, self.measure)
        return self.omega * ((self.a - e) * (h - p0))[:, None]

    def mean(self, alpha):
        return self.rows(alpha).mean(axis=0)

    def jacobian(self, alpha):
        """Mean derivative of the rows with respect to ``alpha`` (analytic)."""
        theta = self.W @ alpha
        if self.measure is Measure.RR:
            dh = -self.a * self.y * np.exp(-self.a * theta)
        else:
            dh = -self.a * (1.0 - np.tanh(theta) ** 2)
        return (self.omega * ((self.a - self.e) * dh)[:, None]).T @ self.W / self.W.shape[0]


@dataclass
class DrFit:
    alpha: np.ndarray
    weight_kind: WeightKind
    weights: np.ndarray
    nuisance: NuisanceFit
    propensity: PropensityFit
    converged: bool
    iterations: int
    equation_norm: float
    spec: OutcomeModelSpec
    w_names: list[str]

    @property
    def names(self) -> list[str]:
        return [f"alpha:{c}" for c in self.w_names]

    def to_dict(self) -> dict:
        return {
            "estimator": "dr",
            "weight_kind": self.weight_kind.value,
            "spec": self.spec.to_dict(),
            "coefficients": dict(zip(self.names, self.alpha.tolist())),
            "plugins": {
                "nuisance": self.nuisance.to_dict(),
                "propensity": self.propensity.to_dict(),
            },
            "converged": self.converged,
            "iterations": self.iterations,
            "equation_norm": self.equation_norm,
        }


def _equation(data: Dataset, spec: OutcomeModelSpec, nuisance: NuisanceFit,
              prop: PropensityFit, weights) -> _Equation:
    W = build_design(data, spec.w).values
    if weights.shape != W.shape:
        raise SpecError(f"weights have shape {weights.shape}, expected {W.shape}")
    if nuisance.p0.shape[0] != data.n or prop.fitted_e.shape[0] != data.n:
        raise SpecError("plug-in fits were computed on a different dataset")
    return _Equation(W, data.y, data.a, prop.fitted_e, nuisance.p0, weights, spec.measure)


def make_weights(data: Dataset, spec: OutcomeModelSpec, nuisance: NuisanceFit,
                 prop: PropensityFit, weight_kind) -> np.ndarray:
    W = build_design(data, spec.w).values
    if WeightKind.coerce(weight_kind) is WeightKind.NAIVE:
        return W.copy()
    p0 = np.clip(nuisance.p0, PROB_FLOOR, 1 - PROB_FLOOR)
    p1 = np.clip(nuisance.p1, PROB_FLOOR, 1 - PROB_FLOOR)
    e = np.clip(prop.fitted_e, PROB_FLOOR, 1 - PROB_FLOOR)
    return efficient_weights(p0, p1, e, W, spec.measure)


def estimating_function(alpha, nuisance: NuisanceFit, prop: PropensityFit, weights,
                        data: Dataset, spec: OutcomeModelSpec) -> np.ndarray:
    """Empirical mean of the estimating function at ``alpha``."""
    eq = _equation(data, spec, nuisance, prop, np.asarray(weights, dtype=float))
    alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
    if alpha.size != eq.W.shape[1]:
        raise SpecError(f"alpha has {alpha.size} entries, target design has {eq.W.shape[1]}")
    return eq.mean(alpha)


def solve_dr(data: Dataset, spec: OutcomeModelSpec, nuisance: NuisanceFit, prop: PropensityFit,
             weight_kind=WeightKind.EFFICIENT, *, start=None, weights=None,
             max_iter: int = 100, tol: float = 1e-8) -> DrFit:
    """Newton's method on the estimating equation, started at the MLE.

    Steps are halved until the Euclidean norm of the equation decreases.
    Efficient weights are evaluated once at the plug-in fits and held fixed.
    """
    kind = WeightKind.coerce(weight_kind)
    if weights is None:
        weights = make_weights(data, spec, nuisance, prop, kind)
    eq = _equation(data, spec, nuisance, prop, weights)
    alpha = np.array(nuisance.alpha if start is None else start, dtype=float)
    f = eq.mean(alpha)
    fn = np.linalg.norm(f)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        if np.max(np.abs(f)) < tol:
            converged, it = True, it - 1
            break
        J = eq.jacobian(alpha)
        try:
            if np.linalg.cond(J) > 1e12:
                raise np.linalg.LinAlgError
            step = np.linalg.solve(J, -f)
        except np.linalg.LinAlgError:
            raise SingularityError("singular Jacobian of the estimating equation; try naive "
                                   "weights or check the target design") from None
        t = 1.0
        for _ in range(50):
            cand = alpha + t * step
            f_new = eq.mean(cand)
            fn_new = np.linalg.norm(f_new)
            if np.isfinite(fn_new) and fn_new < fn:
                break
            t *= 0.5
        else:
            break
        alpha, f, fn = cand, f_new, fn_new
    norm = float(np.max(np.abs(f)))
    if not converged and norm < tol:
        converged = True
    if converged:
        # one extra full step: quadratic convergence pins the root well below tol
        try:
            cand = alpha + np.linalg.solve(eq.jacobian(alpha), -f)
            f_new = eq.mean(cand)
            if np.linalg.norm(f_new) < fn:
                alpha, norm = cand, float(np.max(np.abs(f_new)))
        except np.linalg.LinAlgError:
            pass
    if not converged:
        raise ConvergenceError(f"doubly robust equation did not converge (norm {norm:.3g})", alpha, norm)
    return DrFit(alpha=alpha, weight_kind=kind, weights=weights, nuisance=nuisance,
                 propensity=prop, converged=True, iterations=it, equation_norm=norm,
                 spec=spec, w_names=spec.w.column_names)
