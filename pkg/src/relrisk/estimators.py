"""One entry point for the four estimators, with their default variances.

``mle`` returns ``(alpha, beta)`` with inverse-information covariance. The
doubly robust variants return ``alpha`` with the sandwich covariance:

* ``drw``: efficient weights;
* ``dru``: naive weights ``omega(V) = W``;
* ``dr-p0``: naive weights with a linear baseline-risk plug-in.
"""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .design import Dataset, DesignSpec
from .dr import DrFit, WeightKind, solve_dr
from .exceptions import SpecError
from .mle import NuisanceFit, NuisanceForm, OutcomeModelSpec, fit_mle
from .propensity import PropensityFit, fit_propensity
from .variance import InfluenceDecomposition, fisher_variance, sandwich_dr, wald_summary


class EstimatorKind(str, enum.Enum):
    MLE = "mle"
    DRW = "drw"
    DRU = "dru"
    DR_P0 = "dr-p0"

    @classmethod
    def coerce(cls, value) -> "EstimatorKind":
        if isinstance(value, cls):
            return value
        key = str(value).lower().replace("_", "-")
        try:
            return cls({"dr": "drw", "dr.un": "dru", "dr.p0": "dr-p0"}.get(key, key))
        except ValueError:
            raise SpecError(f"unknown estimator {value!r}") from None

    @property
    def is_dr(self) -> bool:
        return self is not EstimatorKind.MLE


@dataclass
class Estimate:
    kind: EstimatorKind
    estimates: np.ndarray
    names: list[str]
    cov: np.ndarray
    nuisance: NuisanceFit
    propensity: PropensityFit | None = None
    dr: DrFit | None = None
    influence: InfluenceDecomposition | None = None

    @property
    def alpha(self) -> np.ndarray:
        return self.dr.alpha if self.dr is not None else self.nuisance.alpha

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))

    def summary(self, level: float = 0.95) -> pd.DataFrame:
        return wald_summary(self.estimates, self.cov, level, self.names)

    def to_dict(self) -> dict:
        out = (self.dr or self.nuisance).to_dict()
        out["estimator"] = self.kind.value
        return out


@dataclass(frozen=True)
class Estimator:
    """Estimator descriptor; calling it on a Dataset returns the point estimates."""

    kind: EstimatorKind
    spec: OutcomeModelSpec
    x: DesignSpec | None = None

    def __post_init__(self):
        kind = EstimatorKind.coerce(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind.is_dr and self.x is None:
            raise SpecError(f"estimator {kind.value} needs a propensity (X) design")
        if kind is EstimatorKind.DR_P0 and self.spec.nuisance is not NuisanceForm.LINEAR_P0:
            object.__setattr__(self, "spec", dataclasses.replace(self.spec, nuisance=NuisanceForm.LINEAR_P0))

    @property
    def weight_kind(self) -> WeightKind | None:
        if not self.kind.is_dr:
            return None
        return WeightKind.EFFICIENT if self.kind is EstimatorKind.DRW else WeightKind.NAIVE

    def fit(self, data: Dataset, *, nuisance: NuisanceFit | None = None,
            propensity: PropensityFit | None = None, variance: bool = True) -> Estimate:
        """Fit on ``data``; pre-computed plug-in fits on the same data may be passed in."""
        nuis = nuisance if nuisance is not None else fit_mle(data, self.spec)
        if not self.kind.is_dr:
            cov = fisher_variance(nuis) if variance else np.full((nuis.params.size,) * 2, np.nan)
            return Estimate(self.kind, nuis.params, nuis.names, cov, nuis)
        prop = propensity if propensity is not None else fit_propensity(data, self.x)
        dr = solve_dr(data, self.spec, nuis, prop, self.weight_kind)
        infl = sandwich_dr(dr, data) if variance else None
        cov = infl.cov_alpha if infl is not None else np.full((dr.alpha.size,) * 2, np.nan)
        return Estimate(self.kind, dr.alpha, dr.names, cov, nuis, prop, dr, infl)

    def __call__(self, data: Dataset) -> np.ndarray:
        return self.fit(data, variance=False).estimates

    def names(self) -> list[str]:
        w = [f"alpha:{c}" for c in self.spec.w.column_names]
        if self.kind.is_dr:
            return w
        return w + [f"beta:{c}" for c in self.spec.z.column_names]
