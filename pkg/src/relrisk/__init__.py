"""Regression for relative risks and risk differences of a binary exposure.

The target (log RR or arctanh RD) is modelled separately from a baseline
nuisance (log odds product, or a linear baseline risk). Estimators: maximum
likelihood and doubly robust estimating equations with naive or efficient
weights.
"""

__version__ = "0.1.0"

from .design import Dataset, DesignMatrix, DesignSpec, build_design, load_csv, load_covariates
from .dr import DrFit, WeightKind, efficient_weights, estimating_function, make_weights, solve_dr
from .estimators import Estimate, Estimator, EstimatorKind
from .exceptions import (ConvergenceError, DataError, DomainError, PositivityError, RelRiskError,
                         SingularityError, SpecError)
from .linkmap import Measure, emit_curves, forward, h_transform, inverse, inverse_partials
from .mle import NuisanceFit, NuisanceForm, OutcomeModelSpec, fit_mle, predict
from .propensity import PropensityFit, fit_propensity, predict_e
from .simulation import (SimDesign, StudyResult, corrupt_design, generate, run_study, logop_design,
                         linear_baseline_design)
from .variance import (BootstrapResult, InfluenceDecomposition, bootstrap, efficient_sandwich,
                       fisher_variance, sandwich_dr, wald_summary)

__all__ = [k for k, v in dict(globals()).items()
           if not k.startswith("_") and not isinstance(v, type(__import__("sys")))]
