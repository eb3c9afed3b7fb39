"""Exception hierarchy.

Every error raised on purpose by the package derives from :class:`RelRiskError`
and carries an ``exit_code`` used by the command-line front end.
"""


class RelRiskError(Exception):
    exit_code = 1
    category = "error"


class DataError(RelRiskError):
    """Input file could not be read or failed validation."""

    exit_code = 3
    category = "io"


class SpecError(RelRiskError, ValueError):
    """A model or design specification is inconsistent with the data."""

    exit_code = 4
    category = "spec"


class DomainError(RelRiskError, ValueError):
    """A numeric argument is outside the domain of a map (e.g. a probability of 0 or 1)."""

    exit_code = 7
    category = "domain"


class PositivityError(DomainError):
    pass


class ConvergenceError(RelRiskError):
    """An iterative solver stopped without meeting its tolerance.

    Attributes
    ----------
    last_iterate : ndarray or None
        Parameter vector at the final iteration.
    norm : float
        Max-norm of the score or estimating equation at ``last_iterate``.
    """

    exit_code = 5
    category = "convergence"

    def __init__(self, message, last_iterate=None, norm=float("nan")):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.norm = norm


class SingularityError(RelRiskError):
    """A matrix that must be inverted is (numerically) singular."""

    exit_code = 6
    category = "singularity"
