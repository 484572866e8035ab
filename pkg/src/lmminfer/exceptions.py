"""Exception hierarchy shared across the package.

The split mirrors how failures are reported downstream (and by the CLI):
structural problems are caught before any numerics run, degeneracy and
rank problems surface from linear algebra, and numeric errors cover
non-convergence of iterative schemes.
"""


class LmmError(Exception):
    """Base class for all package-specific errors."""


class StructuralError(LmmError):
    """Malformed input: shapes, labels, missing values, bad configuration."""


class DegenerateCovarianceError(LmmError):
    """A covariance matrix required to be positive definite is not."""


class RankError(LmmError):
    """A design or contrast matrix does not have the required rank."""


class NumericError(LmmError):
    """An iterative or series computation failed to reach its tolerance."""


class NothingToDoError(LmmError):
    """A requested follow-up action has no work to perform."""
