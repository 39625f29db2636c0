"""Exception types shared across the package."""


class KlRegressionError(Exception):
    """Base class for estimation failures raised by this package."""


class SingularCovarianceError(KlRegressionError):
    """A covariate covariance is singular or too ill-conditioned to invert."""


class IllPosedError(KlRegressionError):
    """The scaling matrix is too ill-conditioned to identify the coefficient.

    Raised by the closed-form fit when the environments are not diverse
    enough; carries the observed condition number.
    """

    def __init__(self, message, cond=None):
        super().__init__(message)
        self.cond = cond


class ConvergenceError(KlRegressionError):
    """An iterative solver hit its iteration cap before reaching tolerance."""

    def __init__(self, message, kkt_residual=None, n_iter=None):
        super().__init__(message)
        self.kkt_residual = kkt_residual
        self.n_iter = n_iter


class IngestionError(KlRegressionError):
    """A data directory or CSV file failed validation during ingestion."""


class EmptyRankingError(KlRegressionError):
    """Every target failed, so there are no edges to rank."""
