"""Exception hierarchy shared across the package."""


class Sgee2Error(Exception):
    """Base class for all package errors."""


class DomainError(Sgee2Error, ValueError):
    """Input outside the mathematical domain of a function."""


class ShapeError(Sgee2Error, ValueError):
    """Nonconforming array dimensions."""


class SingularityError(Sgee2Error):
    """Correlation parameter at or beyond the positive-definiteness boundary."""

    def __init__(self, rho: float, n: int, msg: str | None = None):
        self.rho = rho
        self.n = n
        super().__init__(msg or f"equicorrelation rho={rho} is singular for size n={n}")


class NumericalOverflowError(Sgee2Error):
    """Nonfinite linear predictor or derived quantity."""


class SeparationError(Sgee2Error):
    """Degenerate binary data (no within-arm variation), fit cannot proceed."""


class PositivityError(Sgee2Error):
    """Fitted observation probabilities below the positivity floor."""

    def __init__(self, cluster_id, subjects, floor: float):
        self.cluster_id = cluster_id
        self.subjects = list(subjects)
        self.floor = floor
        super().__init__(
            f"cluster {cluster_id}: fitted observation probability below {floor} "
            f"for subjects {self.subjects}"
        )


class InfeasibleCorrelationError(Sgee2Error):
    """Joint observation probability violates the Frechet bounds."""


class FeasibilityError(Sgee2Error):
    """Mean/correlation combination outside the support of the beta-mixture generator."""


class DivergenceError(Sgee2Error):
    """Fisher scoring diverged (nonfinite update or ill-conditioned Hessian)."""

    def __init__(self, stage: str, reason: str, condition: float | None = None):
        self.stage = stage
        self.reason = reason
        self.condition = condition
        super().__init__(f"{stage}: {reason}")


class SamplingError(Sgee2Error, ValueError):
    """Invalid subsample request."""


class InferenceError(Sgee2Error):
    """Sandwich variance could not be formed."""

    def __init__(self, msg: str, condition: float | None = None):
        self.condition = condition
        super().__init__(msg)


class AccuracyError(Sgee2Error):
    """Numerical integration failed to reach the requested accuracy."""

    def __init__(self, msg: str, achieved=None):
        self.achieved = achieved
        super().__init__(msg)


class ConfigError(Sgee2Error, ValueError):
    """Invalid run configuration."""


class ParseError(Sgee2Error, ValueError):
    """Malformed input data file."""

    def __init__(self, msg: str, row: int | None = None):
        self.row = row
        super().__init__(msg if row is None else f"row {row}: {msg}")


class AggregateChainFailure(Sgee2Error):
    """Every parallel stochastic chain diverged."""

    def __init__(self, reasons):
        self.reasons = list(reasons)
        super().__init__(f"all {len(self.reasons)} chains diverged: {self.reasons}")
