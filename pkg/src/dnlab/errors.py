"""Exception hierarchy shared by all dnlab modules."""


class DNLabError(Exception):
    """Base class for every error raised by dnlab."""


class GeometryError(DNLabError, ValueError):
    """Invalid or inconsistent mesh geometry."""


class StructuralError(GeometryError):
    """Non-manifold gluing or broken boundary loop structure."""


class TransversalityError(GeometryError):
    """A nested family whose normal speed vanishes somewhere."""


class MetricError(DNLabError, ValueError):
    """A metric tensor that is not symmetric positive definite."""


class DimensionError(DNLabError, ValueError):
    """Array sizes do not match the loop or operator they refer to."""


class DomainError(DNLabError, ValueError):
    """Argument outside the domain of an operation (loops, regions, li)."""


class SolverError(DNLabError, RuntimeError):
    """Singular or failed linear solve."""


class ConfigurationError(DNLabError, ValueError):
    """Run parameters violate a precondition of the requested experiment."""


class StepSizeError(DNLabError, RuntimeError):
    """Explicit time stepping blew up."""

    def __init__(self, message, suggested_dt):
        super().__init__(message)
        self.suggested_dt = suggested_dt


class StagnationError(DNLabError, RuntimeError):
    """A Runge step produced no residual decrease for any tested scaling."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


class ConformalPerturbationError(DNLabError, ValueError):
    """A 2D conformal perturbation direction, whose DN difference vanishes."""

    def __init__(self, message, norm):
        super().__init__(message)
        self.norm = norm


class FitError(DNLabError, ValueError):
    """Data too degenerate for the requested fit."""


class ManifestError(DNLabError, ValueError):
    """A run manifest that is missing, unreadable or malformed."""
