"""Exception types shared across the toolkit."""


class FvdpError(Exception):
    """Base class for all toolkit errors."""


class InvalidStateError(FvdpError):
    """A state vector contains nonfinite components."""


class ConfigError(FvdpError):
    """An integrator or run configuration violates its invariants."""


class NoBranchError(FvdpError):
    """Requested a stable branch of the critical manifold where none exists."""


class IntegrationError(FvdpError):
    """Base for failures inside an integration run.

    The partially computed trajectory, when available, is attached as
    ``trajectory``.
    """

    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory


class StepBudgetError(IntegrationError):
    """The configured maximum number of steps was exhausted."""


class StepUnderflowError(IntegrationError):
    """Adaptive step size collapsed below the representable floor."""


class EventRefinementError(IntegrationError):
    """An event root could not be refined to tolerance.

    ``bracket`` holds the last bracketing time interval.
    """

    def __init__(self, message, bracket, trajectory=None):
        super().__init__(message, trajectory)
        self.bracket = bracket


class TangencyError(FvdpError):
    """A section crossing was too close to tangential to orient."""


class ReturnMapError(FvdpError):
    """A return-map transit failed; partial transit data is attached."""

    def __init__(self, message, record=None, trajectory=None):
        super().__init__(message)
        self.record = record
        self.trajectory = trajectory


class NondeterministicFoldError(FvdpError):
    """The hybrid slow flow reached a folded singularity and no canard
    policy was supplied, so the continuation is not determined."""


class ConvergenceError(FvdpError):
    """An iterative measurement failed to settle within its budget."""
