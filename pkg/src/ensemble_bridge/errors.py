"""Exception taxonomy shared across the package."""


class BridgeError(Exception):
    """Base class for all numerical failures raised by this package."""


class ConfigError(BridgeError):
    """Malformed or inconsistent run configuration."""


class NotSPDError(BridgeError):
    """A matrix required to be symmetric positive definite is not."""


class ControllabilityError(BridgeError):
    """The averaged-input Gramian is numerically singular on the requested window."""


class HorizonSingularError(BridgeError):
    """A controller was evaluated at or beyond the horizon, where the Gramian tail vanishes."""


class ConvergenceError(BridgeError):
    """Iterative solver hit its iteration cap before reaching tolerance."""

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class SupportMismatchError(BridgeError):
    """The kernel cannot carry mass between the two marginal supports."""


class PosteriorSupportError(BridgeError):
    """The terminal-state posterior has no mass on the target grid."""
