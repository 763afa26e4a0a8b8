"""Exception hierarchy shared across the package."""


class VeniBotError(Exception):
    """Base class for all package errors."""


class ParameterError(VeniBotError, ValueError):
    """An argument or configuration value is out of its valid range."""


class FitError(VeniBotError):
    """A component could not be fitted with an ellipse / principal axes."""


class DegenerateOrientationError(FitError):
    """Component is too isotropic for a meaningful orientation."""


class GenerationError(VeniBotError):
    """Synthetic data generation gave up after its retry budget."""


class GraphError(VeniBotError):
    """Model graph construction or evaluation failed (usually shapes)."""


class StateError(VeniBotError):
    """An operation was called in the wrong lifecycle state."""


class ConfigError(VeniBotError, ValueError):
    """Configuration file or architecture config is invalid."""


class DataError(VeniBotError):
    """Input data is missing, corrupt or otherwise unusable."""


class WorkspaceError(VeniBotError):
    """A planned robot pose violates the gantry workspace limits."""

    def __init__(self, axis, value, lo, hi):
        self.axis = axis
        self.value = value
        super().__init__(f"{axis}={value:.6g} outside workspace [{lo:.6g}, {hi:.6g}]")
