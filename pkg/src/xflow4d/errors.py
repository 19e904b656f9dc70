"""Exception types shared across the toolkit."""


class XFlowError(Exception):
    """Base class for every toolkit error."""


class ConfigError(XFlowError):
    """Invalid, missing, or unknown configuration key.

    The offending key path is kept in `key` so callers (and the CLI)
    can report it without parsing the message.
    """

    def __init__(self, key, message):
        self.key = key
        super().__init__(f"config key '{key}': {message}")


class OutOfDomainError(XFlowError):
    """A physical point lies outside the domain box or time span."""


class GeometryError(XFlowError):
    """Impossible initial geometry (overlapping or out-of-bounds droplets)."""


class StepSizeError(XFlowError):
    """The configured time step violates the CFL bound."""


class SolverError(XFlowError):
    """Iterative solver failed to converge; carries the final residual."""

    def __init__(self, message, residual=None):
        self.residual = residual
        super().__init__(message)


class PoisonedModelError(XFlowError):
    """Non-finite value detected in model parameters."""


class TapeStateError(XFlowError):
    """backward() called without a matching cached forward pass."""


class UsageError(XFlowError):
    """API misuse: empty batch, mismatched lengths, missing model, etc."""


class ResidualError(XFlowError):
    """Non-finite PDE residual; carries the indices of the offending points."""

    def __init__(self, message, flagged):
        self.flagged = list(flagged)
        super().__init__(message)


class DegenerateInputError(XFlowError):
    """Metric input with zero dynamic range or otherwise unusable content."""


class TrainingAbortError(XFlowError):
    """Training gave up after repeated rejected (non-finite) steps."""
