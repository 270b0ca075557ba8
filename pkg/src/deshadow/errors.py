"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """A caller broke a documented precondition (CLI exit code 1)."""


class ConfigError(ValueError):
    """Invalid configuration, e.g. a weight file whose shapes do not match."""


class NoShadowRegion(Exception):
    """Raised when an operation needs shadow pixels and the mask has none.

    Callers are expected to catch this and skip the color-shift
    regularizer for the offending patch.
    """


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss or similar)."""


class GradCheckError(RuntimeError):
    """Finite-difference checking hit a non-finite evaluation."""
