"""Exception types shared across the package."""


class PillarSegError(Exception):
    """Base class for all package errors."""


class FormatError(PillarSegError):
    """Malformed binary or text input data."""


class ConfigError(PillarSegError):
    """Invalid configuration value or combination."""


class ShapeError(PillarSegError):
    """Tensor shape mismatch."""


class DivergenceError(PillarSegError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")


class VerificationError(PillarSegError):
    """A verification check (gradient check, oracle) failed."""
