# errors.py
"""Exception types raised by the simulation engine and the harness."""


class CuttingSimError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(CuttingSimError, ValueError):
    """Invalid or inconsistent configuration."""


class ParameterDomainError(CuttingSimError, ValueError):
    """A physical parameter lies outside its admissible domain."""


class InternalInvariantError(CuttingSimError, RuntimeError):
    """An internal precondition was violated (a bug, not a user error)."""


class InvertedElementError(CuttingSimError, ArithmeticError):
    """A deformation gradient with det(F) <= 0 reached the constitutive model."""


class OutOfDomainError(CuttingSimError, RuntimeError):
    def __init__(self, message: str, particle_index: int | None = None):
        super().__init__(message)
        self.particle_index = particle_index


class NumericalDivergenceError(CuttingSimError, RuntimeError):
    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class DegenerateObjectError(CuttingSimError, ValueError):
    """Object has zero extent along an axis the caller depends on."""


class PlanningError(CuttingSimError, ValueError):
    """A trajectory cannot be planned for the requested task."""


class UnsupportedStyleError(CuttingSimError, ValueError):
    """Style transfer was asked to restyle a non-Normal trajectory."""


class FitError(CuttingSimError, ValueError):
    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class NoSafeVelocityError(CuttingSimError, ValueError):
    """Even the slowest velocity in range exceeds the force limit."""


class UnderspecifiedInstructionError(CuttingSimError, ValueError):
    """Neither cut style nor cut state was given."""


class InstructionParseError(CuttingSimError, ValueError):
    def __init__(self, message: str, span: tuple[int, int] = (0, 0)):
        super().__init__(message)
        self.span = span


class CoverageError(CuttingSimError, LookupError):
    """No instruction template applies to a specification."""
