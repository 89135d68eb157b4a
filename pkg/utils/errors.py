"""
Exception hierarchy shared by every stage of the registration toolkit.

All errors derive from FmrError so the command-line runner can map them to
exit codes in one place. Value and shape problems are also ValueErrors, file
problems are OSErrors and numerical breakdowns are ArithmeticErrors.
"""


class FmrError(Exception):
    """Base class for all toolkit errors."""


# =============================================================================
# GEOMETRY
# =============================================================================
class AngleNearPi(FmrError, ArithmeticError):
    """Rotation angle too close to pi for an unambiguous logarithm."""


class DegenerateExtent(FmrError, ValueError):
    """All points coincide, so the cloud has no extent to normalize."""


class EmptyResult(FmrError, ValueError):
    """An operation removed every point of a cloud."""


class DegenerateCloud(FmrError, ValueError):
    """Cloud cannot be registered (single point or zero extent)."""


class DegenerateConfiguration(FmrError, ValueError):
    """Corresponding point sets are collinear or coincident."""


# =============================================================================
# FILE FORMATS
# =============================================================================
class IoError(FmrError, OSError):
    """Reading or writing a file failed."""


class ParseError(FmrError, ValueError):
    """Malformed line in a point cloud file (line numbers are 1-based)."""

    def __init__(self, line: int, reason: str, path: str = ''):
        self.line = line
        self.reason = reason
        self.path = path
        location = f'{path}:{line}' if path else f'line {line}'
        super().__init__(f'{location}: {reason}')


class UnsupportedElement(FmrError, ValueError):
    """PLY header declares something this reader does not handle."""


class BadMagic(FmrError, ValueError):
    """Checkpoint does not start with the expected magic bytes."""


class VersionMismatch(FmrError, ValueError):
    """Checkpoint written by an incompatible format version."""


class ChecksumMismatch(FmrError, ValueError):
    """Checkpoint CRC does not match its contents (corrupt or truncated)."""


# =============================================================================
# NETWORK / TRAINING
# =============================================================================
class ShapeMismatch(FmrError, ValueError):
    """Array shapes disagree with a layer or parameter set."""


class ModeMismatch(FmrError, ValueError):
    """Loss terms do not match the training mode."""


class NonFiniteLoss(FmrError, ArithmeticError):
    """Training produced a NaN or infinite loss."""

    def __init__(self, step: int, value: float):
        self.step = step
        self.value = value
        super().__init__(f'non-finite loss {value!r} at step {step}')


# =============================================================================
# SOLVER
# =============================================================================
class SingularNormalEquations(FmrError, ArithmeticError):
    """Gauss-Newton normal equations stayed singular after damping escalation."""


class ConfigError(FmrError, ValueError):
    """Configuration document is invalid or has the wrong version."""


class InvalidArgs(FmrError, ValueError):
    """Command-line arguments are out of range or inconsistent."""
