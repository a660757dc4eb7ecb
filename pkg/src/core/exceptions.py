"""
Exception hierarchy for the calibration toolkit.

Two branches map onto CLI exit codes:
- ValidationFailure (exit 2): bad inputs, configs, files or too little data
- NumericalFailure (exit 3): solvers that ran but could not produce an answer
"""

from typing import Optional


class CalibrationError(Exception):
    """Base class for all toolkit errors."""
    exit_code = 1


# ============================================
# Validation failures (exit code 2)
# ============================================

class ValidationFailure(CalibrationError):
    """Inputs are malformed, inconsistent or insufficient."""
    exit_code = 2


class ConfigError(ValidationFailure):
    """Configuration file failed validation."""


class SchemaError(ValidationFailure):
    """A stage artifact does not match its expected schema."""

    def __init__(self, message: str, path: Optional[str] = None):
        self.path = path
        if path:
            message = f"{message} (at {path})"
        super().__init__(message)


class CountMismatch(ValidationFailure):
    """Two scenes or matrices disagree on their microphone count."""


class SignalTooShort(ValidationFailure):
    """Signal is shorter than one analysis frame."""


class InvalidSignal(ValidationFailure):
    """Waveform cannot be used for synthesis (too short, wrong shape)."""


class ZeroEnergyFrame(ValidationFailure):
    """A frame handed to GCC-PHAT is identically zero."""


class MatrixTooSmall(ValidationFailure):
    """Matrix is too small for the requested rank test or factorization."""


class InsufficientData(ValidationFailure):
    """Not enough observed rows/columns to sample a minimal problem."""


class InsufficientEquations(ValidationFailure):
    """Linear upgrade system has fewer than nine usable equations."""


class InsufficientCandidates(ValidationFailure):
    """Fewer than three consistent detections for mirror estimation."""


# ============================================
# Numerical failures (exit code 3)
# ============================================

class NumericalFailure(CalibrationError):
    """A solver ran but could not produce a trustworthy answer."""
    exit_code = 3


class NoConsensus(NumericalFailure):
    """RANSAC best consensus is below the acceptance count."""


class IndefiniteH(NumericalFailure):
    """Upgrade matrix H is not positive definite (wrong offsets or inliers)."""


class Diverged(NumericalFailure):
    """Iterative refinement kept failing to decrease its objective."""


class DegenerateInstance(NumericalFailure):
    """Minimal problem instance has a rank-deficient Jacobian at a root."""


class DegenerateConfiguration(NumericalFailure):
    """Point set is collinear (or otherwise degenerate) for the operation."""


class DegenerateMirrorPair(NumericalFailure):
    """Direct and mirrored points coincide, no bisector plane exists."""


class DegenerateGeometry(NumericalFailure):
    """Mirror branches cannot be told apart from the supporting sources."""


class RankDeficient(NumericalFailure):
    """Matrix has numerical rank below three (planar or linear layout)."""


class NoIntersection(NumericalFailure):
    """Three spheres do not intersect within tolerance."""


class AmbiguousMirror(NumericalFailure):
    """All trilateration supports are coplanar; both branches fit equally."""


class NoTracks(NumericalFailure):
    """No tracks were produced for a channel pair."""


class NoEvents(NumericalFailure):
    """No frame has enough observed pairs to form a matching vector."""
