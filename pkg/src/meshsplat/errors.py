"""Exception types shared across the package."""

from __future__ import annotations


class MeshsplatError(Exception):
    """Base class for all package-specific errors."""


class DegenerateTriangle(MeshsplatError):
    """Triangle area too small to define a local frame."""


class BehindCamera(MeshsplatError):
    """Point lies behind the camera near plane."""


class JointCountMismatch(MeshsplatError):
    """Pose joint count does not match the mesh skeleton."""


class DimensionMismatch(MeshsplatError):
    """Images or tensors have incompatible shapes."""


class ImageTooSmall(MeshsplatError):
    """Image is too small for the requested windowed operation."""


class TooFewGaussians(MeshsplatError):
    """Not enough Gaussians for the requested neighborhood size."""


class MissingTerm(MeshsplatError):
    """A loss term required by the current stage was not supplied."""


class NonFiniteGradient(MeshsplatError):
    """A gradient contained NaN or Inf; the optimizer step was aborted."""


class StepOutOfRange(MeshsplatError):
    """Schedule queried outside [0, total_steps]."""


class UnsupportedSubdivision(MeshsplatError):
    """Subdivision level is not one of the supported values."""


class MissingSilhouettes(MeshsplatError):
    """Stage 3 requires a silhouette mask for every training frame."""


class InvalidSpec(MeshsplatError):
    """Scene specification failed validation."""


class ConfigError(MeshsplatError):
    """Configuration file is malformed or contains unknown keys."""


class CheckpointError(MeshsplatError):
    """Checkpoint file is corrupt or has an unsupported version."""
