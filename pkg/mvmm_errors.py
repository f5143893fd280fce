#!/usr/bin/env python3
"""
MvMM Error Hierarchy
====================

Exceptions raised across the segmentation suite. Validation problems are
``ValueError`` subclasses, numerical breakdowns are ``ArithmeticError``
subclasses, and every class maps to a command-line exit status.

Author: MvMM Segmentation Team
Version: 1.0.0
"""

from typing import Optional, Sequence

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERICAL = 2
EXIT_PARTIAL = 3


class MvmmError(Exception):
    """Base class for all suite errors."""

    exit_code = EXIT_VALIDATION


class ConfigError(MvmmError, ValueError):
    """Malformed or unknown configuration entry."""

    def __init__(self, message: str, key: Optional[str] = None, path: Optional[str] = None):
        context = []
        if path:
            context.append(f"file {path}")
        if key:
            context.append(f"key '{key}'")
        if context:
            message = f"{message} ({', '.join(context)})"
        super().__init__(message)
        self.key = key
        self.path = path


class SpecError(ConfigError):
    """Invalid phantom specification."""


class InvalidParameterError(MvmmError, ValueError):
    """A numeric argument outside its admissible range."""


class ConfigurationLookupError(MvmmError, KeyError):
    """An (image, label) pair that the label configuration does not know."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unknown configuration entry"


class EvaluationError(MvmmError, ValueError):
    """Metric inputs that cannot be compared."""


class NumericalError(MvmmError, ArithmeticError):
    """Numerical breakdown during likelihood evaluation or optimization."""

    exit_code = EXIT_NUMERICAL


class VoxelNumericalError(NumericalError):
    """Numerical failure located at a specific voxel of the common space."""

    def __init__(self, message: str, voxel: Optional[Sequence[int]] = None,
                 world: Optional[Sequence[float]] = None, detail: str = ""):
        parts = [message]
        if voxel is not None:
            parts.append(f"voxel={tuple(int(v) for v in voxel)}")
        if world is not None:
            parts.append("world=(" + ", ".join(f"{w:.3f}" for w in world) + ") mm")
        if detail:
            parts.append(detail)
        super().__init__("; ".join(parts))
        self.voxel = voxel
        self.world = world


class DegeneratePriorError(VoxelNumericalError):
    """Spatial prior normalizer is zero at a voxel."""


class ZeroLikelihoodError(VoxelNumericalError):
    """Per-voxel likelihood vanished, so its logarithm is undefined."""


class ZeroResponsibilityError(VoxelNumericalError):
    """E-step found no label with positive responsibility at a voxel."""


class DegenerateAtlasError(NumericalError):
    """An atlas label carries no probability mass where it is needed."""

    def __init__(self, message: str, label: Optional[int] = None):
        if label is not None:
            message = f"{message} (label {label})"
        super().__init__(message)
        self.label = label


class EmptyDomainError(NumericalError):
    """No voxel of the common space is covered by any image."""


class NonFiniteGradientError(NumericalError):
    """Gradient ascent received a NaN or infinite component."""

    def __init__(self, message: str, parameter: Optional[str] = None):
        if parameter is not None:
            message = f"{message} (parameter {parameter})"
        super().__init__(message)
        self.parameter = parameter
