#!/usr/bin/env python3
"""
Transformation Types
====================

Per-slice in-plane transforms of each image, the cubic B-spline free-form
deformation of the atlas, and the optional global atlas affine. z is the
slice axis of every image; slice transforms act in world coordinates within
the slice plane and never change z.

Author: MvMM Segmentation Team
Version: 1.0.0
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np

from mvmm_errors import InvalidParameterError
from volume_core import HULL_TOLERANCE, Lattice

DEFAULT_FFD_SPACING_MM = 20.0


class SliceTransformMode(Enum):
    """Parametrization of a slice's in-plane transform."""
    RIGID = "rigid"
    AFFINE = "affine"

    @property
    def parameter_names(self) -> Tuple[str, ...]:
        if self is SliceTransformMode.RIGID:
            return ("tx", "ty", "theta")
        return ("tx", "ty", "m00", "m01", "m10", "m11")

    @property
    def n_params(self) -> int:
        return len(self.parameter_names)

    @property
    def angular(self) -> np.ndarray:
        """Mask of parameters measured in radians rather than mm."""
        return np.array([name == "theta" for name in self.parameter_names])


@dataclass
class SliceAffineSet:
    """In-plane transform parameters for every slice of every image."""

    lattices: List[Lattice]
    params: List[np.ndarray]
    mode: SliceTransformMode = SliceTransformMode.RIGID

    def __post_init__(self):
        if len(self.lattices) != len(self.params):
            raise InvalidParameterError("one parameter table per image is required")
        for i, (lattice, table) in enumerate(zip(self.lattices, self.params)):
            expected = (lattice.dims[2], self.mode.n_params)
            if np.shape(table) != expected:
                raise InvalidParameterError(
                    f"image {i}: slice parameter table has shape {np.shape(table)}, expected {expected}"
                )
        self.params = [np.asarray(p, dtype=float) for p in self.params]

    @classmethod
    def identity(cls, lattices: Sequence[Lattice],
                 mode: SliceTransformMode = SliceTransformMode.RIGID) -> "SliceAffineSet":
        return cls(list(lattices), [np.zeros((l.dims[2], mode.n_params)) for l in lattices], mode)

    @property
    def n_images(self) -> int:
        return len(self.lattices)

    def n_slices(self, i: int) -> int:
        return self.lattices[i].dims[2]

    def copy(self) -> "SliceAffineSet":
        return SliceAffineSet(list(self.lattices), [p.copy() for p in self.params], self.mode)

    def with_slice(self, i: int, s: int, values: np.ndarray) -> "SliceAffineSet":
        updated = self.copy()
        updated.params[i][s] = values
        return updated

    def slice_center(self, i: int) -> np.ndarray:
        """In-plane (x, y) center of image ``i``'s slices, in mm."""
        lattice = self.lattices[i]
        return np.asarray(lattice.origin[:2]) + 0.5 * lattice.extent[:2]

    def slice_of(self, i: int, points) -> Tuple[np.ndarray, np.ndarray]:
        """
        Nearest slice of image ``i`` for each world point.

        Returns:
            Tuple of (slice index per point, mask of points within the
            image's z-extent); ties between two planes go to the upper slice
        """
        lattice = self.lattices[i]
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        kz = (pts[:, 2] - lattice.origin[2]) / lattice.spacing[2]
        within = (kz >= -HULL_TOLERANCE) & (kz <= lattice.dims[2] - 1 + HULL_TOLERANCE)
        slices = np.clip(np.floor(kz + 0.5), 0, lattice.dims[2] - 1).astype(np.int64)
        return slices, within

    def matrices(self, i: int) -> Tuple[np.ndarray, np.ndarray]:
        """Per-slice 2x2 linear parts and in-plane translations of image ``i``."""
        table = self.params[i]
        translation = table[:, :2]
        if self.mode is SliceTransformMode.RIGID:
            cos, sin = np.cos(table[:, 2]), np.sin(table[:, 2])
            linear = np.stack([np.stack([cos, -sin], axis=-1),
                               np.stack([sin, cos], axis=-1)], axis=-2)
        else:
            linear = np.eye(2) + table[:, 2:].reshape(-1, 2, 2)
        return linear, translation

    def parameter_jacobian(self, i: int, points, slices: np.ndarray) -> np.ndarray:
        """
        Derivative of the transformed in-plane position w.r.t. each parameter.

        Returns:
            Array (N, n_params, 2)
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        rel = pts[:, :2] - self.slice_center(i)
        n = len(pts)
        jac = np.zeros((n, self.mode.n_params, 2))
        jac[:, 0, 0] = 1.0
        jac[:, 1, 1] = 1.0
        if self.mode is SliceTransformMode.RIGID:
            theta = self.params[i][slices, 2]
            cos, sin = np.cos(theta), np.sin(theta)
            jac[:, 2, 0] = -sin * rel[:, 0] - cos * rel[:, 1]
            jac[:, 2, 1] = cos * rel[:, 0] - sin * rel[:, 1]
        else:
            jac[:, 2, 0] = rel[:, 0]
            jac[:, 3, 0] = rel[:, 1]
            jac[:, 4, 1] = rel[:, 0]
            jac[:, 5, 1] = rel[:, 1]
        return jac


def apply_slice_transform(G: SliceAffineSet, i: int, x, inverse: bool = False) -> np.ndarray:
    """
    Map common-space points through the slice transform of image ``i``.

    Args:
        G: Slice transform set
        i: Image index
        x: A point (3,) or points (N, 3) in mm
        inverse: Apply the inverse of each slice's transform instead

    Returns:
        Transformed points with the input's shape; points beyond the image's
        z-extent are returned unchanged
    """
    pts = np.asarray(x, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    slices, within = G.slice_of(i, pts)
    linear, translation = G.matrices(i)
    center = G.slice_center(i)

    out = pts.copy()
    if np.any(within):
        rel = pts[within, :2] - center
        A = linear[slices[within]]
        t = translation[slices[within]]
        if inverse:
            moved = np.einsum("nab,nb->na", np.linalg.inv(A), rel - t)
        else:
            moved = np.einsum("nab,nb->na", A, rel) + t
        out[within, :2] = center + moved
    return out[0] if single else out


def cubic_bspline_weights(t: np.ndarray) -> np.ndarray:
    """Uniform cubic B-spline basis values at local coordinate ``t`` in [0, 1), shape (..., 4)."""
    t = np.asarray(t, dtype=float)
    t2, t3 = t * t, t * t * t
    return np.stack([
        (1.0 - t) ** 3 / 6.0,
        (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
        (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
        t3 / 6.0,
    ], axis=-1)


@dataclass
class FfdDeformation:
    """Cubic B-spline free-form deformation with a 3-vector displacement per control point."""

    dims: Tuple[int, int, int]
    spacing: Tuple[float, float, float]
    origin: Tuple[float, float, float]
    phi: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        lattice = Lattice(self.dims, self.spacing, self.origin)
        self.dims, self.spacing, self.origin = lattice.dims, lattice.spacing, lattice.origin
        if self.phi is None:
            self.phi = np.zeros(self.dims + (3,))
        self.phi = np.asarray(self.phi, dtype=float)
        if self.phi.shape != self.dims + (3,):
            raise InvalidParameterError(
                f"control displacements have shape {self.phi.shape}, expected {self.dims + (3,)}"
            )

    @classmethod
    def covering(cls, lattice: Lattice,
                 spacing_mm: float = DEFAULT_FFD_SPACING_MM) -> "FfdDeformation":
        """Control lattice whose full 4x4x4 support covers every voxel of ``lattice``."""
        if not spacing_mm > 0:
            raise InvalidParameterError(f"control spacing must be positive, got {spacing_mm}")
        counts = np.floor(lattice.extent / spacing_mm).astype(int) + 4
        origin = np.asarray(lattice.origin) - spacing_mm
        return cls(tuple(int(c) for c in counts), (spacing_mm,) * 3, tuple(origin))

    @property
    def control_lattice(self) -> Lattice:
        return Lattice(self.dims, self.spacing, self.origin)

    @property
    def n_control_points(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    def copy(self, phi: Optional[np.ndarray] = None) -> "FfdDeformation":
        return FfdDeformation(self.dims, self.spacing, self.origin,
                              self.phi.copy() if phi is None else phi)

    def is_identity(self) -> bool:
        return not np.any(self.phi)

    def support(self, points) -> Tuple[np.ndarray, np.ndarray]:
        """
        First control index and per-axis basis weights for each point.

        Returns:
            Tuple of (indices (N, 3) of the lowest supporting control point,
            weights (N, 3, 4))
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        u = (pts - np.asarray(self.origin)) / np.asarray(self.spacing)
        base = np.floor(u)
        weights = cubic_bspline_weights(u - base)
        return base.astype(np.int64) - 1, weights

    def _terms(self, points):
        """Yield (flat control index, valid mask, tensor weight) for the 64 supporting controls."""
        first, weights = self.support(points)
        dims = np.asarray(self.dims)
        for a in range(4):
            for b in range(4):
                for c in range(4):
                    idx = first + np.array([a, b, c])
                    valid = np.all((idx >= 0) & (idx < dims), axis=1)
                    flat = np.where(valid, idx[:, 0] + dims[0] * (idx[:, 1] + dims[1] * idx[:, 2]), 0)
                    w = weights[:, 0, a] * weights[:, 1, b] * weights[:, 2, c]
                    yield flat, valid, np.where(valid, w, 0.0)

    def displacement(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        flat_phi = self.phi.reshape(-1, 3, order="F")
        disp = np.zeros((len(pts), 3))
        if self.is_identity():
            return disp
        for flat, _, w in self._terms(pts):
            disp += w[:, None] * flat_phi[flat]
        return disp

    def basis_sum(self, points) -> np.ndarray:
        """Sum of all control weights at each point (1 inside the full support)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        total = np.zeros(len(pts))
        for _, _, w in self._terms(pts):
            total += w
        return total

    def accumulate(self, points, vectors) -> np.ndarray:
        """
        Scatter per-point 3-vectors onto control points with their B-spline weights.

        Returns:
            Array shaped like ``phi``: sum over points of B(x; d) * vector(x)
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        vec = np.asarray(vectors, dtype=float)
        n_ctrl = self.n_control_points
        out = np.zeros((n_ctrl, 3))
        for flat, _, w in self._terms(pts):
            for axis in range(3):
                out[:, axis] += np.bincount(flat, weights=w * vec[:, axis], minlength=n_ctrl)
        return out.reshape(self.dims + (3,), order="F")


def apply_ffd(D: FfdDeformation, x) -> np.ndarray:
    """Deform point(s) ``x``: x + sum_d B(x; d) phi_d."""
    pts = np.asarray(x, dtype=float)
    single = pts.ndim == 1
    out = np.atleast_2d(pts) + D.displacement(pts)
    return out[0] if single else out


@dataclass
class AtlasAffine:
    """Global 3D affine applied to the atlas after the FFD, as a displacement from identity."""

    center: Tuple[float, float, float]
    params: np.ndarray = field(default_factory=lambda: np.zeros(12))

    PARAMETER_NAMES = ("tx", "ty", "tz") + tuple(f"m{a}{b}" for a in range(3) for b in range(3))

    def __post_init__(self):
        self.center = tuple(float(c) for c in self.center)
        self.params = np.asarray(self.params, dtype=float).reshape(12)

    @classmethod
    def centered_on(cls, lattice: Lattice) -> "AtlasAffine":
        lo, hi = lattice.hull()
        return cls(tuple(0.5 * (lo + hi)))

    @property
    def translation(self) -> np.ndarray:
        return self.params[:3]

    @property
    def linear(self) -> np.ndarray:
        return np.eye(3) + self.params[3:].reshape(3, 3)

    def is_identity(self) -> bool:
        return not np.any(self.params)

    def copy(self, params: Optional[np.ndarray] = None) -> "AtlasAffine":
        return AtlasAffine(self.center, self.params.copy() if params is None else params)

    def apply(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if self.is_identity():
            return pts.copy()
        c = np.asarray(self.center)
        return c + (pts - c) @ self.linear.T + self.translation

    def parameter_jacobian(self, points) -> np.ndarray:
        """Derivative of the mapped point w.r.t. each parameter, shape (N, 12, 3)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        rel = pts - np.asarray(self.center)
        jac = np.zeros((len(pts), 12, 3))
        for a in range(3):
            jac[:, a, a] = 1.0
            for b in range(3):
                jac[:, 3 + 3 * a + b, a] = rel[:, b]
        return jac


@dataclass
class TransformState:
    """All registration parameters: slice transforms, atlas FFD and atlas affine."""

    slices: SliceAffineSet
    ffd: FfdDeformation
    atlas_affine: AtlasAffine

    @classmethod
    def identity(cls, image_lattices: Sequence[Lattice], common_space: Lattice,
                 mode: SliceTransformMode = SliceTransformMode.RIGID,
                 ffd_spacing_mm: float = DEFAULT_FFD_SPACING_MM) -> "TransformState":
        return cls(SliceAffineSet.identity(image_lattices, mode),
                   FfdDeformation.covering(common_space, ffd_spacing_mm),
                   AtlasAffine.centered_on(common_space))

    def copy(self) -> "TransformState":
        return TransformState(self.slices.copy(), self.ffd.copy(), self.atlas_affine.copy())

    def replace(self, slices: Optional[SliceAffineSet] = None, ffd: Optional[FfdDeformation] = None,
                atlas_affine: Optional[AtlasAffine] = None) -> "TransformState":
        return TransformState(slices if slices is not None else self.slices,
                              ffd if ffd is not None else self.ffd,
                              atlas_affine if atlas_affine is not None else self.atlas_affine)

    def image_points(self, i: int, points) -> np.ndarray:
        """Sampling positions G_{i,s}(x) in image ``i``."""
        return apply_slice_transform(self.slices, i, points)

    def atlas_points(self, points) -> np.ndarray:
        """Atlas sampling positions: the affine applied to D(x)."""
        return self.atlas_affine.apply(apply_ffd(self.ffd, points))
