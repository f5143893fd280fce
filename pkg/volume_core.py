#!/usr/bin/env python3
"""
Volume Core
===========

Dense 3D volumes with physical spacing and origin, the voxel/world coordinate
maps, trilinear sampling and image gradients. Every intensity, atlas
probability and posterior in the suite is sampled through this module.

Arrays are indexed ``[x, y, z]``; flattening uses Fortran order so that the
flat layout is x-fastest, matching the on-disk voxel payload.

Author: MvMM Segmentation Team
Version: 1.0.0
"""

from dataclasses import dataclass, field
from functools import cached_property
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from mvmm_errors import InvalidParameterError

# Distinguished marker for samples outside a lattice hull.
OUTSIDE = float("nan")

# Hull membership tolerance, in voxel index units.
HULL_TOLERANCE = 1e-9

Triple = Tuple[float, float, float]


def is_outside(value) -> Union[bool, np.ndarray]:
    """True where a sample carries the OUTSIDE marker."""
    return np.isnan(value)


@dataclass(frozen=True)
class Lattice:
    """Voxel lattice geometry: dims, spacing (mm) and origin (mm) of voxel (0,0,0)."""

    dims: Tuple[int, int, int]
    spacing: Triple
    origin: Triple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
            raise InvalidParameterError("dims, spacing and origin must have three entries")
        if any(d < 1 for d in dims):
            raise InvalidParameterError(f"dims must be positive, got {dims}")
        if any(not s > 0 for s in spacing):
            raise InvalidParameterError(f"spacing must be positive, got {spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def n_voxels(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def extent(self) -> np.ndarray:
        """Distance in mm between the first and last voxel centers per axis."""
        return (np.asarray(self.dims) - 1) * np.asarray(self.spacing)

    def voxel_to_world(self, index) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(index, dtype=float) * np.asarray(self.spacing)

    def world_to_voxel(self, point) -> np.ndarray:
        return (np.asarray(point, dtype=float) - np.asarray(self.origin)) / np.asarray(self.spacing)

    def hull(self) -> Tuple[np.ndarray, np.ndarray]:
        """World-space corners of the hull spanned by the voxel centers."""
        lo = np.asarray(self.origin, dtype=float)
        return lo, lo + self.extent

    def contains(self, points) -> np.ndarray:
        """Hull membership of world points (any leading shape, last axis 3)."""
        idx = self.world_to_voxel(points)
        upper = np.asarray(self.dims) - 1
        return np.all((idx >= -HULL_TOLERANCE) & (idx <= upper + HULL_TOLERANCE), axis=-1)

    @cached_property
    def index_points(self) -> np.ndarray:
        """All voxel indices as an (N, 3) integer array in x-fastest order."""
        grids = np.meshgrid(*(np.arange(d) for d in self.dims), indexing="ij")
        return np.stack([g.ravel(order="F") for g in grids], axis=1)

    @cached_property
    def world_points(self) -> np.ndarray:
        """World coordinates of all voxel centers, (N, 3), x-fastest order."""
        return self.voxel_to_world(self.index_points)

    def unravel(self, flat_index: int) -> Tuple[int, int, int]:
        return tuple(int(v) for v in np.unravel_index(int(flat_index), self.dims, order="F"))

    def to_volume(self, flat_values) -> np.ndarray:
        """Reshape an x-fastest flat array onto this lattice."""
        return np.asarray(flat_values).reshape(self.dims, order="F")

    def with_values(self, values) -> "VoxelGrid":
        return VoxelGrid(self.dims, self.spacing, self.origin, values)


@dataclass
class VoxelGrid:
    """Dense scalar volume on a lattice. ``values`` is stored as float64 ``[x, y, z]``."""

    dims: Tuple[int, int, int]
    spacing: Triple
    origin: Triple
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        lattice = Lattice(self.dims, self.spacing, self.origin)
        self.dims, self.spacing, self.origin = lattice.dims, lattice.spacing, lattice.origin
        values = np.asarray(self.values, dtype=np.float64)
        if values.size != lattice.n_voxels:
            raise InvalidParameterError(
                f"values length {values.size} does not match dims {lattice.dims}"
            )
        if values.shape != lattice.dims:
            values = values.reshape(lattice.dims, order="F")
        self.values = values

    @property
    def lattice(self) -> Lattice:
        return Lattice(self.dims, self.spacing, self.origin)

    def flat_values(self) -> np.ndarray:
        """Voxel values in x-fastest order."""
        return self.values.ravel(order="F")

    def copy(self, values: Optional[np.ndarray] = None) -> "VoxelGrid":
        return VoxelGrid(self.dims, self.spacing, self.origin,
                         self.values.copy() if values is None else values)


@dataclass
class LabelVolume:
    """Integer label map on a lattice; -1 marks voxels without a label."""

    lattice: Lattice
    labels: np.ndarray = field(repr=False)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.size != self.lattice.n_voxels:
            raise InvalidParameterError(
                f"label array of size {labels.size} does not fit dims {self.lattice.dims}"
            )
        if labels.shape != self.lattice.dims:
            labels = labels.reshape(self.lattice.dims, order="F")
        if labels.dtype.kind == "f":
            if not np.all(labels == np.round(labels)):
                raise InvalidParameterError("label volumes must hold integer values")
        self.labels = labels.astype(np.int64)

    def mask(self, k: int) -> np.ndarray:
        return self.labels == k

    def present_labels(self) -> List[int]:
        return [int(k) for k in np.unique(self.labels) if k >= 0]

    def as_grid(self) -> VoxelGrid:
        return self.lattice.with_values(self.labels.astype(np.float64))


@dataclass
class MultivariateImageSet:
    """Ordered co-acquired images of one subject plus the common space they are fused on."""

    images: List[VoxelGrid]
    common_space: Lattice
    names: List[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.images) < 1:
            raise InvalidParameterError("a multivariate image set needs at least one image")
        if not self.names:
            self.names = [f"image{i}" for i in range(len(self.images))]
        if len(self.names) != len(self.images):
            raise InvalidParameterError("one name per image is required")

    @property
    def n_images(self) -> int:
        return len(self.images)

    def subset(self, indices: Sequence[int]) -> "MultivariateImageSet":
        """Image set restricted to ``indices`` on the same common space."""
        return MultivariateImageSet([self.images[i] for i in indices], self.common_space,
                                    [self.names[i] for i in indices])


def voxel_to_world(grid: Union[VoxelGrid, Lattice], index) -> np.ndarray:
    """Map (continuous) voxel indices to world coordinates in mm."""
    lattice = grid.lattice if isinstance(grid, VoxelGrid) else grid
    return lattice.voxel_to_world(index)


def world_to_voxel(grid: Union[VoxelGrid, Lattice], point) -> np.ndarray:
    """Map world coordinates in mm to continuous voxel indices."""
    lattice = grid.lattice if isinstance(grid, VoxelGrid) else grid
    return lattice.world_to_voxel(point)


def trilinear_sample(grid: VoxelGrid, points):
    """
    Trilinear interpolation of ``grid`` at world points.

    Args:
        grid: Volume to sample
        points: A single point (3,) or an array of points (N, 3), in mm

    Returns:
        A float (or an (N,) array) holding the interpolated values, with
        OUTSIDE wherever the point falls outside the voxel-center hull
    """
    pts = np.asarray(points, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    lattice = grid.lattice
    idx = lattice.world_to_voxel(pts)
    inside = lattice.contains(pts)
    out = np.full(len(pts), OUTSIDE)
    if np.any(inside):
        coords = idx[inside].T
        out[inside] = ndimage.map_coordinates(grid.values, coords, order=1,
                                              mode="nearest", prefilter=False)
    return float(out[0]) if single else out


def sample_with_gradient(grid: VoxelGrid, points) -> Tuple[np.ndarray, np.ndarray]:
    """
    Trilinear values and the exact spatial derivative of the interpolant.

    The derivative is taken inside the enclosing cell (one-sided on cell
    faces), in value/mm. Rows outside the hull are NaN.

    Args:
        grid: Volume to sample
        points: (N, 3) world points in mm

    Returns:
        Tuple of (values (N,), gradients (N, 3))
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    lattice = grid.lattice
    dims = np.asarray(lattice.dims)
    spacing = np.asarray(lattice.spacing)
    idx = lattice.world_to_voxel(pts)
    inside = lattice.contains(pts)
    idx = np.where(np.isfinite(idx), idx, 0.0)

    i0 = np.clip(np.floor(idx), 0, np.maximum(dims - 2, 0)).astype(np.int64)
    i1 = np.minimum(i0 + 1, dims - 1)
    frac = np.clip(idx - i0, 0.0, 1.0)
    frac[:, dims == 1] = 0.0

    weights = [(1.0 - frac[:, a], frac[:, a]) for a in range(3)]
    corners = [(i0[:, a], i1[:, a]) for a in range(3)]
    v = grid.values

    values = np.zeros(len(pts))
    grads = np.zeros((len(pts), 3))
    for a in (0, 1):
        for b in (0, 1):
            for c in (0, 1):
                corner = v[corners[0][a], corners[1][b], corners[2][c]]
                wx, wy, wz = weights[0][a], weights[1][b], weights[2][c]
                values += wx * wy * wz * corner
                sx, sy, sz = (2 * a - 1), (2 * b - 1), (2 * c - 1)
                grads[:, 0] += sx * wy * wz * corner
                grads[:, 1] += wx * sy * wz * corner
                grads[:, 2] += wx * wy * sz * corner
    # single-voxel axes have no extent to differentiate along
    grads[:, dims == 1] = 0.0
    grads /= spacing

    values[~inside] = np.nan
    grads[~inside] = np.nan
    return values, grads


def default_gradient_step(grid: VoxelGrid) -> float:
    return 0.5 * min(grid.spacing)


def image_gradient(grid: VoxelGrid, points, h: Optional[float] = None):
    """
    Central-difference image gradient in value/mm.

    Args:
        grid: Volume to differentiate
        points: A single point (3,) or points (N, 3)
        h: Difference step in mm (default half the smallest spacing)

    Returns:
        A 3-vector (or (N, 3) array) of gradients; OUTSIDE (NaN rows for
        arrays) when any offset point leaves the hull
    """
    pts = np.asarray(points, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    step = default_gradient_step(grid) if h is None else float(h)
    if not step > 0:
        raise InvalidParameterError(f"gradient step must be positive, got {step}")

    grads = np.empty((len(pts), 3))
    for axis in range(3):
        offset = np.zeros(3)
        offset[axis] = step
        forward = trilinear_sample(grid, pts + offset)
        backward = trilinear_sample(grid, pts - offset)
        grads[:, axis] = (forward - backward) / (2.0 * step)
    bad = np.any(np.isnan(grads), axis=1)
    grads[bad] = np.nan
    if single:
        return OUTSIDE if bad[0] else grads[0]
    return grads
