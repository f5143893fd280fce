#!/usr/bin/env python3
"""
Phantoms and Segmentation Metrics
=================================

Multi-sequence synthetic phantoms with exactly known labels (concentric
body / myocardium shell / blood pool with a scar blob inside the shell),
probabilistic atlas construction, corruption injection (slice shifts,
random atlas deformation, coverage truncation), and the Dice and average
contour distance metrics used to score segmentations against them.

Author: MvMM Segmentation Team
Version: 1.0.0
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from mvmm_errors import EvaluationError, InvalidParameterError, SpecError
from mvmm_model import AtlasPrior, LabelConfig
from transforms import DEFAULT_FFD_SPACING_MM, FfdDeformation, apply_ffd
from volume_core import (
    LabelVolume,
    Lattice,
    MultivariateImageSet,
    VoxelGrid,
    trilinear_sample,
)

logger = logging.getLogger(__name__)

# Tissue codes; several tissues may share one label.
AIR, BODY, MYOCARDIUM, SCAR, BLOOD = range(5)
TISSUES = ("air", "body", "myocardium", "scar", "blood")
TISSUE_LABEL = np.array([0, 0, 1, 1, 2])
PHANTOM_LABELS = (0, 1, 2)

DEFAULT_INTENSITIES: Dict[str, Dict[str, Tuple[float, float]]] = {
    "bssfp": {"air": (10.0, 6.0), "body": (80.0, 6.0), "myocardium": (50.0, 6.0),
              "scar": (50.0, 6.0), "blood": (200.0, 6.0)},
    "lge": {"air": (10.0, 6.0), "body": (60.0, 6.0), "myocardium": (30.0, 6.0),
            "scar": (170.0, 6.0), "blood": (170.0, 6.0)},
    "t2": {"air": (10.0, 6.0), "body": (70.0, 6.0), "myocardium": (110.0, 6.0),
           "scar": (160.0, 6.0), "blood": (40.0, 6.0)},
}
DEFAULT_SLICE_SPACING = {"bssfp": 10.0, "lge": 5.0, "t2": 15.0}
NOISY_LGE_STD = 15.0

# Stream offsets of the per-purpose random generators.
NOISE_STREAM = 1
SHIFT_STREAM = 101
FFD_STREAM = 201
TRUNCATION_STREAM = 301


def stream_rng(seed: int, stream: int) -> np.random.Generator:
    """Counter-based generator for one purpose; independent of call order."""
    return np.random.Generator(np.random.Philox(
        np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream),))))


@dataclass
class SequenceSpec:
    """One simulated acquisition: slice geometry, field of view and contrast table."""

    name: str
    slice_spacing_mm: float
    in_plane_mm: float = 2.0
    margin_mm: float = 8.0
    intensities: Dict[str, Tuple[float, float]] = field(default_factory=dict)
    truncate_mm: float = 0.0

    def __post_init__(self):
        if not self.slice_spacing_mm > 0 or not self.in_plane_mm > 0:
            raise SpecError("slice and in-plane spacing must be positive", key=self.name)
        if self.margin_mm < 0 or self.truncate_mm < 0:
            raise SpecError("margin and truncation must be >= 0", key=self.name)
        if not self.intensities:
            self.intensities = dict(DEFAULT_INTENSITIES.get(self.name, {}))
        for tissue in TISSUES:
            if tissue not in self.intensities:
                raise SpecError(f"intensity table has no entry for '{tissue}'",
                                key=f"{self.name}.{tissue}")
            mean, std = self.intensities[tissue]
            if not np.isfinite(mean) or not std >= 0:
                raise SpecError("intensity mean must be finite and stddev >= 0",
                                key=f"{self.name}.{tissue}")
        unknown = set(self.intensities) - set(TISSUES)
        if unknown:
            raise SpecError(f"unknown tissue '{sorted(unknown)[0]}'", key=self.name)


def default_sequences() -> List[SequenceSpec]:
    return [SequenceSpec(name, DEFAULT_SLICE_SPACING[name]) for name in ("bssfp", "lge", "t2")]


def renoised(seq: SequenceSpec, std: float) -> SequenceSpec:
    """Copy of ``seq`` with every tissue standard deviation set to ``std``."""
    return replace(seq, intensities={t: (mean, std) for t, (mean, _) in seq.intensities.items()})


def noisy_sequences(lge_std: float = NOISY_LGE_STD) -> List[SequenceSpec]:
    """Default sequences with a noisy LGE; alone it leaves myocardium and body overlapping."""
    return [renoised(seq, lge_std) if seq.name == "lge" else seq for seq in default_sequences()]


@dataclass
class PhantomSpec:
    """
    Geometry, contrast and corruption settings of a synthetic phantom.

    Radii are ellipsoid semi-axes in mm about the lattice center; the scar
    is a sphere intersected with the myocardium shell.
    """

    dims: Tuple[int, int, int] = (40, 40, 24)
    spacing: Tuple[float, float, float] = (2.0, 2.0, 2.5)
    origin: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    body_radii: Tuple[float, float, float] = (34.0, 30.0, 40.0)
    shell_outer_radii: Tuple[float, float, float] = (20.0, 18.0, 22.0)
    shell_inner_radii: Tuple[float, float, float] = (12.0, 11.0, 14.0)
    scar_offset: Tuple[float, float, float] = (16.0, 0.0, 0.0)
    scar_radius: float = 6.0
    sequences: List[SequenceSpec] = field(default_factory=default_sequences)
    shift_fraction: float = 0.0
    shift_sigma_mm: float = 2.0
    ffd_sigma_mm: float = 0.0
    ffd_spacing_mm: float = DEFAULT_FFD_SPACING_MM
    atlas_sigma_mm: float = 4.0
    seed: int = 0

    def __post_init__(self):
        try:
            self.lattice
        except InvalidParameterError as exc:
            raise SpecError(str(exc), key="dims")
        body, outer, inner = (np.asarray(r, dtype=float) for r in
                              (self.body_radii, self.shell_outer_radii, self.shell_inner_radii))
        if np.any(inner <= 0) or np.any(outer <= inner) or np.any(body <= outer):
            raise SpecError("radii must satisfy 0 < inner < outer < body on every axis",
                            key="shell_outer_radii")
        if not self.scar_radius > 0:
            raise SpecError("must be positive", key="scar_radius")
        if _shell_tissue(np.asarray(self.scar_offset, dtype=float)[None, :], outer, inner)[0] != 1:
            raise SpecError("scar center must lie inside the myocardium shell", key="scar_offset")
        if not 0.0 <= self.shift_fraction <= 1.0:
            raise SpecError("must lie in [0, 1]", key="shift_fraction")
        for key in ("shift_sigma_mm", "ffd_sigma_mm"):
            if not getattr(self, key) >= 0:
                raise SpecError("must be >= 0", key=key)
        for key in ("ffd_spacing_mm", "atlas_sigma_mm"):
            if not getattr(self, key) > 0:
                raise SpecError("must be positive", key=key)
        if not self.sequences:
            raise SpecError("at least one sequence is required", key="sequences")
        names = [seq.name for seq in self.sequences]
        if len(set(names)) != len(names):
            raise SpecError("sequence names must be unique", key="sequences")

    @property
    def lattice(self) -> Lattice:
        return Lattice(self.dims, self.spacing, self.origin)

    @property
    def center(self) -> np.ndarray:
        lo, hi = self.lattice.hull()
        return 0.5 * (lo + hi)

    def label_config(self) -> LabelConfig:
        """
        Two background components (air, body) and two myocardium components in every image.

        The second myocardium component holds scar where its contrast differs,
        and otherwise the partial-volume blend of the thin shell with its
        neighbours.
        """
        overrides = {}
        for i in range(len(self.sequences)):
            overrides[(i, 0)] = 2
            overrides[(i, 1)] = 2
        return LabelConfig.uniform(PHANTOM_LABELS, len(self.sequences), 1, overrides)


@dataclass
class TruncationRecord:
    axis: int
    end: str
    extent_mm: float
    removed: int


@dataclass
class PhantomTruth:
    """
    Ground truth of a generated phantom.

    ``shifts[i][s]`` is the in-plane content displacement (mm) applied to
    slice ``s`` of sequence ``i``; the slice transform that undoes it has
    those same translation parameters.
    """

    labels: LabelVolume
    tissues: LabelVolume
    atlas: AtlasPrior
    shifts: List[np.ndarray]
    ffd: Optional[FfdDeformation]
    truncations: Dict[str, TruncationRecord]
    names: List[str]


def _ellipsoid_radius(rel: np.ndarray, radii: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum((rel / radii) ** 2, axis=1))


def _shell_tissue(rel: np.ndarray, outer: np.ndarray, inner: np.ndarray) -> np.ndarray:
    """0 outside the shell, 1 in the shell, 2 inside the inner cavity."""
    outer_r = _ellipsoid_radius(rel, outer)
    inner_r = _ellipsoid_radius(rel, inner)
    out = np.zeros(len(rel), dtype=np.int64)
    out[outer_r <= 1.0] = 1
    out[inner_r <= 1.0] = 2
    return out


def tissue_at(spec: PhantomSpec, points: np.ndarray) -> np.ndarray:
    """Tissue code of every world point."""
    rel = np.atleast_2d(points) - spec.center
    tissue = np.full(len(rel), AIR, dtype=np.int64)
    tissue[_ellipsoid_radius(rel, np.asarray(spec.body_radii)) <= 1.0] = BODY
    shell = _shell_tissue(rel, np.asarray(spec.shell_outer_radii), np.asarray(spec.shell_inner_radii))
    tissue[shell == 1] = MYOCARDIUM
    tissue[shell == 2] = BLOOD
    in_scar = np.linalg.norm(rel - np.asarray(spec.scar_offset), axis=1) <= spec.scar_radius
    tissue[(shell == 1) & in_scar] = SCAR
    return tissue


def sequence_lattice(spec: PhantomSpec, seq: SequenceSpec) -> Lattice:
    """In-plane field of view of the common space plus a margin; slices centered over its z-extent."""
    lo, hi = spec.lattice.hull()
    extent = hi - lo
    dims, spacing, origin = [], [], []
    for axis in (0, 1):
        span = extent[axis] + 2.0 * seq.margin_mm
        n = int(np.ceil(span / seq.in_plane_mm - 1e-9)) + 1
        dims.append(n)
        spacing.append(seq.in_plane_mm)
        origin.append(lo[axis] + 0.5 * extent[axis] - 0.5 * (n - 1) * seq.in_plane_mm)
    n_slices = int(np.ceil(extent[2] / seq.slice_spacing_mm - 1e-9)) + 1
    dims.append(n_slices)
    spacing.append(seq.slice_spacing_mm)
    origin.append(lo[2] + 0.5 * extent[2] - 0.5 * (n_slices - 1) * seq.slice_spacing_mm)
    return Lattice(tuple(dims), tuple(spacing), tuple(origin))


def render_sequence(spec: PhantomSpec, seq: SequenceSpec, rng: np.random.Generator) -> VoxelGrid:
    lattice = sequence_lattice(spec, seq)
    tissue = tissue_at(spec, lattice.world_points)
    table = np.array([seq.intensities[name] for name in TISSUES])
    values = table[tissue, 0] + table[tissue, 1] * rng.standard_normal(len(tissue))
    return lattice.with_values(lattice.to_volume(values))


def generate_phantom(spec: PhantomSpec) -> Tuple[MultivariateImageSet, PhantomTruth]:
    """
    Render every sequence of ``spec`` with its noise and corruptions, plus the truth and atlas.

    Deterministic per seed: each purpose draws from its own counter-based stream.
    """
    lattice = spec.lattice
    tissue = tissue_at(spec, lattice.world_points)
    labels = LabelVolume(lattice, lattice.to_volume(TISSUE_LABEL[tissue]))
    tissues = LabelVolume(lattice, lattice.to_volume(tissue))

    images, shifts, truncations = [], [], {}
    for i, seq in enumerate(spec.sequences):
        grid = render_sequence(spec, seq, stream_rng(spec.seed, NOISE_STREAM + i))
        grid, applied = inject_slice_shifts(grid, spec.shift_fraction, spec.shift_sigma_mm,
                                            stream_rng(spec.seed, SHIFT_STREAM + i))
        if seq.truncate_mm > 0:
            grid, record = truncate_coverage(grid, seq.truncate_mm,
                                             stream_rng(spec.seed, TRUNCATION_STREAM + i))
            truncations[seq.name] = record
        images.append(grid)
        shifts.append(applied)

    atlas = make_probabilistic_atlas(labels, spec.atlas_sigma_mm, PHANTOM_LABELS)
    ffd = None
    if spec.ffd_sigma_mm > 0:
        rng = stream_rng(spec.seed, FFD_STREAM)
        ffd = random_ffd(lattice, spec.ffd_spacing_mm, spec.ffd_sigma_mm, rng)
        atlas = warp_atlas(atlas, ffd)

    names = [seq.name for seq in spec.sequences]
    logger.info("phantom: %d sequences, %d shifted slices, ffd=%s, seed=%d", len(images),
                sum(int(np.count_nonzero(np.any(s != 0, axis=1))) for s in shifts),
                ffd is not None, spec.seed)
    truth = PhantomTruth(labels, tissues, atlas, shifts, ffd, truncations, names)
    return MultivariateImageSet(images, lattice, names), truth


def make_probabilistic_atlas(labels: LabelVolume, sigma_mm: float,
                             label_ids: Optional[Sequence[int]] = None) -> AtlasPrior:
    """
    Blur each label indicator with an isotropic Gaussian and renormalize voxelwise.

    Args:
        labels: Label volume defining the atlas lattice
        sigma_mm: Gaussian standard deviation in mm (kernel radius 3 sigma)
        label_ids: Labels to build maps for (default: those present)

    Raises:
        InvalidParameterError: If ``sigma_mm`` is not positive
    """
    if not sigma_mm > 0:
        raise InvalidParameterError(f"atlas blur must be positive, got {sigma_mm}")
    ids = list(label_ids) if label_ids is not None else labels.present_labels()
    sigma_vox = [sigma_mm / s for s in labels.lattice.spacing]
    blurred = []
    for k in ids:
        indicator = (labels.labels == k).astype(float)
        if not indicator.any():
            logger.warning("atlas label %d is empty; its prior is zero everywhere", k)
        blurred.append(ndimage.gaussian_filter(indicator, sigma=sigma_vox, truncate=3.0,
                                               mode="nearest"))
    stack = np.stack(blurred, axis=-1)
    total = stack.sum(axis=-1, keepdims=True)
    stack = np.where(total > 0, stack / np.where(total > 0, total, 1.0), 1.0 / len(ids))
    return AtlasPrior([labels.lattice.with_values(stack[..., n]) for n in range(len(ids))],
                      tuple(ids))


def inject_slice_shifts(image: VoxelGrid, fraction: float = 0.2, sigma_mm: float = 2.0,
                        rng: Optional[np.random.Generator] = None,
                        explicit: Optional[Dict[int, Tuple[float, float]]] = None
                        ) -> Tuple[VoxelGrid, np.ndarray]:
    """
    Translate the content of a random subset of slices in-plane.

    Args:
        image: Image whose z axis is the slice axis
        fraction: Share of slices to shift
        sigma_mm: Standard deviation of each shift component
        rng: Random generator (seed 0 stream if None)
        explicit: Slice -> (dx, dy) shifts used instead of random draws

    Returns:
        Tuple of (shifted image, (n_slices, 2) content shifts in mm); slices
        with a zero shift are bit-identical to the input
    """
    n_slices = image.dims[2]
    shifts = np.zeros((n_slices, 2))
    if explicit is not None:
        for s, (dx, dy) in explicit.items():
            shifts[int(s)] = (dx, dy)
    elif fraction > 0 and sigma_mm > 0:
        rng = rng or stream_rng(0, SHIFT_STREAM)
        count = int(round(fraction * n_slices))
        chosen = np.sort(rng.choice(n_slices, size=count, replace=False))
        shifts[chosen] = rng.normal(0.0, sigma_mm, size=(count, 2))
    if not np.all(np.isfinite(shifts)):
        raise InvalidParameterError("slice shifts must be finite")

    values = image.values.copy()
    for s in np.flatnonzero(np.any(shifts != 0, axis=1)):
        values[:, :, s] = shift_slice(image.values[:, :, s], image.spacing[:2], shifts[s])
    return image.copy(values), shifts


def shift_slice(plane: np.ndarray, spacing: Sequence[float], shift_mm: Sequence[float]) -> np.ndarray:
    """Bilinear resampling of one slice so that its content moves by ``shift_mm``."""
    grid = np.meshgrid(np.arange(plane.shape[0], dtype=float),
                       np.arange(plane.shape[1], dtype=float), indexing="ij")
    coords = [grid[a] - shift_mm[a] / spacing[a] for a in (0, 1)]
    return ndimage.map_coordinates(plane, coords, order=1, mode="nearest", prefilter=False)


def random_ffd(lattice: Lattice, mesh_spacing_mm: float, sigma_mm: float,
               rng: np.random.Generator) -> FfdDeformation:
    ffd = FfdDeformation.covering(lattice, mesh_spacing_mm)
    return ffd.copy(phi=rng.normal(0.0, sigma_mm, size=ffd.phi.shape))


def warp_volume(volume: VoxelGrid, ffd: FfdDeformation) -> VoxelGrid:
    """Backward trilinear resampling ``V(D(x))``; points leaving the hull are clamped onto it."""
    lattice = volume.lattice
    lo, hi = lattice.hull()
    points = np.clip(apply_ffd(ffd, lattice.world_points), lo, hi)
    return volume.copy(lattice.to_volume(trilinear_sample(volume, points)))


def warp_atlas(atlas: AtlasPrior, ffd: FfdDeformation) -> AtlasPrior:
    maps = [warp_volume(grid, ffd) for grid in atlas.maps]
    stack = np.stack([grid.values for grid in maps], axis=-1)
    stack = np.clip(stack, 0.0, 1.0)
    stack /= stack.sum(axis=-1, keepdims=True)
    return AtlasPrior([grid.copy(stack[..., n]) for n, grid in enumerate(maps)], atlas.labels)


def inject_random_ffd(volume: VoxelGrid, mesh_spacing_mm: float = DEFAULT_FFD_SPACING_MM,
                      sigma_mm: float = 2.0, seed: int = 0) -> Tuple[VoxelGrid, FfdDeformation]:
    """
    Warp a volume by a random B-spline deformation.

    Control displacements are i.i.d. N(0, sigma^2) per component; the
    returned field reproduces the warp exactly through ``warp_volume``.

    Raises:
        InvalidParameterError: If ``sigma_mm`` is negative
    """
    if not sigma_mm >= 0:
        raise InvalidParameterError(f"deformation stddev must be >= 0, got {sigma_mm}")
    ffd = random_ffd(volume.lattice, mesh_spacing_mm, sigma_mm, stream_rng(seed, FFD_STREAM))
    if ffd.is_identity():
        return volume.copy(), ffd
    return warp_volume(volume, ffd), ffd


def truncate_coverage(image: VoxelGrid, extent_mm: float,
                      rng: Optional[np.random.Generator] = None, axis: Optional[int] = None,
                      end: Optional[str] = None) -> Tuple[VoxelGrid, TruncationRecord]:
    """
    Drop a slab of ``extent_mm`` from one end of one axis.

    The removed thickness is rounded to whole voxel planes. Axis and end are
    drawn from ``rng`` unless given.

    Raises:
        SpecError: If the extent is negative or not smaller than the image
            extent on every axis
    """
    extents = image.lattice.extent
    if extent_mm < 0 or np.any(extent_mm >= extents):
        raise SpecError(f"truncation of {extent_mm} mm does not fit image extents "
                        f"{tuple(float(e) for e in extents)}", key="truncate_mm")
    rng = rng or stream_rng(0, TRUNCATION_STREAM)
    if axis is None:
        axis = int(rng.integers(3))
    if end is None:
        end = ("low", "high")[int(rng.integers(2))]
    if end not in ("low", "high"):
        raise SpecError(f"unknown truncation end '{end}'", key="end")
    removed = int(round(extent_mm / image.spacing[axis]))
    if removed == 0:
        return image.copy(), TruncationRecord(axis, end, 0.0, 0)

    keep = [slice(None)] * 3
    origin = list(image.origin)
    if end == "low":
        keep[axis] = slice(removed, None)
        origin[axis] += removed * image.spacing[axis]
    else:
        keep[axis] = slice(None, image.dims[axis] - removed)
    values = image.values[tuple(keep)]
    record = TruncationRecord(axis, end, removed * image.spacing[axis], removed)
    return VoxelGrid(values.shape, image.spacing, tuple(origin), values), record


def _check_pair(seg: LabelVolume, truth: LabelVolume) -> None:
    if seg.lattice != truth.lattice:
        raise EvaluationError(f"segmentation lattice {seg.lattice} does not match "
                              f"truth lattice {truth.lattice}")


def dice(seg: LabelVolume, truth: LabelVolume, k: int) -> float:
    """Dice overlap of label ``k``; 1.0 when both volumes lack the label."""
    _check_pair(seg, truth)
    a, b = seg.labels == k, truth.labels == k
    size = int(a.sum()) + int(b.sum())
    if size == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(a & b)) / size


def boundary_points(volume: LabelVolume, k: int) -> np.ndarray:
    """World coordinates of the 6-connected boundary voxels of label ``k``."""
    mask = volume.labels == k
    structure = ndimage.generate_binary_structure(3, 1)
    interior = ndimage.binary_erosion(mask, structure=structure, border_value=0)
    edge = mask & ~interior
    return volume.lattice.world_points[np.flatnonzero(edge.ravel(order="F"))]


def acd(seg: LabelVolume, truth: LabelVolume, k: int) -> float:
    """
    Symmetric average contour distance (mm) of label ``k``.

    The mean of the two directed means of nearest boundary-to-boundary
    distances.

    Raises:
        EvaluationError: If either side has no boundary for ``k``
    """
    _check_pair(seg, truth)
    seg_points = boundary_points(seg, k)
    truth_points = boundary_points(truth, k)
    if len(seg_points) == 0:
        raise EvaluationError(f"segmentation has no boundary for label {k}")
    if len(truth_points) == 0:
        raise EvaluationError(f"truth has no boundary for label {k}")
    forward, _ = cKDTree(truth_points).query(seg_points)
    backward, _ = cKDTree(seg_points).query(truth_points)
    return 0.5 * (float(np.mean(forward)) + float(np.mean(backward)))
