#!/usr/bin/env python3
"""
MvMM Probabilistic Model
========================

Label/component configuration, model parameters, the atlas spatial prior,
the hetero-coverage partition of the common space, and the per-voxel and
total log-likelihood of the multivariate mixture model with the
registration transforms embedded in it.

Model parameters are stored as padded arrays indexed ``[image, label
position, component]``; entries beyond a pair's component count carry
``tau = 0`` and never contribute.

Author: MvMM Segmentation Team
Version: 1.0.0
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import logsumexp

from mvmm_errors import (
    ConfigurationLookupError,
    DegeneratePriorError,
    EmptyDomainError,
    InvalidParameterError,
    ZeroLikelihoodError,
)
from transforms import SliceAffineSet, TransformState, apply_slice_transform
from volume_core import (
    Lattice,
    MultivariateImageSet,
    VoxelGrid,
    sample_with_gradient,
    trilinear_sample,
)

logger = logging.getLogger(__name__)

RESPONSE_FLOOR = 1e-300
LOG_RESPONSE_FLOOR = math.log(RESPONSE_FLOOR)
TAU_TOLERANCE = 1e-9
ATLAS_SUM_TOLERANCE = 1e-3
MIN_CHUNK = 4096


@dataclass
class LabelConfig:
    """Ordered tissue labels and the number of Gaussian subtypes per (image, label)."""

    labels: Tuple[int, ...]
    components: Dict[Tuple[int, int], int]
    n_images: int

    def __post_init__(self):
        self.labels = tuple(int(k) for k in self.labels)
        if not self.labels:
            raise InvalidParameterError("at least one label is required")
        if len(set(self.labels)) != len(self.labels):
            raise InvalidParameterError(f"duplicate label ids in {self.labels}")
        if self.n_images < 1:
            raise InvalidParameterError("at least one image is required")
        for i in range(self.n_images):
            for k in self.labels:
                count = self.components.get((i, k))
                if count is None:
                    raise InvalidParameterError(f"no component count for image {i}, label {k}")
                if int(count) < 1:
                    raise InvalidParameterError(
                        f"image {i}, label {k}: component count must be >= 1, got {count}"
                    )
        self.components = {(int(i), int(k)): int(c) for (i, k), c in self.components.items()}

    @classmethod
    def uniform(cls, labels: Sequence[int], n_images: int, count: int = 1,
                overrides: Optional[Mapping[Tuple[int, int], int]] = None) -> "LabelConfig":
        components = {(i, int(k)): count for i in range(n_images) for k in labels}
        components.update(overrides or {})
        return cls(tuple(labels), components, n_images)

    @property
    def n_labels(self) -> int:
        return len(self.labels)

    @property
    def max_components(self) -> int:
        return max(self.components.values())

    def label_index(self, k: int) -> int:
        try:
            return self.labels.index(int(k))
        except ValueError:
            raise ConfigurationLookupError(f"unknown label {k}; configured labels are {self.labels}")

    def n_components(self, i: int, k: int) -> int:
        try:
            return self.components[(int(i), int(k))]
        except KeyError:
            raise ConfigurationLookupError(f"no configuration for image {i}, label {k}")

    def component_mask(self) -> np.ndarray:
        """Boolean (N_I, K, Cmax) array marking real (non-padding) components."""
        mask = np.zeros((self.n_images, self.n_labels, self.max_components), dtype=bool)
        for (i, k), count in self.components.items():
            if i < self.n_images and k in self.labels:
                mask[i, self.label_index(k), :count] = True
        return mask

    def subset(self, images: Sequence[int]) -> "LabelConfig":
        """Configuration restricted to ``images``, renumbered from zero."""
        components = {(new, k): self.components[(old, k)]
                      for new, old in enumerate(images) for k in self.labels}
        return LabelConfig(self.labels, components, len(images))


def sigma_floor_for(image: VoxelGrid) -> float:
    """Variance floor of an image: (1e-4 x intensity range) squared, at least 1e-12."""
    values = image.values[np.isfinite(image.values)]
    span = float(values.max() - values.min()) if values.size else 0.0
    return max((1e-4 * span) ** 2, 1e-12)


@dataclass
class ModelParams:
    """
    Label proportions and per-image Gaussian component parameters.

    Attributes:
        config: Label/component configuration
        pi: Label proportions, shape (K,)
        tau: Component proportions, shape (N_I, K, Cmax)
        mu: Component means, shape (N_I, K, Cmax)
        sigma2: Component variances, shape (N_I, K, Cmax)
        sigma_floor: Per-image variance floor, shape (N_I,)
    """

    config: LabelConfig
    pi: np.ndarray
    tau: np.ndarray
    mu: np.ndarray
    sigma2: np.ndarray
    sigma_floor: np.ndarray = None

    def __post_init__(self):
        cfg = self.config
        shape = (cfg.n_images, cfg.n_labels, cfg.max_components)
        self.pi = np.asarray(self.pi, dtype=float).reshape(cfg.n_labels)
        self.tau = np.asarray(self.tau, dtype=float)
        self.mu = np.asarray(self.mu, dtype=float)
        self.sigma2 = np.asarray(self.sigma2, dtype=float)
        for name in ("tau", "mu", "sigma2"):
            if getattr(self, name).shape != shape:
                raise InvalidParameterError(
                    f"{name} has shape {getattr(self, name).shape}, expected {shape}"
                )
        if self.sigma_floor is None:
            self.sigma_floor = np.full(cfg.n_images, 1e-12)
        self.sigma_floor = np.asarray(self.sigma_floor, dtype=float).reshape(cfg.n_images)

        mask = cfg.component_mask()
        # padding never contributes
        self.tau = np.where(mask, self.tau, 0.0)
        self.sigma2 = np.where(mask, self.sigma2, 1.0)
        self.mu = np.where(mask, self.mu, 0.0)

        if np.any(self.pi < 0) or not np.all(np.isfinite(self.pi)):
            raise InvalidParameterError(f"label proportions must be finite and >= 0, got {self.pi}")
        if np.any(self.tau < 0):
            raise InvalidParameterError("component proportions must be >= 0")
        sums = self.tau.sum(axis=2)
        if np.any(np.abs(sums - 1.0) > TAU_TOLERANCE):
            i, k = np.unravel_index(np.argmax(np.abs(sums - 1.0)), sums.shape)
            raise InvalidParameterError(
                f"component proportions of image {i}, label {cfg.labels[k]} sum to {sums[i, k]!r}"
            )
        floor = self.sigma_floor[:, None, None] * (1.0 - 1e-12)
        if np.any(mask & ~(self.sigma2 >= floor)):
            raise InvalidParameterError("component variance below the variance floor")
        if not np.all(np.isfinite(self.mu[mask])):
            raise InvalidParameterError("component means must be finite")

    @property
    def n_images(self) -> int:
        return self.config.n_images

    @property
    def n_labels(self) -> int:
        return self.config.n_labels

    @property
    def mask(self) -> np.ndarray:
        return self.config.component_mask()

    def component(self, i: int, k: int, c: int) -> Tuple[float, float, float]:
        """(tau, mu, sigma2) of component ``c`` of label id ``k`` in image ``i``."""
        if not 0 <= c < self.config.n_components(i, k):
            raise ConfigurationLookupError(f"image {i}, label {k} has no component {c}")
        kk = self.config.label_index(k)
        return float(self.tau[i, kk, c]), float(self.mu[i, kk, c]), float(self.sigma2[i, kk, c])

    def copy(self, **changes) -> "ModelParams":
        fields_ = {name: getattr(self, name).copy()
                   for name in ("pi", "tau", "mu", "sigma2", "sigma_floor")}
        fields_.update(changes)
        return replace(self, **fields_)

    def summary(self) -> str:
        return "pi=[" + ", ".join(f"{p:.4g}" for p in self.pi) + "]"


@dataclass
class AtlasPrior:
    """Per-label probability maps sharing one lattice, indexed by label position."""

    maps: List[VoxelGrid]
    labels: Tuple[int, ...] = ()

    def __post_init__(self):
        if not self.maps:
            raise InvalidParameterError("an atlas needs at least one label map")
        if not self.labels:
            self.labels = tuple(range(len(self.maps)))
        self.labels = tuple(int(k) for k in self.labels)
        if len(self.labels) != len(self.maps):
            raise InvalidParameterError("one atlas map per label is required")
        lattice = self.maps[0].lattice
        for grid in self.maps[1:]:
            if grid.lattice != lattice:
                raise InvalidParameterError("atlas maps must share one lattice")
        stacked = self.stack()
        if np.any(stacked < -1e-12) or np.any(stacked > 1.0 + 1e-12):
            raise InvalidParameterError("atlas probabilities must lie in [0, 1]")
        deviation = self.normalization_error()
        if deviation > ATLAS_SUM_TOLERANCE:
            raise InvalidParameterError(
                f"atlas label probabilities do not sum to 1 (max deviation {deviation:.3g})"
            )

    @property
    def lattice(self) -> Lattice:
        return self.maps[0].lattice

    @property
    def n_labels(self) -> int:
        return len(self.maps)

    def stack(self) -> np.ndarray:
        """All maps as one (X, Y, Z, K) array."""
        return np.stack([grid.values for grid in self.maps], axis=-1)

    def normalization_error(self) -> float:
        return float(np.max(np.abs(self.stack().sum(axis=-1) - 1.0)))

    def sample(self, points) -> Tuple[np.ndarray, np.ndarray]:
        """
        Atlas probabilities at world points with the uniform fallback.

        Returns:
            Tuple of (values (N, K), inside mask (N,)); rows outside the atlas
            hull hold 1/K
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        inside = self.lattice.contains(pts)
        values = np.full((len(pts), self.n_labels), 1.0 / self.n_labels)
        if np.any(inside):
            values[inside] = np.stack([trilinear_sample(grid, pts[inside]) for grid in self.maps],
                                      axis=1)
        return values, inside

    def sample_with_gradient(self, points) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Values (N, K), spatial gradients (N, K, 3) and inside mask; gradient 0 outside."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        inside = self.lattice.contains(pts)
        values = np.full((len(pts), self.n_labels), 1.0 / self.n_labels)
        grads = np.zeros((len(pts), self.n_labels, 3))
        if np.any(inside):
            for k, grid in enumerate(self.maps):
                v, g = sample_with_gradient(grid, pts[inside])
                values[inside, k] = v
                grads[inside, k] = g
        return values, grads, inside


@dataclass
class CoveragePartition:
    """
    Hetero-coverage partition of the common lattice.

    ``covered[i, n]`` says whether image ``i`` samples voxel ``n`` inside its
    hull; voxels with equal covering sets form one sub-region. Voxels covered
    by no image have ``region_of == -1`` and are excluded from the domain.
    """

    common_space: Lattice
    covered: np.ndarray
    region_of: np.ndarray
    covering_images: List[Tuple[int, ...]]

    @property
    def n_regions(self) -> int:
        return len(self.covering_images)

    @property
    def n_images(self) -> int:
        return self.covered.shape[0]

    @property
    def included(self) -> np.ndarray:
        return self.region_of >= 0

    @property
    def included_index(self) -> np.ndarray:
        return np.flatnonzero(self.included)

    def region_mask(self, v: int) -> np.ndarray:
        return self.region_of == v

    def covering_set(self, flat_index: int) -> Tuple[int, ...]:
        region = int(self.region_of[flat_index])
        return () if region < 0 else self.covering_images[region]

    def region_sizes(self) -> np.ndarray:
        return np.bincount(self.region_of[self.included], minlength=self.n_regions)

    def with_image_coverage(self, i: int, flat_index: np.ndarray,
                            mask: np.ndarray) -> "CoveragePartition":
        """
        Partition after image ``i``'s coverage of the voxels ``flat_index`` becomes ``mask``.

        Only that image's transform may have changed; the other rows are kept.
        """
        covered = self.covered.copy()
        covered[i, flat_index] = mask
        return partition_from_coverage(self.common_space, covered)


def _image_list(images) -> List[VoxelGrid]:
    return list(images.images) if isinstance(images, MultivariateImageSet) else list(images)


def resolve_transforms(images, transforms: Optional[TransformState],
                       common_space: Optional[Lattice] = None) -> TransformState:
    """Identity transforms when none are given."""
    if transforms is not None:
        return transforms
    if common_space is None:
        common_space = images.common_space
    return TransformState.identity([grid.lattice for grid in _image_list(images)], common_space)


def build_coverage_partition(images, common_space: Optional[Lattice] = None,
                             transforms: Union[TransformState, SliceAffineSet, None] = None
                             ) -> CoveragePartition:
    """
    Partition the common lattice by the set of images covering each voxel.

    Args:
        images: MultivariateImageSet or sequence of VoxelGrid
        common_space: Common lattice (defaults to the image set's)
        transforms: Slice transforms moving each image's sampling points

    Returns:
        CoveragePartition; sub-regions are numbered in increasing order of
        their covering-set bitmask

    Raises:
        EmptyDomainError: If no voxel is covered by any image
    """
    grids = _image_list(images)
    if common_space is None:
        common_space = images.common_space
    slices = transforms.slices if isinstance(transforms, TransformState) else transforms
    points = common_space.world_points

    covered = np.zeros((len(grids), common_space.n_voxels), dtype=bool)
    for i, grid in enumerate(grids):
        sampled = points if slices is None else apply_slice_transform(slices, i, points)
        covered[i] = grid.lattice.contains(sampled)
    return partition_from_coverage(common_space, covered)


def partition_from_coverage(common_space: Lattice, covered: np.ndarray) -> CoveragePartition:
    """
    Group voxels by covering set given the (N_I, n_voxels) coverage matrix.

    Raises:
        EmptyDomainError: If no voxel is covered by any image
    """
    n_images = covered.shape[0]
    codes = np.zeros(common_space.n_voxels, dtype=np.int64)
    for i in range(n_images):
        codes |= covered[i].astype(np.int64) << i
    present = np.unique(codes[codes > 0])
    if present.size == 0:
        raise EmptyDomainError("no voxel of the common space is covered by any image")

    region_of = np.full(common_space.n_voxels, -1, dtype=np.int64)
    region_of[codes > 0] = np.searchsorted(present, codes[codes > 0])
    covering = [tuple(i for i in range(n_images) if code >> i & 1) for code in present]
    excluded = int(np.count_nonzero(codes == 0))
    logger.debug("coverage partition: %d sub-regions, %d excluded voxels", len(covering), excluded)
    return CoveragePartition(common_space, covered, region_of, covering)


def gaussian_pdf(mu, sigma2, x):
    """
    Normal density with mean ``mu`` and variance ``sigma2``, evaluated at ``x``.

    Raises:
        InvalidParameterError: If any variance is not strictly positive
    """
    sigma2 = np.asarray(sigma2, dtype=float)
    if np.any(~(sigma2 > 0)):
        raise InvalidParameterError(f"variance must be positive, got {sigma2}")
    result = np.exp(-(np.asarray(x, dtype=float) - mu) ** 2 / (2.0 * sigma2)) / np.sqrt(
        2.0 * np.pi * sigma2)
    return float(result) if np.ndim(result) == 0 else result


def log_gaussian(mu, sigma2, x):
    return -0.5 * np.log(2.0 * np.pi * sigma2) - (x - mu) ** 2 / (2.0 * sigma2)


def tissue_intensity_pdf(i: int, k: int, intensity: float, params: ModelParams) -> float:
    """Mixture density sum_c tau_ikc Phi_ikc(intensity) of label id ``k`` in image ``i``."""
    count = params.config.n_components(i, k)
    if not np.isfinite(intensity):
        raise InvalidParameterError(f"intensity must be finite, got {intensity}")
    kk = params.config.label_index(k)
    return float(sum(params.tau[i, kk, c] * gaussian_pdf(params.mu[i, kk, c],
                                                         params.sigma2[i, kk, c], intensity)
                     for c in range(count)))


def image_log_evidence(values: np.ndarray, params: ModelParams, i: int
                       ) -> Tuple[np.ndarray, np.ndarray]:
    """
    Log component terms of image ``i`` for a vector of intensities.

    Gaussian responses are floored at 1e-300 before the logarithm.

    Returns:
        Tuple of (log tau + log Phi, shape (N, K, Cmax); floored mask)
    """
    v = np.asarray(values, dtype=float)[:, None, None]
    log_phi = log_gaussian(params.mu[i], params.sigma2[i], v)
    floored = log_phi < LOG_RESPONSE_FLOOR
    log_phi = np.maximum(log_phi, LOG_RESPONSE_FLOOR)
    with np.errstate(divide="ignore"):
        log_tau = np.log(params.tau[i])
    return log_tau + log_phi, floored


@dataclass
class PriorTerms:
    """Spatial prior quantities at a batch of common-space points."""

    atlas_points: np.ndarray
    atlas_values: np.ndarray
    inside: np.ndarray
    normalizer: np.ndarray
    log_prior: np.ndarray
    atlas_gradients: Optional[np.ndarray] = None


def prior_terms(atlas: AtlasPrior, params: ModelParams, transforms: TransformState,
                points: np.ndarray, with_gradient: bool = False,
                voxel_index: Optional[np.ndarray] = None,
                lattice: Optional[Lattice] = None) -> PriorTerms:
    """
    Normalized spatial prior pi_k A_k(y) / sum_l pi_l A_l(y) with y the deformed point.

    Raises:
        DegeneratePriorError: If the normalizer vanishes at some point
    """
    y = transforms.atlas_points(points)
    if with_gradient:
        values, grads, inside = atlas.sample_with_gradient(y)
    else:
        (values, inside), grads = atlas.sample(y), None
    weighted = values * params.pi
    normalizer = weighted.sum(axis=1)
    bad = ~(normalizer > 0)
    if np.any(bad):
        n = int(np.flatnonzero(bad)[0])
        voxel = world = None
        if voxel_index is not None and lattice is not None:
            voxel = lattice.unravel(voxel_index[n])
        world = np.atleast_2d(points)[n]
        raise DegeneratePriorError("spatial prior normalizer is zero", voxel=voxel, world=world,
                                   detail=params.summary())
    with np.errstate(divide="ignore"):
        log_prior = np.log(weighted) - np.log(normalizer)[:, None]
    return PriorTerms(y, values, inside, normalizer, log_prior, grads)


def spatial_prior(x, k: int, params: ModelParams, atlas: AtlasPrior,
                  ffd=None, atlas_affine=None) -> float:
    """
    Prior probability of label id ``k`` at world point ``x``.

    Args:
        x: World point (3,)
        k: Label id
        params: Model parameters (supplies pi)
        atlas: Atlas prior
        ffd: Atlas deformation (FfdDeformation or TransformState); identity if None
        atlas_affine: Optional global atlas affine applied after the deformation
    """
    kk = params.config.label_index(k)
    if isinstance(ffd, TransformState):
        state = ffd
    else:
        state = TransformState.identity([], atlas.lattice)
        if ffd is not None:
            state = state.replace(ffd=ffd)
    if atlas_affine is not None:
        state = state.replace(atlas_affine=atlas_affine)
    terms = prior_terms(atlas, params, state, np.atleast_2d(np.asarray(x, dtype=float)))
    return float(np.exp(terms.log_prior[0, kk]))


def label_conditional_pdf(x, k: int, images, transforms: Optional[TransformState],
                          params: ModelParams,
                          coverage: Optional[CoveragePartition] = None) -> float:
    """
    Product over covering images of the tissue mixture density of label id ``k``.

    The covering set is that of the sub-region of the voxel at ``x`` when a
    partition is given and ``x`` lies on its lattice, otherwise the images
    whose hull contains the transformed point.

    Raises:
        EmptyDomainError: If no image covers ``x``
    """
    grids = _image_list(images)
    point = np.asarray(x, dtype=float)
    covering = None
    if coverage is not None:
        lattice = coverage.common_space
        idx = np.rint(lattice.world_to_voxel(point)).astype(int)
        if np.all(idx >= 0) and np.all(idx < np.asarray(lattice.dims)):
            flat = int(np.ravel_multi_index(tuple(idx), lattice.dims, order="F"))
            covering = coverage.covering_set(flat)
    if covering is None:
        covering = tuple(i for i, grid in enumerate(grids)
                         if grid.lattice.contains(_sample_point(transforms, i, point)))
    if not covering:
        raise EmptyDomainError(f"point {tuple(point)} is covered by no image")

    product = 1.0
    for i in covering:
        value = trilinear_sample(grids[i], _sample_point(transforms, i, point))
        product *= tissue_intensity_pdf(i, k, value, params)
    return product


def _sample_point(transforms: Optional[TransformState], i: int, point: np.ndarray) -> np.ndarray:
    return point if transforms is None else transforms.image_points(i, point)


@dataclass
class VoxelTerms:
    """
    Per-voxel likelihood quantities for a batch of common-lattice voxels.

    Image-indexed arrays are zero (log space) where the image does not cover
    the voxel.
    """

    voxel_index: np.ndarray
    covered: np.ndarray
    prior: PriorTerms
    samples: np.ndarray
    log_comp: np.ndarray
    floored: np.ndarray
    log_evidence: np.ndarray
    log_joint: np.ndarray
    log_lh: np.ndarray
    sample_gradients: Optional[np.ndarray] = None

    @property
    def label_posterior(self) -> np.ndarray:
        return np.exp(self.log_joint - self.log_lh[:, None])

    @staticmethod
    def concatenate(parts: List["VoxelTerms"]) -> "VoxelTerms":
        if len(parts) == 1:
            return parts[0]

        def cat(name, axis, owner=None):
            items = [getattr(p if owner is None else getattr(p, owner), name) for p in parts]
            if items[0] is None:
                return None
            return np.concatenate(items, axis=axis)

        prior = PriorTerms(cat("atlas_points", 0, "prior"), cat("atlas_values", 0, "prior"),
                           cat("inside", 0, "prior"), cat("normalizer", 0, "prior"),
                           cat("log_prior", 0, "prior"), cat("atlas_gradients", 0, "prior"))
        return VoxelTerms(cat("voxel_index", 0), cat("covered", 1), prior, cat("samples", 1),
                          cat("log_comp", 1), cat("floored", 1), cat("log_evidence", 1),
                          cat("log_joint", 0), cat("log_lh", 0), cat("sample_gradients", 1))


def chunk_bounds(n: int, workers: int) -> List[Tuple[int, int]]:
    """Contiguous [start, stop) chunks for ``workers`` threads."""
    if workers <= 1 or n < 2 * MIN_CHUNK:
        return [(0, n)]
    count = min(workers, max(1, n // MIN_CHUNK))
    edges = np.linspace(0, n, count + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def map_chunks(fn: Callable[[int, int], object], n: int, workers: int) -> List[object]:
    """Apply ``fn(start, stop)`` over chunks of ``range(n)``, results in chunk order."""
    bounds = chunk_bounds(n, workers)
    if len(bounds) == 1:
        return [fn(*bounds[0])]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda b: fn(*b), bounds))


def evaluate_voxel_terms(images, atlas: AtlasPrior, params: ModelParams,
                         transforms: TransformState, covered: np.ndarray,
                         voxel_index: np.ndarray, common_space: Optional[Lattice] = None,
                         with_gradient: bool = False, workers: int = 1) -> VoxelTerms:
    """
    Evaluate the model at common-lattice voxels.

    Args:
        images: MultivariateImageSet or sequence of VoxelGrid
        atlas: Atlas prior
        params: Model parameters
        transforms: Current transforms
        covered: (N_I, n) coverage of the requested voxels
        voxel_index: Flat common-lattice indices of the requested voxels
        common_space: Common lattice (defaults to the image set's)
        with_gradient: Also sample image and atlas spatial gradients
        workers: Thread count for chunked evaluation

    Raises:
        DegeneratePriorError: If the prior normalizer vanishes at a voxel
        ZeroLikelihoodError: If a voxel's likelihood is zero
        InvalidParameterError: If a voxel marked covered samples outside its image
    """
    grids = _image_list(images)
    lattice = common_space if common_space is not None else images.common_space
    voxel_index = np.asarray(voxel_index, dtype=np.int64)
    covered = np.asarray(covered, dtype=bool)

    def evaluate(start: int, stop: int) -> VoxelTerms:
        idx = voxel_index[start:stop]
        cov = covered[:, start:stop]
        points = lattice.world_points[idx]
        prior = prior_terms(atlas, params, transforms, points, with_gradient, idx, lattice)

        n = len(idx)
        shape = (len(grids), n, params.n_labels, params.config.max_components)
        samples = np.full((len(grids), n), np.nan)
        sample_grads = np.zeros((len(grids), n, 3)) if with_gradient else None
        log_comp = np.zeros(shape)
        floored = np.zeros(shape, dtype=bool)
        log_evidence = np.zeros((len(grids), n, params.n_labels))
        for i, grid in enumerate(grids):
            rows = cov[i]
            if not np.any(rows):
                continue
            y = transforms.image_points(i, points[rows])
            if with_gradient:
                values, grads = sample_with_gradient(grid, y)
                sample_grads[i, rows] = grads
            else:
                values = trilinear_sample(grid, y)
            if np.any(np.isnan(values)):
                raise InvalidParameterError(
                    f"coverage partition is stale: image {i} samples outside its hull"
                )
            samples[i, rows] = values
            comp, flo = image_log_evidence(values, params, i)
            log_comp[i, rows] = comp
            floored[i, rows] = flo
            log_evidence[i, rows] = logsumexp(comp, axis=2)

        log_joint = prior.log_prior + log_evidence.sum(axis=0)
        log_lh = logsumexp(log_joint, axis=1)
        bad = ~np.isfinite(log_lh)
        if np.any(bad):
            j = int(np.flatnonzero(bad)[0])
            raise ZeroLikelihoodError("voxel likelihood is zero", voxel=lattice.unravel(idx[j]),
                                      world=points[j], detail=params.summary())
        return VoxelTerms(idx, cov, prior, samples, log_comp, floored, log_evidence,
                          log_joint, log_lh, sample_grads)

    parts = map_chunks(evaluate, len(voxel_index), workers)
    return VoxelTerms.concatenate(parts)


def domain_terms(images, atlas: AtlasPrior, params: ModelParams,
                 transforms: Optional[TransformState], coverage: CoveragePartition,
                 with_gradient: bool = False, workers: int = 1) -> VoxelTerms:
    """Voxel terms over every non-excluded voxel of the partition."""
    transforms = resolve_transforms(images, transforms, coverage.common_space)
    index = coverage.included_index
    return evaluate_voxel_terms(images, atlas, params, transforms, coverage.covered[:, index],
                                index, coverage.common_space, with_gradient, workers)


def total_log_likelihood(images, atlas: AtlasPrior, params: ModelParams,
                         transforms: Optional[TransformState] = None,
                         coverage: Optional[CoveragePartition] = None,
                         workers: int = 1) -> float:
    """
    Transformation-embedded log-likelihood summed over the covered common space.

    Args:
        images: MultivariateImageSet
        atlas: Atlas prior
        params: Model parameters
        transforms: Registration state (identity if None)
        coverage: Coverage partition (built from ``transforms`` if None)
        workers: Thread count for evidence evaluation

    Returns:
        sum over non-excluded voxels of log sum_k prior_k * prod_i mixture_ik
    """
    transforms = resolve_transforms(images, transforms)
    if coverage is None:
        coverage = build_coverage_partition(images, images.common_space, transforms)
    terms = domain_terms(images, atlas, params, transforms, coverage, workers=workers)
    return float(np.sum(terms.log_lh))
