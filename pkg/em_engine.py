#!/usr/bin/env python3
"""
EM Engine
=========

Expectation-maximization over the MvMM segmentation parameters: atlas-based
initialization, E-step posteriors under the hetero-coverage partition,
closed-form M-step moments, the generalized-EM label-proportion update and
the argmax readout of the segmentation.

Author: MvMM Segmentation Team
Version: 1.0.0
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.cluster.vq import ClusterError, kmeans2
from scipy.stats import median_abs_deviation

from mvmm_errors import DegenerateAtlasError, ZeroResponsibilityError
from mvmm_model import (
    AtlasPrior,
    CoveragePartition,
    LabelConfig,
    ModelParams,
    build_coverage_partition,
    domain_terms,
    resolve_transforms,
    sigma_floor_for,
)
from transforms import TransformState, apply_slice_transform
from volume_core import LabelVolume, Lattice, MultivariateImageSet, trilinear_sample

logger = logging.getLogger(__name__)

STARVATION_MASS = 1e-12
DEFAULT_EM_ITERATIONS = 100
DEFAULT_EM_TOLERANCE = 1e-6
MIN_CORE_VOXELS = 20


@dataclass
class PosteriorField:
    """
    Label and component posteriors over the non-excluded voxels of the common space.

    Attributes:
        common_space: Common lattice
        voxel_index: Flat indices of the voxels the rows refer to
        covered: (N_I, N) image coverage of those voxels
        label_post: (N, K) label posteriors P_kx
        component_post: (N_I, N, K, Cmax) component posteriors, zero where uncovered
        samples: (N_I, N) image intensities at the transformed points
        atlas_points: (N, 3) atlas sampling positions
        log_likelihood: Total log-likelihood of the parameters that produced them
    """

    common_space: Lattice
    voxel_index: np.ndarray
    covered: np.ndarray
    label_post: np.ndarray
    component_post: np.ndarray
    samples: np.ndarray
    atlas_points: np.ndarray
    log_likelihood: float

    @property
    def n_voxels(self) -> int:
        return len(self.voxel_index)

    def dense_label_posterior(self, position: int) -> np.ndarray:
        """Posterior of one label position as a volume; NaN on excluded voxels."""
        flat = np.full(self.common_space.n_voxels, np.nan)
        flat[self.voxel_index] = self.label_post[:, position]
        return self.common_space.to_volume(flat)


@dataclass
class HardSegmentation:
    """Argmax segmentation on the common space and resampled into each image lattice."""

    common: LabelVolume
    per_image: List[LabelVolume]


class InitMethod(Enum):
    """How initial component parameters are drawn from the images."""
    MOMENTS = "moments"
    CORE = "core"


def _weighted_moments(values: np.ndarray, weights: np.ndarray) -> Tuple[float, float, float]:
    total = float(weights.sum())
    if total <= 0:
        return 0.0, float(values.mean()), float(values.var())
    mean = float(np.dot(weights, values) / total)
    var = float(np.dot(weights, (values - mean) ** 2) / total)
    return total, mean, var


def component_offsets(n: int) -> np.ndarray:
    """Evenly spaced offsets over [-1, 1]; a single component sits at 0."""
    return np.zeros(1) if n == 1 else np.linspace(-1.0, 1.0, n)


def label_core(label_weights: np.ndarray, position: int, n_components: int) -> np.ndarray:
    """
    Voxels where label ``position`` is the most probable atlas label.

    Falls back to the top decile of the label's atlas weight when the argmax
    region holds fewer than MIN_CORE_VOXELS per component.
    """
    core = np.argmax(label_weights, axis=1) == position
    if np.count_nonzero(core) >= MIN_CORE_VOXELS * n_components:
        return core
    weights = label_weights[:, position]
    return weights >= np.quantile(weights, 0.9)


def cluster_intensities(values: np.ndarray, n: int) -> List[np.ndarray]:
    """
    Split intensities into ``n`` groups by 1-D k-means seeded at the group quantiles.

    Groups come back in increasing order of their seed; an empty group is
    replaced by all of ``values``.
    """
    if n == 1 or values.size < n:
        return [values] * n
    start = np.quantile(values, (np.arange(n) + 0.5) / n)
    try:
        _, assignment = kmeans2(values[:, None], start[:, None], iter=20, minit="matrix",
                                missing="raise")
    except ClusterError:
        assignment = np.argmin(np.abs(values[:, None] - start[None, :]), axis=1)
    groups = [values[assignment == c] for c in range(n)]
    return [group if group.size else values for group in groups]


def core_components(values: np.ndarray, n: int, floor: float
                    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(tau, mu, sigma2) of ``n`` components from the median and MAD of each intensity group."""
    groups = cluster_intensities(values, n)
    sizes = np.array([group.size for group in groups], dtype=float)
    mu = np.array([np.median(group) for group in groups])
    spread = np.array([median_abs_deviation(group, scale="normal") for group in groups])
    spread = np.where(spread > 0, spread, [np.std(group) for group in groups])
    return sizes / sizes.sum(), mu, np.maximum(spread ** 2, floor)


def initialize_params(images: MultivariateImageSet, atlas: AtlasPrior, config: LabelConfig,
                      coverage: Optional[CoveragePartition] = None,
                      transforms: Optional[TransformState] = None,
                      method: InitMethod = InitMethod.MOMENTS) -> ModelParams:
    """
    Atlas-based initial parameters.

    Label proportions are the atlas mass fractions over the covered common
    space. With ``InitMethod.MOMENTS``, each label's mean and variance per
    image are atlas-weighted moments over the voxels that image covers, and
    components spread over mean + a * std with evenly spaced a, each taking
    variance / |C_ik|. ``InitMethod.CORE`` instead clusters the intensities
    of the label's atlas core (its argmax region) into |C_ik| groups and
    takes each group's median, normal-scaled MAD and share; partial-volume
    voxels at label borders then do not drag the means.

    Raises:
        DegenerateAtlasError: If a label has no atlas mass over the domain
    """
    transforms = resolve_transforms(images, transforms)
    if coverage is None:
        coverage = build_coverage_partition(images, images.common_space, transforms)
    method = InitMethod(method)
    index = coverage.included_index
    points = coverage.common_space.world_points[index]
    atlas_values, _ = atlas.sample(transforms.atlas_points(points))

    mass = atlas_values.sum(axis=0)
    for position, k in enumerate(config.labels):
        if not mass[position] > 0:
            raise DegenerateAtlasError("label has zero atlas mass over the covered domain", label=k)
    pi = mass / mass.sum()

    shape = (config.n_images, config.n_labels, config.max_components)
    tau, mu, sigma2 = np.zeros(shape), np.zeros(shape), np.ones(shape)
    floors = np.array([sigma_floor_for(grid) for grid in images.images])
    for i, grid in enumerate(images.images):
        rows = coverage.covered[i, index]
        if np.any(rows):
            values = trilinear_sample(grid, transforms.image_points(i, points[rows]))
            label_weights = atlas_values[rows]
        else:
            values = grid.flat_values()
            label_weights = np.zeros((values.size, config.n_labels))
        for position, k in enumerate(config.labels):
            n = config.n_components(i, k)
            weights = label_weights[:, position]
            if not weights.sum() > 0:
                logger.warning("image %d, label %d: no atlas mass inside the image, "
                               "using unweighted moments", i, k)
            if method is InitMethod.CORE and weights.sum() > 0:
                core = label_core(label_weights, position, n)
                shares, means, variances = core_components(values[core], n, floors[i])
                tau[i, position, :n] = shares
                mu[i, position, :n] = means
                sigma2[i, position, :n] = variances
                continue
            _, mean, var = _weighted_moments(values, weights)
            tau[i, position, :n] = 1.0 / n
            mu[i, position, :n] = mean + component_offsets(n) * np.sqrt(var)
            sigma2[i, position, :n] = max(var / n, floors[i])
    logger.debug("initial parameters (%s): %s", method.value, np.array2string(pi, precision=4))
    return ModelParams(config, pi, tau, mu, sigma2, floors)


def e_step(images: MultivariateImageSet, atlas: AtlasPrior, params: ModelParams,
           transforms: Optional[TransformState] = None,
           coverage: Optional[CoveragePartition] = None, workers: int = 1) -> PosteriorField:
    """
    Label and component posteriors for the current parameters.

    Each voxel uses only the images covering it. The returned field also
    carries the total log-likelihood of ``params``.

    Raises:
        ZeroResponsibilityError: If a voxel's responsibilities do not normalize
    """
    transforms = resolve_transforms(images, transforms)
    if coverage is None:
        coverage = build_coverage_partition(images, images.common_space, transforms)
    terms = domain_terms(images, atlas, params, transforms, coverage, workers=workers)

    label_post = terms.label_posterior
    totals = label_post.sum(axis=1)
    bad = ~(np.abs(totals - 1.0) < 1e-6)
    if np.any(bad):
        n = int(np.flatnonzero(bad)[0])
        lattice = coverage.common_space
        raise ZeroResponsibilityError("responsibilities do not normalize",
                                      voxel=lattice.unravel(terms.voxel_index[n]),
                                      world=lattice.world_points[terms.voxel_index[n]],
                                      detail=params.summary())

    with np.errstate(invalid="ignore"):
        within_label = np.exp(terms.log_comp - terms.log_evidence[..., None])
    component_post = np.where(terms.covered[:, :, None, None],
                              within_label * label_post[None, :, :, None], 0.0)
    return PosteriorField(coverage.common_space, terms.voxel_index, terms.covered, label_post,
                          component_post, terms.samples, terms.prior.atlas_points,
                          float(np.sum(terms.log_lh)))


def m_step(images: MultivariateImageSet, posteriors: PosteriorField,
           params: ModelParams) -> ModelParams:
    """
    Closed-form component updates from weighted moments over each image's covered voxels.

    Label proportions are carried over unchanged; see ``update_pi``.
    Components with no responsibility mass are reseeded one standard
    deviation above their heaviest sibling with that sibling's variance.
    """
    config = params.config
    tau, mu, sigma2 = params.tau.copy(), params.mu.copy(), params.sigma2.copy()
    for i in range(config.n_images):
        rows = posteriors.covered[i]
        if not np.any(rows):
            continue
        values = posteriors.samples[i, rows]
        resp = posteriors.component_post[i, rows]
        for position, k in enumerate(config.labels):
            n = config.n_components(i, k)
            weights = resp[:, position, :n]
            mass = weights.sum(axis=0)
            if np.all(mass < STARVATION_MASS):
                continue
            new_mu = np.array(mu[i, position, :n])
            new_var = np.array(sigma2[i, position, :n])
            for c in range(n):
                if mass[c] >= STARVATION_MASS:
                    new_mu[c] = np.dot(weights[:, c], values) / mass[c]
                    new_var[c] = np.dot(weights[:, c], (values - new_mu[c]) ** 2) / mass[c]
            new_tau = mass / mass.sum()
            starved = mass < STARVATION_MASS
            if np.any(starved):
                heaviest = int(np.argmax(mass))
                logger.warning("image %d, label %d: reseeding %d starved component(s)",
                               i, k, int(starved.sum()))
                new_mu[starved] = new_mu[heaviest] + np.sqrt(new_var[heaviest])
                new_var[starved] = new_var[heaviest]
                new_tau[starved] = 1.0 / n
                new_tau /= new_tau.sum()
            mu[i, position, :n] = new_mu
            sigma2[i, position, :n] = np.maximum(new_var, params.sigma_floor[i])
            tau[i, position, :n] = new_tau
    return params.copy(tau=tau, mu=mu, sigma2=sigma2)


def update_pi(posteriors: PosteriorField, atlas: AtlasPrior, params: ModelParams) -> np.ndarray:
    """
    Generalized-EM label proportion update with the normalizer frozen at the current pi.

    pi_k = sum_x P_kx / sum_x (A_k(x) / C_x), with C_x = sum_l A_l(x) pi_l,
    returned normalized to sum 1.

    Raises:
        DegenerateAtlasError: If a label's denominator vanishes
    """
    atlas_values, _ = atlas.sample(posteriors.atlas_points)
    normalizer = atlas_values @ params.pi
    numerator = posteriors.label_post.sum(axis=0)
    denominator = (atlas_values / normalizer[:, None]).sum(axis=0)
    for position, k in enumerate(params.config.labels):
        if not denominator[position] > 0:
            raise DegenerateAtlasError("label proportion update has a zero denominator", label=k)
    pi = numerator / denominator
    return pi / pi.sum()


def em_iterate(images: MultivariateImageSet, atlas: AtlasPrior, params: ModelParams,
               transforms: Optional[TransformState] = None,
               coverage: Optional[CoveragePartition] = None,
               n_iters: int = DEFAULT_EM_ITERATIONS, tol: float = DEFAULT_EM_TOLERANCE,
               workers: int = 1) -> Tuple[ModelParams, PosteriorField, List[float]]:
    """
    Alternate E-step, M-step and the proportion update until converged.

    Args:
        images: Image set
        atlas: Atlas prior
        params: Starting parameters
        transforms: Fixed registration state
        coverage: Fixed coverage partition
        n_iters: Maximum number of M-steps
        tol: Relative log-likelihood change that counts as converged

    Returns:
        Tuple of (final params, their posteriors, log-likelihood trace); the
        trace starts with the log-likelihood of ``params``
    """
    transforms = resolve_transforms(images, transforms)
    if coverage is None:
        coverage = build_coverage_partition(images, images.common_space, transforms)

    posteriors = e_step(images, atlas, params, transforms, coverage, workers)
    trace = [posteriors.log_likelihood]
    for iteration in range(n_iters):
        updated = m_step(images, posteriors, params)
        updated = updated.copy(pi=update_pi(posteriors, atlas, params))
        candidate = e_step(images, atlas, updated, transforms, coverage, workers)
        params, posteriors = updated, candidate
        trace.append(candidate.log_likelihood)
        change = abs(trace[-1] - trace[-2])
        logger.debug("EM iteration %d: LL=%.10g change=%.3g", iteration + 1, trace[-1], change)
        if change < tol * abs(trace[-1]):
            break
    return params, posteriors, trace


def hard_segmentation(posteriors: PosteriorField, labels: Tuple[int, ...],
                      images: Optional[MultivariateImageSet] = None,
                      transforms: Optional[TransformState] = None) -> HardSegmentation:
    """
    Argmax labels on the common space, optionally resampled into each image lattice.

    Ties go to the lowest label position; excluded voxels are -1. Native
    voxels map back through the inverse slice transform and take the label
    of the nearest common voxel.
    """
    lattice = posteriors.common_space
    ids = np.asarray(labels, dtype=np.int64)
    flat = np.full(lattice.n_voxels, -1, dtype=np.int64)
    flat[posteriors.voxel_index] = ids[np.argmax(posteriors.label_post, axis=1)]
    common = LabelVolume(lattice, lattice.to_volume(flat))

    per_image = []
    if images is not None:
        transforms = resolve_transforms(images, transforms, lattice)
        for i, grid in enumerate(images.images):
            native = grid.lattice
            x = apply_slice_transform(transforms.slices, i, native.world_points, inverse=True)
            idx = np.rint(lattice.world_to_voxel(x)).astype(np.int64)
            valid = np.all((idx >= 0) & (idx < np.asarray(lattice.dims)), axis=1)
            out = np.full(native.n_voxels, -1, dtype=np.int64)
            if np.any(valid):
                target = np.ravel_multi_index(tuple(idx[valid].T), lattice.dims, order="F")
                out[valid] = flat[target]
            per_image.append(LabelVolume(native, native.to_volume(out)))
    return HardSegmentation(common, per_image)


def label_counts(segmentation: LabelVolume, labels: Tuple[int, ...]) -> Dict[int, int]:
    return {int(k): int(np.count_nonzero(segmentation.labels == k)) for k in labels}
