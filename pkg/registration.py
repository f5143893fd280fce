#!/usr/bin/env python3
"""
Registration Inside the Likelihood
==================================

Analytic log-likelihood gradients with respect to the per-slice in-plane
transforms, the atlas free-form deformation and the optional atlas affine,
plus the backtracking gradient-ascent machinery that applies them.

Slice updates are evaluated on the band of common-space voxels whose
nearest slice is the one being moved; every other voxel's term is
unaffected by that slice, so the band change equals the change of the total
log-likelihood.

Author: MvMM Segmentation Team
Version: 1.0.0
"""

import logging
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from mvmm_errors import NonFiniteGradientError
from mvmm_model import (
    AtlasPrior,
    CoveragePartition,
    ModelParams,
    VoxelTerms,
    build_coverage_partition,
    domain_terms,
    evaluate_voxel_terms,
)
from transforms import (
    AtlasAffine,
    FfdDeformation,
    SliceAffineSet,
    SliceTransformMode,
    TransformState,
    apply_slice_transform,
)
from volume_core import MultivariateImageSet

logger = logging.getLogger(__name__)

TRANSLATION_STEP_MM = 0.5
ROTATION_STEP_RAD = 0.01
LINEAR_STEP = 0.01
MAX_HALVINGS = 8
# Largest slice translation per step, as a fraction of the image's in-plane spacing.
SLICE_STEP_FRACTION = 0.5
SLICE_STEPS_PER_BLOCK = 4


@dataclass
class LikelihoodContext:
    """Everything the log-likelihood depends on, as one immutable snapshot."""

    images: MultivariateImageSet
    atlas: AtlasPrior
    params: ModelParams
    transforms: TransformState
    coverage: CoveragePartition
    workers: int = 1

    @classmethod
    def build(cls, images: MultivariateImageSet, atlas: AtlasPrior, params: ModelParams,
              transforms: TransformState, workers: int = 1) -> "LikelihoodContext":
        coverage = build_coverage_partition(images, images.common_space, transforms)
        return cls(images, atlas, params, transforms, coverage, workers)

    def with_transforms(self, transforms: TransformState,
                        rebuild_coverage: bool = False) -> "LikelihoodContext":
        coverage = (build_coverage_partition(self.images, self.images.common_space, transforms)
                    if rebuild_coverage else self.coverage)
        return replace(self, transforms=transforms, coverage=coverage)

    def with_params(self, params: ModelParams) -> "LikelihoodContext":
        return replace(self, params=params)

    def terms(self, with_gradient: bool = False) -> VoxelTerms:
        return domain_terms(self.images, self.atlas, self.params, self.transforms,
                            self.coverage, with_gradient, self.workers)

    def log_likelihood(self) -> float:
        return float(np.sum(self.terms().log_lh))


def _intensity_sensitivity(terms: VoxelTerms, params: ModelParams, i: int,
                           rows: np.ndarray) -> np.ndarray:
    """d log LH / d I_i at the covered voxels ``rows``: sum_kc P_ikcx (mu - v) / sigma2."""
    log_post = terms.log_joint[rows] - terms.log_lh[rows, None]
    within = terms.log_comp[i, rows] - terms.log_evidence[i, rows][..., None]
    with np.errstate(invalid="ignore"):
        resp = np.exp(log_post[..., None] + within)
    v = terms.samples[i, rows][:, None, None]
    slope = np.where(terms.floored[i, rows], 0.0, (params.mu[i] - v) / params.sigma2[i])
    return np.sum(np.where(resp > 0, resp * slope, 0.0), axis=(1, 2))


def slice_gradients(context: LikelihoodContext, i: int,
                    terms: Optional[VoxelTerms] = None) -> np.ndarray:
    """
    Analytic log-likelihood gradient for every slice transform of image ``i``.

    Returns:
        Array (n_slices, n_params)
    """
    if terms is None:
        terms = context.terms(with_gradient=True)
    return _slice_gradients_from_terms(context, i, terms, context.transforms.slices)


def _slice_gradients_from_terms(context: LikelihoodContext, i: int, terms: VoxelTerms,
                                slices: SliceAffineSet) -> np.ndarray:
    gradient = np.zeros((slices.n_slices(i), slices.mode.n_params))
    rows = np.flatnonzero(terms.covered[i])
    if rows.size == 0:
        return gradient

    sensitivity = _intensity_sensitivity(terms, context.params, i, rows)
    points = context.coverage.common_space.world_points[terms.voxel_index[rows]]
    slice_ids, _ = slices.slice_of(i, points)
    jac = slices.parameter_jacobian(i, points, slice_ids)
    in_plane = terms.sample_gradients[i, rows, :2]
    per_voxel = sensitivity[:, None] * np.einsum("npa,na->np", jac, in_plane)
    for p in range(slices.mode.n_params):
        gradient[:, p] = np.bincount(slice_ids, weights=per_voxel[:, p],
                                     minlength=slices.n_slices(i))
    return gradient


def ll_gradient_slice_affine(context: LikelihoodContext, i: int, s: int) -> np.ndarray:
    """Gradient of the total log-likelihood w.r.t. the parameters of slice ``s`` of image ``i``."""
    return slice_gradients(context, i)[s]


def _atlas_point_gradient(context: LikelihoodContext, terms: VoxelTerms) -> np.ndarray:
    """d log LH / d y at the atlas sampling points y, shape (N, 3)."""
    prior = terms.prior
    pi = context.params.pi
    with np.errstate(divide="ignore"):
        log_weight = (np.log(pi)[None, :] + terms.log_evidence.sum(axis=0)
                      - np.log(prior.normalizer)[:, None] - terms.log_lh[:, None])
    weight = np.exp(log_weight)
    direct = np.einsum("nk,nka->na", weight, prior.atlas_gradients)
    through_normalizer = np.einsum("k,nka->na", pi, prior.atlas_gradients) / prior.normalizer[:, None]
    return direct - through_normalizer


def ll_gradient_ffd(context: LikelihoodContext, terms: Optional[VoxelTerms] = None) -> np.ndarray:
    """
    Gradient of the total log-likelihood w.r.t. every control displacement.

    Differentiates the normalized prior, including the term through the
    per-voxel normalizer, then chains through the atlas affine and the
    B-spline weights of each control point.

    Returns:
        Array shaped like the deformation's ``phi``
    """
    if terms is None:
        terms = context.terms(with_gradient=True)
    grad_y = _atlas_point_gradient(context, terms)
    grad_z = grad_y @ context.transforms.atlas_affine.linear
    points = context.coverage.common_space.world_points[terms.voxel_index]
    return context.transforms.ffd.accumulate(points, grad_z)


def ll_gradient_atlas_affine(context: LikelihoodContext,
                             terms: Optional[VoxelTerms] = None) -> np.ndarray:
    """Gradient of the total log-likelihood w.r.t. the 12 atlas affine parameters."""
    if terms is None:
        terms = context.terms(with_gradient=True)
    grad_y = _atlas_point_gradient(context, terms)
    points = context.coverage.common_space.world_points[terms.voxel_index]
    deformed = points + context.transforms.ffd.displacement(points)
    jac = context.transforms.atlas_affine.parameter_jacobian(deformed)
    return np.einsum("na,npa->p", grad_y, jac)


@dataclass
class StepControl:
    """
    Adaptive step size for one parameter block.

    Each parameter moves by ``scale * base`` times its gradient divided by
    the largest gradient magnitude within its family, so ``base`` is the
    largest step of a family in its own units (mm or rad). ``last_step``
    is the direction of the last accepted move; a gradient pointing back
    against it means the optimum was overshot.
    """

    base: np.ndarray
    families: np.ndarray
    scale: float = 1.0
    max_scale: float = 8.0
    max_halvings: int = MAX_HALVINGS
    last_step: Optional[np.ndarray] = None

    def __post_init__(self):
        self.base = np.asarray(self.base, dtype=float)
        self.families = np.asarray(self.families, dtype=int)

    @classmethod
    def for_slice(cls, mode: SliceTransformMode,
                  max_step_mm: Optional[float] = None) -> "StepControl":
        """
        Slice step control; ``max_step_mm`` caps the translation step
        (and scales the other families with it).
        """
        if mode is SliceTransformMode.RIGID:
            control = cls([TRANSLATION_STEP_MM] * 2 + [ROTATION_STEP_RAD], [0, 0, 1])
        else:
            control = cls([TRANSLATION_STEP_MM] * 2 + [LINEAR_STEP] * 4, [0, 0, 1, 1, 1, 1])
        if max_step_mm is not None:
            control.max_scale = max(1.0, max_step_mm / TRANSLATION_STEP_MM)
        return control

    @classmethod
    def for_ffd(cls, n_params: int) -> "StepControl":
        return cls(np.full(n_params, TRANSLATION_STEP_MM), np.zeros(n_params, dtype=int))

    @classmethod
    def for_atlas_affine(cls) -> "StepControl":
        return cls([TRANSLATION_STEP_MM] * 3 + [LINEAR_STEP] * 9, [0] * 3 + [1] * 9)

    def direction(self, gradient: np.ndarray) -> np.ndarray:
        g = np.asarray(gradient, dtype=float).ravel()
        out = np.zeros_like(g)
        for family in np.unique(self.families):
            members = self.families == family
            peak = np.max(np.abs(g[members]))
            if peak > 0:
                out[members] = self.base[members] * g[members] / peak
        return out


@dataclass
class AscentResult:
    block: np.ndarray
    accepted: bool
    value: float
    evaluations: int = 0


def gradient_ascent_step(block: np.ndarray, gradient: np.ndarray, control: StepControl,
                         objective: Callable[[np.ndarray], float], current: float,
                         names: Optional[List[str]] = None) -> AscentResult:
    """
    One backtracking ascent step on a parameter block.

    Proposes ``block + scale * direction``; accepts the first proposal that
    strictly increases ``objective``, halving the scale up to
    ``control.max_halvings`` times. The control's scale doubles after an
    acceptance (capped) and keeps the last tried value after a rejection.
    When the direction reverses the last accepted one, the scale is halved
    first and not doubled on acceptance.

    Args:
        block: Current parameters (any shape; the gradient has the same size)
        gradient: Gradient of the objective at ``block``
        control: Step control, updated in place
        objective: Function evaluated on candidate blocks
        current: Objective value at ``block``
        names: Optional parameter names for error reports

    Returns:
        AscentResult with the new (or unchanged) block

    Raises:
        NonFiniteGradientError: If the gradient has a NaN or infinite entry
    """
    block = np.asarray(block, dtype=float)
    g = np.asarray(gradient, dtype=float)
    bad = ~np.isfinite(g.ravel())
    if np.any(bad):
        j = int(np.flatnonzero(bad)[0])
        raise NonFiniteGradientError("non-finite gradient component",
                                     parameter=names[j] if names else str(j))
    if not np.any(g):
        return AscentResult(block.copy(), True, current, 0)

    step = control.direction(g).reshape(block.shape)
    scale = min(control.scale, control.max_scale)
    overshot = (control.last_step is not None and control.last_step.size == step.size
                and float(np.dot(control.last_step, step.ravel())) < 0.0)
    if overshot:
        scale *= 0.5
    for attempt in range(control.max_halvings + 1):
        candidate = block + scale * step
        value = objective(candidate)
        if value > current:
            control.scale = scale if overshot else min(2.0 * scale, control.max_scale)
            control.last_step = step.ravel().copy()
            return AscentResult(candidate, True, value, attempt + 1)
        if attempt < control.max_halvings:
            scale *= 0.5
    control.scale = scale
    return AscentResult(block.copy(), False, current, control.max_halvings + 1)


def slice_band(context: LikelihoodContext, i: int, s: int) -> np.ndarray:
    """Flat common-lattice indices whose nearest slice of image ``i`` is ``s``."""
    points = context.coverage.common_space.world_points
    slice_ids, within = context.transforms.slices.slice_of(i, points)
    return np.flatnonzero(within & (slice_ids == s))


def band_coverage(context: LikelihoodContext, i: int, band: np.ndarray,
                  slices: SliceAffineSet) -> np.ndarray:
    """Whether image ``i`` covers each band voxel when sampled through ``slices``."""
    lattice = context.coverage.common_space
    moved = apply_slice_transform(slices, i, lattice.world_points[band])
    return context.images.images[i].lattice.contains(moved)


def band_terms(context: LikelihoodContext, i: int, band: np.ndarray, slices: SliceAffineSet,
               with_gradient: bool = False) -> Optional[VoxelTerms]:
    """
    Voxel terms of the band with image ``i`` sampled through ``slices``.

    The other images keep their coverage from the context. Returns None when
    no band voxel stays covered.
    """
    covered = context.coverage.covered[:, band].copy()
    covered[i] = band_coverage(context, i, band, slices)
    keep = covered.any(axis=0)
    if not np.any(keep):
        return None
    transforms = context.transforms.replace(slices=slices)
    return evaluate_voxel_terms(context.images, context.atlas, context.params, transforms,
                                covered[:, keep], band[keep], context.coverage.common_space,
                                with_gradient=with_gradient, workers=context.workers)


def band_log_likelihood(context: LikelihoodContext, i: int, band: np.ndarray,
                        slices: SliceAffineSet) -> float:
    """Log-likelihood of the band voxels with image ``i`` sampled through ``slices``."""
    terms = band_terms(context, i, band, slices)
    return 0.0 if terms is None else float(np.sum(terms.log_lh))


def move_slice(context: LikelihoodContext, i: int, s: int, band: np.ndarray,
               params: np.ndarray) -> LikelihoodContext:
    """Context with slice ``s`` of image ``i`` set to ``params`` and its band coverage refreshed."""
    slices = context.transforms.slices.with_slice(i, s, params)
    coverage = context.coverage.with_image_coverage(i, band,
                                                    band_coverage(context, i, band, slices))
    return replace(context, transforms=context.transforms.replace(slices=slices),
                   coverage=coverage)


@dataclass
class BlockOutcome:
    """Result of one registration block: the new context and its move counts."""

    context: LikelihoodContext
    accepted: int = 0
    rejected: int = 0
    log_likelihood: Optional[float] = None


def slice_block(context: LikelihoodContext, controls: Dict[Tuple[int, int], StepControl],
                steps_per_slice: int = SLICE_STEPS_PER_BLOCK) -> BlockOutcome:
    """
    Up to ``steps_per_slice`` ascent steps on every slice transform, image by image.

    Each step takes the slice's gradient from its own band, so moves of
    earlier slices are always seen. A slice stops at its first rejected or
    zero-gradient step. Coverage is refreshed after every accepted move.
    """
    accepted = rejected = 0
    mode = context.transforms.slices.mode
    for i in range(context.images.n_images):
        max_step = SLICE_STEP_FRACTION * min(context.images.images[i].spacing[:2])
        for s in range(context.transforms.slices.n_slices(i)):
            band = slice_band(context, i, s)
            if band.size == 0:
                continue
            control = controls.setdefault((i, s), StepControl.for_slice(mode, max_step))
            names = [f"image {i} slice {s} {name}" for name in mode.parameter_names]
            for _ in range(steps_per_slice):
                slices = context.transforms.slices
                terms = band_terms(context, i, band, slices, with_gradient=True)
                if terms is None:
                    break
                gradient = _slice_gradients_from_terms(context, i, terms, slices)[s]

                def objective(candidate, slices=slices):
                    return band_log_likelihood(context, i, band, slices.with_slice(i, s, candidate))

                result = gradient_ascent_step(slices.params[i][s], gradient, control, objective,
                                              float(np.sum(terms.log_lh)), names)
                if not result.accepted:
                    rejected += 1
                    break
                if result.evaluations == 0:
                    break
                accepted += 1
                context = move_slice(context, i, s, band, result.block)
    return BlockOutcome(context, accepted, rejected)


def ffd_step(context: LikelihoodContext, control: StepControl,
             current: Optional[float] = None) -> BlockOutcome:
    """One ascent step on all control displacements of the atlas deformation."""
    ffd = context.transforms.ffd
    gradient = ll_gradient_ffd(context)
    if current is None:
        current = context.log_likelihood()

    def objective(candidate):
        trial = context.with_transforms(context.transforms.replace(ffd=ffd.copy(phi=candidate)))
        return trial.log_likelihood()

    result = gradient_ascent_step(ffd.phi, gradient, control, objective, current,
                                  _phi_order_names(ffd))
    if result.accepted and result.evaluations > 0:
        context = context.with_transforms(
            context.transforms.replace(ffd=ffd.copy(phi=result.block)))
        return BlockOutcome(context, 1, 0, result.value)
    return BlockOutcome(context, 0, 0 if result.accepted else 1, current)


def _phi_order_names(ffd: FfdDeformation) -> List[str]:
    """Parameter names in C order of ``phi``'s ravel."""
    return [f"control ({a}, {b}, {c}) axis {d}"
            for a in range(ffd.dims[0]) for b in range(ffd.dims[1])
            for c in range(ffd.dims[2]) for d in range(3)]


def atlas_affine_step(context: LikelihoodContext, control: StepControl,
                      current: Optional[float] = None) -> BlockOutcome:
    """One ascent step on the 12 atlas affine parameters."""
    affine = context.transforms.atlas_affine
    gradient = ll_gradient_atlas_affine(context)
    if current is None:
        current = context.log_likelihood()

    def objective(candidate):
        trial = context.with_transforms(
            context.transforms.replace(atlas_affine=affine.copy(params=candidate)))
        return trial.log_likelihood()

    names = [f"atlas affine {name}" for name in AtlasAffine.PARAMETER_NAMES]
    result = gradient_ascent_step(affine.params, gradient, control, objective, current, names)
    if result.accepted and result.evaluations > 0:
        context = context.with_transforms(
            context.transforms.replace(atlas_affine=affine.copy(params=result.block)))
        return BlockOutcome(context, 1, 0, result.value)
    return BlockOutcome(context, 0, 0 if result.accepted else 1, current)


def prealign_atlas(context: LikelihoodContext, n_steps: int = 20) -> BlockOutcome:
    """Global atlas affine pre-alignment by repeated ascent steps; stops at the first rejection."""
    control = StepControl.for_atlas_affine()
    accepted = rejected = 0
    current = context.log_likelihood()
    for _ in range(n_steps):
        outcome = atlas_affine_step(context, control, current)
        context, current = outcome.context, outcome.log_likelihood
        accepted += outcome.accepted
        rejected += outcome.rejected
        if outcome.accepted == 0:
            break
    logger.info("atlas pre-alignment: %d accepted steps, LL=%.10g", accepted, current)
    return BlockOutcome(context, accepted, rejected, current)
