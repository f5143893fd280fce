import math

import numpy as np
import pytest
from scipy.special import logsumexp

from conftest import ToyProblem
from mvmm_errors import (
    ConfigurationLookupError,
    DegeneratePriorError,
    EmptyDomainError,
    InvalidParameterError,
)
from mvmm_model import (
    AtlasPrior,
    LabelConfig,
    ModelParams,
    build_coverage_partition,
    gaussian_pdf,
    label_conditional_pdf,
    spatial_prior,
    tissue_intensity_pdf,
    total_log_likelihood,
)
from transforms import TransformState
from volume_core import Lattice, MultivariateImageSet


def flat_atlas(lattice, n_labels, labels=None):
    return AtlasPrior([lattice.with_values(np.full(lattice.dims, 1.0 / n_labels))
                       for _ in range(n_labels)], labels or tuple(range(n_labels)))


def single_params(n_images=1, labels=(0,), mu=0.0, sigma2=1.0, pi=None):
    config = LabelConfig.uniform(labels, n_images)
    shape = (n_images, len(labels), 1)
    return ModelParams(config, pi if pi is not None else np.full(len(labels), 1.0 / len(labels)),
                       np.ones(shape), np.full(shape, mu), np.full(shape, sigma2))


def test_gaussian_pdf_values():
    assert gaussian_pdf(0.0, 1.0, 0.0) == pytest.approx(0.3989423, abs=1e-7)
    assert gaussian_pdf(5.0, 4.0, 5.0) == pytest.approx(1.0 / math.sqrt(8.0 * math.pi))
    ratio = gaussian_pdf(0.0, 1.0, 1.0) / gaussian_pdf(0.0, 1.0, 0.0)
    assert ratio == pytest.approx(math.exp(-0.5))
    with pytest.raises(InvalidParameterError):
        gaussian_pdf(0.0, 0.0, 1.0)


def test_tissue_pdf_single_component():
    params = single_params(mu=2.0, sigma2=3.0)
    assert tissue_intensity_pdf(0, 0, 1.5, params) == pytest.approx(gaussian_pdf(2.0, 3.0, 1.5))


def test_tissue_pdf_degenerate_and_general_mixtures():
    config = LabelConfig.uniform((0,), 1, 2)
    same = ModelParams(config, [1.0], [[[0.5, 0.5]]], [[[4.0, 4.0]]], [[[2.0, 2.0]]])
    assert tissue_intensity_pdf(0, 0, 3.0, same) == pytest.approx(gaussian_pdf(4.0, 2.0, 3.0))
    mixed = ModelParams(config, [1.0], [[[0.3, 0.7]]], [[[0.0, 10.0]]], [[[1.0, 1.0]]])
    expected = 0.3 * gaussian_pdf(0.0, 1.0, 0.0) + 0.7 * gaussian_pdf(10.0, 1.0, 0.0)
    assert tissue_intensity_pdf(0, 0, 0.0, mixed) == pytest.approx(expected, rel=1e-12)


def test_label_config_validation_and_lookup():
    with pytest.raises(InvalidParameterError):
        LabelConfig((0, 1), {(0, 0): 1, (0, 1): 0}, 1)
    with pytest.raises(InvalidParameterError):
        LabelConfig((0, 1), {(0, 0): 1}, 1)
    config = LabelConfig.uniform((3, 5), 2, 1, {(1, 5): 3})
    assert config.n_components(1, 5) == 3
    assert config.max_components == 3
    with pytest.raises(ConfigurationLookupError):
        config.n_components(2, 3)
    with pytest.raises(ConfigurationLookupError):
        config.label_index(4)
    assert config.subset([1]).n_components(0, 5) == 3


def test_model_params_invariants():
    config = LabelConfig.uniform((0,), 1, 2)
    with pytest.raises(InvalidParameterError):
        ModelParams(config, [1.0], [[[0.5, 0.6]]], [[[0.0, 1.0]]], [[[1.0, 1.0]]])
    with pytest.raises(InvalidParameterError):
        ModelParams(config, [1.0], [[[0.5, 0.5]]], [[[0.0, 1.0]]], [[[1.0, 1e-6]]],
                    sigma_floor=[1e-3])
    with pytest.raises(InvalidParameterError):
        ModelParams(config, [-0.1], [[[0.5, 0.5]]], [[[0.0, 1.0]]], [[[1.0, 1.0]]])


def test_atlas_must_be_normalized():
    lattice = Lattice((2, 2, 2), (1.0, 1.0, 1.0))
    with pytest.raises(InvalidParameterError):
        AtlasPrior([lattice.with_values(np.full(8, 0.6)), lattice.with_values(np.full(8, 0.6))])


def test_spatial_prior_uniform_atlas_returns_proportions():
    lattice = Lattice((4, 4, 4), (1.0, 1.0, 1.0))
    atlas = flat_atlas(lattice, 3)
    params = single_params(labels=(0, 1, 2), pi=np.array([0.2, 0.3, 0.5]))
    for k, expected in enumerate((0.2, 0.3, 0.5)):
        assert spatial_prior((1.5, 2.0, 0.5), k, params, atlas) == pytest.approx(expected)


def test_spatial_prior_one_hot_atlas():
    lattice = Lattice((3, 3, 3), (1.0, 1.0, 1.0))
    one = np.zeros(lattice.dims)
    one[1, 1, 1] = 1.0
    atlas = AtlasPrior([lattice.with_values(one), lattice.with_values(1.0 - one)])
    params = single_params(labels=(0, 1))
    assert spatial_prior((1.0, 1.0, 1.0), 0, params, atlas) == pytest.approx(1.0)
    assert spatial_prior((1.0, 1.0, 1.0), 1, params, atlas) == pytest.approx(0.0)


def test_spatial_prior_hand_evaluation():
    lattice = Lattice((3, 3, 3), (1.0, 1.0, 1.0))
    atlas = flat_atlas(lattice, 2)
    params = single_params(labels=(0, 1), pi=np.array([0.2, 0.8]))
    assert spatial_prior((1.0, 1.0, 1.0), 0, params, atlas) == pytest.approx(0.2)
    assert spatial_prior((1.0, 1.0, 1.0), 1, params, atlas) == pytest.approx(0.8)


def test_spatial_prior_follows_deformation():
    lattice = Lattice((5, 1, 1), (1.0, 1.0, 1.0))
    ramp = np.linspace(0.0, 1.0, 5).reshape(5, 1, 1)
    atlas = AtlasPrior([lattice.with_values(ramp), lattice.with_values(1.0 - ramp)])
    params = single_params(labels=(0, 1))
    state = TransformState.identity([], lattice)
    state.atlas_affine.params[0] = 1.0
    assert spatial_prior((1.0, 0.0, 0.0), 0, params, atlas, state) == pytest.approx(0.5)


def make_congruent(values_list, lattice):
    grids = [lattice.with_values(np.asarray(v, dtype=float).reshape(lattice.dims, order="F"))
             for v in values_list]
    return MultivariateImageSet(grids, lattice)


def test_label_conditional_pdf_products():
    lattice = Lattice((2, 1, 1), (1.0, 1.0, 1.0))
    images = make_congruent([[1.0, 2.0], [1.0, 2.0]], lattice)
    params = single_params(n_images=2, mu=0.0, sigma2=2.0)
    q = tissue_intensity_pdf(0, 0, 1.0, params)
    assert label_conditional_pdf((0.0, 0.0, 0.0), 0, images.subset([0]), None,
                                 params) == pytest.approx(q)
    assert label_conditional_pdf((0.0, 0.0, 0.0), 0, images, None, params) == pytest.approx(q * q)


def test_label_conditional_pdf_three_images_log_space(rng):
    lattice = Lattice((3, 1, 1), (1.0, 1.0, 1.0))
    images = make_congruent([rng.normal(size=3) for _ in range(3)], lattice)
    config = LabelConfig.uniform((0,), 3, 2)
    tau = rng.dirichlet((1.0, 1.0), size=3).reshape(3, 1, 2)
    mu = rng.normal(size=(3, 1, 2))
    sigma2 = rng.uniform(0.5, 2.0, size=(3, 1, 2))
    params = ModelParams(config, [1.0], tau, mu, sigma2)
    x = (1.0, 0.0, 0.0)
    log_total = 0.0
    for i in range(3):
        v = images.images[i].values[1, 0, 0]
        log_total += logsumexp(np.log(tau[i, 0]) - 0.5 * np.log(2 * np.pi * sigma2[i, 0])
                               - (v - mu[i, 0]) ** 2 / (2 * sigma2[i, 0]))
    assert label_conditional_pdf(x, 0, images, None, params) == pytest.approx(
        math.exp(log_total), rel=1e-12)


def test_label_conditional_pdf_uncovered_point():
    lattice = Lattice((2, 1, 1), (1.0, 1.0, 1.0))
    images = make_congruent([[1.0, 2.0]], lattice)
    with pytest.raises(EmptyDomainError):
        label_conditional_pdf((5.0, 0.0, 0.0), 0, images, None, single_params())


def test_congruent_images_form_one_region():
    lattice = Lattice((4, 4, 4), (1.0, 1.0, 1.0))
    images = make_congruent([np.zeros(64), np.ones(64)], lattice)
    partition = build_coverage_partition(images)
    assert partition.n_regions == 1
    assert partition.covering_images == [(0, 1)]
    assert partition.included.all()


def test_half_coverage_splits_in_two():
    common = Lattice((4, 4, 6), (1.0, 1.0, 1.0))
    lower = Lattice((4, 4, 3), (1.0, 1.0, 1.0))
    images = MultivariateImageSet([common.with_values(np.zeros(common.dims)),
                                   lower.with_values(np.zeros(lower.dims))], common)
    partition = build_coverage_partition(images)
    assert partition.covering_images == [(0,), (0, 1)]
    z = common.world_points[:, 2]
    assert np.all(partition.region_of[z <= 2] == 1)
    assert np.all(partition.region_of[z > 2] == 0)
    assert partition.region_sizes().sum() == common.n_voxels


def test_partition_matches_brute_force_hull_test(rng):
    common = Lattice((10, 10, 8), (2.0, 2.0, 2.0))
    grids = []
    for _ in range(3):
        origin = rng.uniform(-4, 6, size=3)
        dims = rng.integers(5, 11, size=3)
        grids.append(Lattice(tuple(dims), (2.0, 2.0, 2.0), tuple(origin)).with_values(
            np.zeros(tuple(dims))))
    images = MultivariateImageSet(grids, common)
    partition = build_coverage_partition(images)
    for n, point in enumerate(common.world_points):
        expected = tuple(i for i, grid in enumerate(grids)
                         if np.all(point >= np.asarray(grid.origin) - 1e-9)
                         and np.all(point <= np.asarray(grid.origin) + grid.lattice.extent + 1e-9))
        assert partition.covering_set(n) == expected


def test_no_coverage_raises():
    common = Lattice((2, 2, 2), (1.0, 1.0, 1.0))
    far = Lattice((2, 2, 2), (1.0, 1.0, 1.0), (50.0, 50.0, 50.0))
    images = MultivariateImageSet([far.with_values(np.zeros(8))], common)
    with pytest.raises(EmptyDomainError):
        build_coverage_partition(images)


def test_log_likelihood_single_gaussian(rng):
    lattice = Lattice((3, 3, 2), (1.0, 1.0, 1.0))
    values = rng.normal(3.0, 2.0, size=18)
    images = make_congruent([values], lattice)
    params = single_params(mu=3.0, sigma2=4.0)
    expected = np.sum(-0.5 * np.log(2 * np.pi * 4.0) - (values - 3.0) ** 2 / 8.0)
    assert total_log_likelihood(images, flat_atlas(lattice, 1), params) == pytest.approx(
        expected, rel=1e-12)


def reference_univariate_ll(values, atlas_values, pi, tau, mu, sigma2):
    total = 0.0
    for v, a in zip(values, atlas_values):
        prior = pi * a / np.dot(pi, a)
        lh = 0.0
        for k in range(len(pi)):
            lh += prior[k] * sum(tau[k, c] * gaussian_pdf(mu[k, c], sigma2[k, c], v)
                                 for c in range(tau.shape[1]))
        total += math.log(lh)
    return total


def test_log_likelihood_univariate_reference(rng):
    lattice = Lattice((4, 3, 2), (1.0, 1.0, 1.0))
    values = rng.normal(5.0, 3.0, size=24)
    images = make_congruent([values], lattice)
    a0 = rng.uniform(0.1, 0.9, size=24)
    atlas = AtlasPrior([lattice.with_values(lattice.to_volume(a0)),
                        lattice.with_values(lattice.to_volume(1.0 - a0))])
    config = LabelConfig.uniform((0, 1), 1, 2)
    tau = np.array([[[0.4, 0.6], [0.5, 0.5]]])
    mu = np.array([[[2.0, 4.0], [6.0, 9.0]]])
    sigma2 = np.array([[[1.0, 2.0], [3.0, 1.5]]])
    pi = np.array([0.3, 0.7])
    params = ModelParams(config, pi, tau, mu, sigma2)
    expected = reference_univariate_ll(values, np.column_stack([a0, 1.0 - a0]), pi, tau[0],
                                       mu[0], sigma2[0])
    assert total_log_likelihood(images, atlas, params) == pytest.approx(expected, rel=1e-10)


def test_fully_covered_embedding_matches_congruent_likelihood(rng):
    common = Lattice((5, 4, 3), (2.0, 2.0, 2.0))
    values = [rng.normal(5.0, 3.0, size=common.n_voxels),
              rng.normal(-1.0, 2.0, size=common.n_voxels)]
    congruent = make_congruent(values, common)
    wide = Lattice((9, 8, 7), (2.0, 2.0, 2.0), (-4.0, -4.0, -4.0))
    grids = []
    for v in values:
        volume = rng.normal(size=wide.dims)
        volume[2:7, 2:6, 2:5] = common.to_volume(v)
        grids.append(wide.with_values(volume))
    embedded = MultivariateImageSet(grids, common)
    partition = build_coverage_partition(embedded)
    assert partition.covering_images == [(0, 1)]
    assert partition.covered.all()

    a0 = rng.uniform(0.1, 0.9, size=common.n_voxels)
    atlas = AtlasPrior([common.with_values(common.to_volume(a0)),
                        common.with_values(common.to_volume(1.0 - a0))])
    config = LabelConfig.uniform((0, 1), 2, 2)
    params = ModelParams(config, [0.4, 0.6],
                         np.full((2, 2, 2), 0.5),
                         np.array([[[2.0, 7.0], [4.0, 9.0]], [[-3.0, 0.0], [1.0, 2.0]]]),
                         np.array([[[4.0, 2.0], [3.0, 5.0]], [[1.0, 2.0], [2.5, 1.5]]]))
    expected = total_log_likelihood(congruent, atlas, params)
    assert total_log_likelihood(embedded, atlas, params) == pytest.approx(expected, rel=1e-9)


def test_log_likelihood_is_relabeling_invariant():
    toy = ToyProblem()
    params = toy.params
    base = total_log_likelihood(toy.images, toy.atlas, params)
    swapped_atlas = AtlasPrior(list(reversed(toy.atlas.maps)), toy.atlas.labels)
    swapped = params.copy(pi=params.pi[::-1].copy(), tau=params.tau[:, ::-1].copy(),
                          mu=params.mu[:, ::-1].copy(), sigma2=params.sigma2[:, ::-1].copy())
    assert total_log_likelihood(toy.images, swapped_atlas, swapped) == pytest.approx(
        base, rel=1e-10)


def test_worker_count_does_not_change_result(rng):
    lattice = Lattice((24, 24, 16), (1.0, 1.0, 1.0))
    images = make_congruent([rng.normal(size=lattice.n_voxels)], lattice)
    params = single_params(mu=0.0, sigma2=1.0)
    atlas = flat_atlas(lattice, 1)
    single = total_log_likelihood(images, atlas, params, workers=1)
    threaded = total_log_likelihood(images, atlas, params, workers=4)
    assert single == threaded


def test_stale_coverage_is_rejected():
    toy = ToyProblem()
    partition = build_coverage_partition(toy.images)
    state = TransformState.identity([g.lattice for g in toy.images.images], toy.common)
    state.slices.params[0][:, 0] = 40.0
    with pytest.raises(InvalidParameterError):
        total_log_likelihood(toy.images, toy.atlas, toy.params, state, partition)


def test_image_coverage_update_matches_a_rebuild():
    toy = ToyProblem()
    state = TransformState.identity([g.lattice for g in toy.images.images], toy.common)
    partition = build_coverage_partition(toy.images, toy.common, state)
    state.slices.params[0][1, 0] = 9.0
    rebuilt = build_coverage_partition(toy.images, toy.common, state)
    changed = np.flatnonzero(np.any(rebuilt.covered != partition.covered, axis=0))
    assert changed.size > 0
    updated = partition.with_image_coverage(0, changed, rebuilt.covered[0, changed])
    assert np.array_equal(updated.covered, rebuilt.covered)
    assert np.array_equal(updated.region_of, rebuilt.region_of)
    assert updated.covering_images == rebuilt.covering_images


def test_zero_prior_normalizer_raises():
    lattice = Lattice((2, 1, 1), (1.0, 1.0, 1.0))
    images = make_congruent([[0.0, 0.0]], lattice)
    one = np.array([1.0, 0.0]).reshape(2, 1, 1)
    atlas = AtlasPrior([lattice.with_values(one), lattice.with_values(1.0 - one)])
    params = single_params(labels=(0, 1), pi=np.array([1.0, 0.0]))
    with pytest.raises(DegeneratePriorError) as info:
        total_log_likelihood(images, atlas, params)
    assert info.value.voxel == (1, 0, 0)
