import numpy as np
import pytest
from numpy.testing import assert_allclose

from mvmm_errors import InvalidParameterError
from transforms import (
    AtlasAffine,
    FfdDeformation,
    SliceAffineSet,
    SliceTransformMode,
    TransformState,
    apply_ffd,
    apply_slice_transform,
    cubic_bspline_weights,
)
from volume_core import Lattice

IMAGE = Lattice((11, 9, 5), (2.0, 2.0, 4.0), (0.0, 0.0, 0.0))


def one_image(mode=SliceTransformMode.RIGID) -> SliceAffineSet:
    return SliceAffineSet.identity([IMAGE], mode)


def test_identity_slice_transform_is_exact(rng):
    points = rng.uniform(0, 16, size=(30, 3))
    assert np.array_equal(apply_slice_transform(one_image(), 0, points), points)


def test_translation_moves_in_plane_only():
    slices = one_image()
    slices.params[0][2] = (3.0, 0.0, 0.0)
    x = np.array([5.0, 4.0, 8.0])
    assert_allclose(apply_slice_transform(slices, 0, x), x + (3.0, 0.0, 0.0))
    other = np.array([5.0, 4.0, 0.0])
    assert_allclose(apply_slice_transform(slices, 0, other), other)


def test_half_turn_reflects_through_slice_center():
    slices = one_image()
    slices.params[0][1] = (0.0, 0.0, np.pi)
    center = slices.slice_center(0)
    x = np.array([3.0, 1.0, 4.0])
    expected = np.array([2 * center[0] - 3.0, 2 * center[1] - 1.0, 4.0])
    assert_allclose(apply_slice_transform(slices, 0, x), expected, atol=1e-12)


def test_points_beyond_z_extent_are_unchanged():
    slices = one_image()
    slices.params[0][:] = (1.0, 2.0, 0.3)
    x = np.array([[4.0, 4.0, -3.0], [4.0, 4.0, 30.0]])
    assert_allclose(apply_slice_transform(slices, 0, x), x)


@pytest.mark.parametrize("mode", list(SliceTransformMode))
def test_inverse_undoes_forward(mode, rng):
    slices = one_image(mode)
    slices.params[0][:] = rng.normal(scale=0.1, size=slices.params[0].shape)
    points = np.column_stack([rng.uniform(0, 20, 40), rng.uniform(0, 16, 40),
                              rng.choice(IMAGE.world_points[:, 2], 40)])
    moved = apply_slice_transform(slices, 0, points)
    assert_allclose(apply_slice_transform(slices, 0, moved, inverse=True), points, atol=1e-10)


@pytest.mark.parametrize("mode", list(SliceTransformMode))
def test_parameter_jacobian_matches_finite_differences(mode, rng):
    slices = one_image(mode)
    slices.params[0][:] = rng.normal(scale=0.2, size=slices.params[0].shape)
    points = np.column_stack([rng.uniform(0, 20, 10), rng.uniform(0, 16, 10),
                              np.full(10, 8.0)])
    slice_ids, _ = slices.slice_of(0, points)
    jac = slices.parameter_jacobian(0, points, slice_ids)
    h = 1e-6
    for p in range(mode.n_params):
        plus, minus = slices.copy(), slices.copy()
        plus.params[0][2, p] += h
        minus.params[0][2, p] -= h
        fd = (apply_slice_transform(plus, 0, points) - apply_slice_transform(minus, 0, points))
        assert_allclose(jac[:, p], fd[:, :2] / (2 * h), atol=1e-6)


def test_parameter_table_shape_is_checked():
    with pytest.raises(InvalidParameterError):
        SliceAffineSet([IMAGE], [np.zeros((4, 3))])


def test_bspline_weights_partition_unity(rng):
    t = rng.uniform(0, 1, 50)
    assert_allclose(cubic_bspline_weights(t).sum(axis=-1), 1.0)
    assert_allclose(cubic_bspline_weights(0.0), (1 / 6, 2 / 3, 1 / 6, 0.0))


def test_zero_ffd_is_identity(rng):
    ffd = FfdDeformation.covering(IMAGE, 10.0)
    points = rng.uniform(0, 16, size=(20, 3))
    assert_allclose(apply_ffd(ffd, points), points)


def test_single_control_point_at_knot():
    ffd = FfdDeformation.covering(IMAGE, 10.0)
    delta = 1.7
    ffd.phi[2, 2, 2] = (delta, 0.0, 0.0)
    x = ffd.control_lattice.voxel_to_world((2, 2, 2))
    # center weight 2/3 on each axis
    assert_allclose(apply_ffd(ffd, x), x + ((2 / 3) ** 3 * delta, 0.0, 0.0), atol=1e-12)


def test_uniform_displacement_is_reproduced():
    ffd = FfdDeformation.covering(IMAGE, 10.0)
    ffd.phi[..., 0] = 1.0
    points = IMAGE.world_points
    assert_allclose(ffd.basis_sum(points), 1.0)
    assert_allclose(apply_ffd(ffd, points), points + (1.0, 0.0, 0.0), atol=1e-12)


def test_displacement_bounded_by_controls(rng):
    ffd = FfdDeformation.covering(IMAGE, 10.0)
    ffd.phi = rng.normal(scale=2.0, size=ffd.phi.shape)
    disp = ffd.displacement(IMAGE.world_points)
    bound = np.max(np.abs(ffd.phi))
    assert np.max(np.abs(disp)) <= bound + 1e-12


def test_accumulate_is_adjoint_of_displacement(rng):
    ffd = FfdDeformation.covering(IMAGE, 10.0)
    ffd.phi = rng.normal(size=ffd.phi.shape)
    points = rng.uniform(0, 16, size=(50, 3))
    vectors = rng.normal(size=(50, 3))
    lhs = np.sum(ffd.displacement(points) * vectors)
    rhs = np.sum(ffd.accumulate(points, vectors) * ffd.phi)
    assert lhs == pytest.approx(rhs, rel=1e-10)


def test_atlas_affine_identity_and_jacobian(rng):
    affine = AtlasAffine.centered_on(IMAGE)
    points = rng.uniform(0, 16, size=(10, 3))
    assert_allclose(affine.apply(points), points)
    affine.params = rng.normal(scale=0.05, size=12)
    jac = affine.parameter_jacobian(points)
    h = 1e-6
    for p in range(12):
        up, down = affine.params.copy(), affine.params.copy()
        up[p] += h
        down[p] -= h
        fd = (affine.copy(up).apply(points) - affine.copy(down).apply(points)) / (2 * h)
        assert_allclose(jac[:, p], fd, atol=1e-6)


def test_transform_state_composes_ffd_then_affine(rng):
    state = TransformState.identity([IMAGE], IMAGE, ffd_spacing_mm=10.0)
    state.ffd.phi[..., 1] = 2.0
    state.atlas_affine.params[0] = 5.0
    point = np.array([[8.0, 6.0, 8.0]])
    assert_allclose(state.atlas_points(point), point + (5.0, 2.0, 0.0), atol=1e-12)
    copy = state.copy()
    copy.ffd.phi[...] = 0.0
    assert state.ffd.phi[0, 0, 0, 1] == 2.0
