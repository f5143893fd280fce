import numpy as np
import pytest
from numpy.testing import assert_allclose

from conftest import quiet_sequences, small_spec
from mvmm_errors import EvaluationError, SpecError
from phantom_metrics import (
    DEFAULT_INTENSITIES,
    DEFAULT_SLICE_SPACING,
    PHANTOM_LABELS,
    TISSUE_LABEL,
    TISSUES,
    SequenceSpec,
    acd,
    boundary_points,
    dice,
    generate_phantom,
    inject_random_ffd,
    inject_slice_shifts,
    make_probabilistic_atlas,
    render_sequence,
    sequence_lattice,
    stream_rng,
    tissue_at,
    truncate_coverage,
)
from transforms import SliceAffineSet, apply_slice_transform
from volume_core import LabelVolume, Lattice, trilinear_sample


def test_generation_is_deterministic():
    spec = small_spec(shift_fraction=0.3, ffd_sigma_mm=1.0, seed=9)
    first, truth_a = generate_phantom(spec)
    second, truth_b = generate_phantom(spec)
    for a, b in zip(first.images, second.images):
        assert np.array_equal(a.values, b.values)
    for a, b in zip(truth_a.shifts, truth_b.shifts):
        assert np.array_equal(a, b)
    assert np.array_equal(truth_a.ffd.phi, truth_b.ffd.phi)
    other, _ = generate_phantom(small_spec(shift_fraction=0.3, ffd_sigma_mm=1.0, seed=10))
    assert not np.array_equal(first.images[0].values, other.images[0].values)


def test_labels_follow_tissues(small_phantom_spec):
    _, truth = generate_phantom(small_phantom_spec)
    assert np.array_equal(truth.labels.labels, TISSUE_LABEL[truth.tissues.labels])
    assert truth.labels.present_labels() == list(PHANTOM_LABELS)
    scar = truth.tissues.labels == TISSUES.index("scar")
    assert scar.any()
    assert np.all(truth.labels.labels[scar] == 1)


def test_contrast_table():
    assert DEFAULT_INTENSITIES["bssfp"]["scar"] == DEFAULT_INTENSITIES["bssfp"]["myocardium"]
    assert DEFAULT_INTENSITIES["lge"]["scar"][0] > DEFAULT_INTENSITIES["lge"]["myocardium"][0]
    assert DEFAULT_INTENSITIES["bssfp"]["blood"][0] > DEFAULT_INTENSITIES["bssfp"]["myocardium"][0]
    assert DEFAULT_SLICE_SPACING["t2"] == 3 * DEFAULT_SLICE_SPACING["lge"]


def test_sequence_geometry(small_phantom_spec):
    images, _ = generate_phantom(small_phantom_spec)
    lge = images.images[images.names.index("lge")]
    t2 = images.images[images.names.index("t2")]
    assert t2.spacing[2] / lge.spacing[2] == pytest.approx(3.0)
    lo, hi = small_phantom_spec.lattice.hull()
    for grid in images.images:
        g_lo, g_hi = grid.lattice.hull()
        assert np.all(g_lo[:2] <= lo[:2]) and np.all(g_hi[:2] >= hi[:2])


def test_noiseless_render_is_table_lookup(small_phantom_spec):
    seq = quiet_sequences(std=0.0)[1]
    grid = render_sequence(small_phantom_spec, seq, stream_rng(0, 1))
    tissue = tissue_at(small_phantom_spec, grid.lattice.world_points)
    table = np.array([seq.intensities[name][0] for name in TISSUES])
    assert np.array_equal(grid.flat_values(), table[tissue])


def test_sequence_spec_validation():
    with pytest.raises(SpecError):
        SequenceSpec("lge", 0.0)
    with pytest.raises(SpecError):
        SequenceSpec("custom", 5.0, intensities={"air": (0.0, 1.0)})
    with pytest.raises(SpecError):
        small_spec(shift_fraction=1.5)


def labels_on(lattice, flat):
    return LabelVolume(lattice, lattice.to_volume(np.asarray(flat)))


def test_sharp_atlas_is_one_hot():
    lattice = Lattice((6, 6, 6), (2.0, 2.0, 2.0))
    flat = (lattice.world_points[:, 0] > 5).astype(int)
    atlas = make_probabilistic_atlas(labels_on(lattice, flat), 0.1)
    assert np.array_equal(atlas.maps[1].flat_values(), flat.astype(float))


def test_atlas_is_even_on_the_half_space_boundary():
    lattice = Lattice((10, 6, 6), (2.0, 2.0, 2.0))
    flat = (lattice.world_points[:, 0] > 9).astype(int)
    atlas = make_probabilistic_atlas(labels_on(lattice, flat), 4.0, (0, 1))
    values, _ = atlas.sample(np.array([[9.0, 5.0, 5.0]]))
    assert_allclose(values[0], (0.5, 0.5), atol=1e-12)
    assert atlas.normalization_error() < 1e-12


def ramp_image():
    lattice = Lattice((20, 16, 4), (1.5, 1.5, 5.0))
    p = lattice.world_points
    return lattice.with_values(lattice.to_volume(2.0 * p[:, 0] + 3.0 * p[:, 1] + p[:, 2]))


def test_zero_shift_changes_nothing():
    image = ramp_image()
    moved, shifts = inject_slice_shifts(image, explicit={})
    assert np.array_equal(moved.values, image.values)
    assert not shifts.any()


def test_single_slice_moves_by_its_shift():
    image = ramp_image()
    moved, shifts = inject_slice_shifts(image, explicit={2: (3.0, 0.0)})
    assert_allclose(shifts[2], (3.0, 0.0))
    for s in (0, 1, 3):
        assert np.array_equal(moved.values[:, :, s], image.values[:, :, s])
    # content moved 2 voxels along x; interior only
    assert_allclose(moved.values[2:, :, 2], image.values[:-2, :, 2])


def test_recorded_shift_is_undone_by_slice_transform():
    image = ramp_image()
    moved, shifts = inject_slice_shifts(image, explicit={1: (2.1, -1.7), 3: (-0.8, 2.4)})
    slices = SliceAffineSet.identity([image.lattice])
    slices.params[0][:, :2] = shifts
    lattice = image.lattice
    points = lattice.world_points
    interior = np.all((points[:, :2] > 6.0) & (points[:, :2] < lattice.extent[:2] - 6.0), axis=1)
    sampled = trilinear_sample(moved, apply_slice_transform(slices, 0, points[interior]))
    assert_allclose(sampled, image.flat_values()[interior], atol=1e-9)


def test_random_shifts_touch_the_requested_share():
    image = ramp_image()
    _, shifts = inject_slice_shifts(image, fraction=0.5, sigma_mm=2.0, rng=stream_rng(3, 101))
    assert np.count_nonzero(np.any(shifts != 0, axis=1)) == 2


def test_ffd_injection():
    image = ramp_image()
    same, ffd = inject_random_ffd(image, sigma_mm=0.0)
    assert ffd.is_identity()
    assert np.array_equal(same.values, image.values)
    warped, ffd = inject_random_ffd(image, seed=4)
    assert ffd.spacing == (20.0, 20.0, 20.0)
    assert not np.array_equal(warped.values, image.values)
    disp = ffd.displacement(image.lattice.world_points)
    assert np.max(np.abs(disp)) <= np.max(np.abs(ffd.phi)) + 1e-12


def test_truncation():
    lattice = Lattice((40, 40, 30), (2.0, 2.0, 2.0))
    image = lattice.with_values(np.arange(lattice.n_voxels, dtype=float))
    same, record = truncate_coverage(image, 0.0, axis=0, end="low")
    assert record.removed == 0
    assert np.array_equal(same.values, image.values)

    cut, record = truncate_coverage(image, 40.0, axis=0, end="low")
    assert record.removed == 20 and record.extent_mm == 40.0
    assert cut.dims == (20, 40, 30)
    assert cut.origin[0] == 40.0
    assert np.array_equal(cut.values, image.values[20:])
    covered = cut.lattice.contains(lattice.world_points)
    assert np.count_nonzero(covered) == 20 * 40 * 30

    with pytest.raises(SpecError):
        truncate_coverage(image, 60.0, axis=0)


def test_truncated_sequence_is_recorded():
    sequences = quiet_sequences()
    sequences[2].truncate_mm = 20.0
    spec = small_spec(sequences=sequences)
    images, truth = generate_phantom(spec)
    record = truth.truncations["t2"]
    full = sequence_lattice(spec, sequences[2])
    assert images.images[2].dims[record.axis] == full.dims[record.axis] - record.removed


def test_dice_examples():
    lattice = Lattice((4, 2, 1), (1.0, 1.0, 1.0))
    truth = labels_on(lattice, [1, 1, 1, 1, 0, 0, 0, 0])
    assert dice(truth, truth, 1) == 1.0
    assert dice(labels_on(lattice, [0, 0, 0, 0, 1, 1, 1, 1]), truth, 1) == 0.0
    assert dice(labels_on(lattice, [1, 1, 0, 0, 1, 1, 0, 0]), truth, 1) == pytest.approx(0.5)
    assert dice(truth, truth, 7) == 1.0


def plate(lattice, z):
    flat = np.zeros(lattice.n_voxels, dtype=int)
    flat[lattice.world_points[:, 2] == z] = 1
    return labels_on(lattice, flat)


def test_acd_between_parallel_plates():
    lattice = Lattice((10, 10, 20), (1.0, 1.0, 1.0))
    assert acd(plate(lattice, 5.0), plate(lattice, 10.0), 1) == pytest.approx(5.0)
    assert acd(plate(lattice, 5.0), plate(lattice, 5.0), 1) == 0.0


def test_acd_matches_brute_force(rng):
    lattice = Lattice((12, 12, 8), (1.0, 1.5, 2.0))
    seg = labels_on(lattice, (rng.random(lattice.n_voxels) < 0.3).astype(int))
    truth = labels_on(lattice, (rng.random(lattice.n_voxels) < 0.3).astype(int))
    a, b = boundary_points(seg, 1), boundary_points(truth, 1)
    distances = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)
    expected = 0.5 * (distances.min(axis=1).mean() + distances.min(axis=0).mean())
    assert acd(seg, truth, 1) == pytest.approx(expected, rel=1e-12)


def test_boundary_excludes_interior():
    lattice = Lattice((5, 5, 5), (1.0, 1.0, 1.0))
    block = labels_on(lattice, np.ones(lattice.n_voxels, dtype=int))
    assert len(boundary_points(block, 1)) == 125 - 27


def test_metric_errors():
    lattice = Lattice((10, 10, 20), (1.0, 1.0, 1.0))
    empty = labels_on(lattice, np.zeros(lattice.n_voxels, dtype=int))
    with pytest.raises(EvaluationError):
        acd(empty, plate(lattice, 5.0), 1)
    with pytest.raises(EvaluationError):
        acd(plate(lattice, 5.0), empty, 1)
    other = Lattice((10, 10, 10), (1.0, 1.0, 1.0))
    with pytest.raises(EvaluationError):
        dice(plate(other, 5.0), plate(lattice, 5.0), 1)
