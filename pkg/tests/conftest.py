"""Shared fixtures: toy likelihood problems and small phantoms."""

import numpy as np
import pytest

from em_engine import initialize_params
from mvmm_model import AtlasPrior, LabelConfig
from phantom_metrics import PhantomSpec, default_sequences, renoised
from volume_core import Lattice, MultivariateImageSet


def smooth_field(lattice: Lattice, phase: float = 0.0) -> np.ndarray:
    p = lattice.world_points
    values = (100.0 + 40.0 * np.sin(p[:, 0] / 4.0 + phase) + 30.0 * np.cos(p[:, 1] / 5.0 - phase)
              + 5.0 * p[:, 2])
    return lattice.to_volume(values)


def smooth_atlas(lattice: Lattice, labels=(0, 1)) -> AtlasPrior:
    p = lattice.world_points
    a0 = np.clip(0.5 + 0.35 * np.sin(p[:, 0] / 5.0) * np.cos(p[:, 1] / 7.0) + 0.01 * p[:, 2],
                 0.05, 0.95)
    maps = [lattice.with_values(lattice.to_volume(a0)),
            lattice.with_values(lattice.to_volume(1.0 - a0))]
    return AtlasPrior(maps, labels)


class ToyProblem:
    """Two smooth images larger than an (8, 8, 4) common space, two labels, smooth atlas."""

    def __init__(self, components: int = 2):
        self.common = Lattice((8, 8, 4), (2.0, 2.0, 2.0), (0.0, 0.0, 0.0))
        first = Lattice((14, 14, 4), (2.0, 2.0, 2.0), (-6.0, -6.0, 0.0))
        second = Lattice((14, 14, 3), (2.0, 2.0, 3.0), (-6.0, -6.0, 0.0))
        self.images = MultivariateImageSet(
            [first.with_values(smooth_field(first)), second.with_values(smooth_field(second, 1.3))],
            self.common, ["first", "second"])
        atlas_lattice = Lattice((12, 12, 8), (2.0, 2.0, 2.0), (-4.0, -4.0, -4.0))
        self.atlas = smooth_atlas(atlas_lattice)
        self.config = LabelConfig.uniform((0, 1), 2, components)
        self.params = initialize_params(self.images, self.atlas, self.config)


@pytest.fixture
def toy():
    return ToyProblem()


def small_spec(**overrides) -> PhantomSpec:
    """Coarse phantom: 20 x 20 x 12 common voxels."""
    settings = dict(dims=(20, 20, 12), spacing=(4.0, 4.0, 5.0))
    settings.update(overrides)
    return PhantomSpec(**settings)


def quiet_sequences(std: float = 1.0):
    """Default sequences with every tissue standard deviation replaced by ``std``."""
    return [renoised(seq, std) for seq in default_sequences()]


@pytest.fixture
def small_phantom_spec():
    return small_spec()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
