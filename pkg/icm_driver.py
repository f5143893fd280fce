#!/usr/bin/env python3
"""
ICM Driver
==========

Iterated conditional modes over the joint segmentation/registration
problem: rounds of an EM block on the model parameters followed by a
registration block on the slice transforms and the atlas deformation, each
move gated by the log-likelihood, until a round stops paying off.

Author: MvMM Segmentation Team
Version: 1.0.0
"""

import configparser
import logging
import time
from dataclasses import dataclass, field, fields
from enum import Enum
from typing import Dict, List, Mapping, Optional, Tuple, Union

from em_engine import (
    DEFAULT_EM_ITERATIONS,
    DEFAULT_EM_TOLERANCE,
    InitMethod,
    PosteriorField,
    e_step,
    em_iterate,
    initialize_params,
)
from mvmm_errors import ConfigError
from mvmm_model import AtlasPrior, CoveragePartition, LabelConfig, ModelParams, build_coverage_partition
from registration import (
    SLICE_STEPS_PER_BLOCK,
    LikelihoodContext,
    StepControl,
    ffd_step,
    prealign_atlas,
    slice_block,
)
from transforms import DEFAULT_FFD_SPACING_MM, SliceTransformMode, TransformState
from volume_core import MultivariateImageSet

logger = logging.getLogger(__name__)
runlog = logging.getLogger("mvmm.runlog")


class SchedulePreset(Enum):
    """Registration ablation presets."""
    MVMM_MINUS = "mvmm-minus"
    MVMM_MINUS_FFD = "mvmm-minus-ffd"
    MVMM_MINUS_SC = "mvmm-minus-sc"
    MVMM_FULL = "mvmm-full"

    @property
    def flags(self) -> Tuple[bool, bool]:
        """(enable_sc, enable_ffd)"""
        return {
            SchedulePreset.MVMM_MINUS: (False, False),
            SchedulePreset.MVMM_MINUS_FFD: (False, True),
            SchedulePreset.MVMM_MINUS_SC: (True, False),
            SchedulePreset.MVMM_FULL: (True, True),
        }[self]


@dataclass
class Schedule:
    """Which blocks run and how long."""

    name: str = SchedulePreset.MVMM_FULL.value
    enable_sc: bool = True
    enable_ffd: bool = True
    em_iterations: int = DEFAULT_EM_ITERATIONS
    em_tol: float = DEFAULT_EM_TOLERANCE
    tol: float = 1e-6
    max_rounds: int = 20
    slice_mode: SliceTransformMode = SliceTransformMode.RIGID
    ffd_spacing_mm: float = DEFAULT_FFD_SPACING_MM
    prealign: bool = False
    prealign_steps: int = 20
    init: InitMethod = InitMethod.CORE
    slice_steps: int = SLICE_STEPS_PER_BLOCK

    def __post_init__(self):
        try:
            self.init = InitMethod(self.init)
        except ValueError:
            raise ConfigError(f"unknown initialization '{self.init}'", key="init")
        if self.em_iterations < 0:
            raise ConfigError("must be >= 0", key="em_iterations")
        if self.max_rounds < 1:
            raise ConfigError("must be >= 1", key="max_rounds")
        if not self.tol >= 0:
            raise ConfigError("must be >= 0", key="tol")
        if not self.em_tol >= 0:
            raise ConfigError("must be >= 0", key="em_tol")
        if not self.ffd_spacing_mm > 0:
            raise ConfigError("must be positive", key="ffd_spacing_mm")
        if self.prealign_steps < 0:
            raise ConfigError("must be >= 0", key="prealign_steps")
        if self.slice_steps < 1:
            raise ConfigError("must be >= 1", key="slice_steps")

    @classmethod
    def preset(cls, name: Union[str, SchedulePreset], **overrides) -> "Schedule":
        try:
            preset = SchedulePreset(name)
        except ValueError:
            raise ConfigError(f"unknown schedule preset '{name}'", key="preset")
        sc, ffd = preset.flags
        return cls(name=preset.value, enable_sc=sc, enable_ffd=ffd, **overrides)

    @property
    def registers(self) -> bool:
        return self.enable_sc or self.enable_ffd

    def describe(self) -> str:
        return (f"{self.name} sc={self.enable_sc} ffd={self.enable_ffd} "
                f"slice_mode={self.slice_mode.value} max_rounds={self.max_rounds} tol={self.tol:g} "
                f"init={self.init.value}")


_BOOLEAN_KEYS = ("enable_sc", "enable_ffd", "prealign")
_INTEGER_KEYS = ("em_iterations", "max_rounds", "prealign_steps", "slice_steps")
_FLOAT_KEYS = ("em_tol", "tol", "ffd_spacing_mm")
SCHEDULE_KEYS = ("preset",) + _BOOLEAN_KEYS + _INTEGER_KEYS + _FLOAT_KEYS + ("slice_mode", "init")


def _parse_bool(key: str, raw: str) -> bool:
    value = raw.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got '{raw}'", key=key)


def schedule_from_config(config: Union[str, Mapping[str, str], None]) -> Schedule:
    """
    Build a schedule from ``key = value`` text or an already parsed mapping.

    A ``preset`` key selects the registration flags first; explicit keys
    override it. Empty input yields the full schedule with its defaults.

    Raises:
        ConfigError: On unknown keys or malformed values
    """
    if config is None:
        entries: Dict[str, str] = {}
    elif isinstance(config, str):
        text = config if config.lstrip().startswith("[") else "[schedule]\n" + config
        parser = configparser.ConfigParser(delimiters=("=",), interpolation=None)
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed schedule: {exc}")
        unknown_sections = [s for s in parser.sections() if s != "schedule"]
        if unknown_sections:
            raise ConfigError(f"unknown section '{unknown_sections[0]}'")
        entries = dict(parser["schedule"]) if parser.has_section("schedule") else {}
    else:
        entries = {str(k).strip().lower(): str(v) for k, v in config.items()}

    for key in entries:
        if key not in SCHEDULE_KEYS:
            raise ConfigError("unknown schedule key", key=key)

    overrides = {}
    for key, raw in entries.items():
        try:
            if key in _BOOLEAN_KEYS:
                overrides[key] = _parse_bool(key, raw)
            elif key in _INTEGER_KEYS:
                overrides[key] = int(raw)
            elif key in _FLOAT_KEYS:
                overrides[key] = float(raw)
            elif key == "slice_mode":
                overrides[key] = SliceTransformMode(raw.strip().lower())
            elif key == "init":
                overrides[key] = InitMethod(raw.strip().lower())
        except ValueError:
            raise ConfigError(f"invalid value '{raw}'", key=key)

    preset = entries.get("preset", SchedulePreset.MVMM_FULL.value).strip().lower()
    base = Schedule.preset(preset)
    settings = {f.name: getattr(base, f.name) for f in fields(Schedule)}
    settings.update(overrides)
    if ("enable_sc" in overrides or "enable_ffd" in overrides) and "preset" not in entries:
        settings["name"] = "custom"
    return Schedule(**settings)


@dataclass
class IcmState:
    """
    Joint state of one segmentation run.

    ``ll_trace`` holds (phase, log-likelihood) pairs with phases ``em``,
    ``sc``, ``ffd`` and ``affine``; it is non-decreasing up to reassociation
    error.
    """

    params: ModelParams
    posteriors: PosteriorField
    transforms: TransformState
    coverage: CoveragePartition
    ll_trace: List[Tuple[str, float]] = field(default_factory=list)
    round: int = 0
    converged: bool = False
    accepted: Dict[str, int] = field(default_factory=dict)
    rejected: Dict[str, int] = field(default_factory=dict)

    @property
    def log_likelihood(self) -> float:
        return self.ll_trace[-1][1] if self.ll_trace else self.posteriors.log_likelihood


def _phase_record(round_: int, phase: str, before: float, after: float,
                  accepted: int, rejected: int, started: float) -> None:
    runlog.info("PHASE round=%d phase=%s ll_before=%.12g ll_after=%.12g accepted=%d "
                "rejected=%d seconds=%.3f", round_, phase, before, after, accepted, rejected,
                time.perf_counter() - started)


def run_icm(images: MultivariateImageSet, atlas: AtlasPrior, config: LabelConfig,
            schedule: Optional[Schedule] = None, transforms: Optional[TransformState] = None,
            workers: int = 1, seed: Optional[int] = None) -> IcmState:
    """
    Alternate EM and registration blocks until the round gain falls below tolerance.

    Args:
        images: Image set on its common space
        atlas: Normalized atlas prior on the common space
        config: Label/component configuration
        schedule: Block schedule (full MvMM if None)
        transforms: Starting registration state (identity if None)
        workers: Thread count for voxel evaluation
        seed: Run seed, recorded in the run log

    Returns:
        Final IcmState with posteriors of the final parameters and transforms
    """
    schedule = schedule or Schedule()
    lattice = images.common_space
    if transforms is None:
        transforms = TransformState.identity([grid.lattice for grid in images.images], lattice,
                                             schedule.slice_mode, schedule.ffd_spacing_mm)
    coverage = build_coverage_partition(images, lattice, transforms)
    runlog.info("RUN seed=%s schedule=%s images=%d voxels=%d subregions=%d workers=%d",
                seed, schedule.name, images.n_images, int(coverage.included.sum()),
                coverage.n_regions, workers)

    params = initialize_params(images, atlas, config, coverage, transforms, schedule.init)
    trace: List[Tuple[str, float]] = []
    accepted = {"sc": 0, "ffd": 0, "affine": 0}
    rejected = {"sc": 0, "ffd": 0, "affine": 0}

    if schedule.prealign and schedule.prealign_steps > 0:
        started = time.perf_counter()
        context = LikelihoodContext(images, atlas, params, transforms, coverage, workers)
        before = context.log_likelihood()
        trace.append(("affine", before))
        outcome = prealign_atlas(context, schedule.prealign_steps)
        transforms = outcome.context.transforms
        trace.append(("affine", outcome.log_likelihood))
        accepted["affine"] += outcome.accepted
        rejected["affine"] += outcome.rejected
        _phase_record(0, "affine", before, outcome.log_likelihood, outcome.accepted,
                      outcome.rejected, started)

    slice_controls: Dict[Tuple[int, int], StepControl] = {}
    ffd_control = StepControl.for_ffd(transforms.ffd.phi.size)
    converged = False
    round_ = 0
    posteriors = None
    for round_ in range(1, schedule.max_rounds + 1):
        started = time.perf_counter()
        params, posteriors, em_trace = em_iterate(images, atlas, params, transforms, coverage,
                                                  schedule.em_iterations, schedule.em_tol, workers)
        round_start = em_trace[0]
        trace.extend(("em", ll) for ll in (em_trace if not trace else em_trace[1:]))
        _phase_record(round_, "em", em_trace[0], em_trace[-1], len(em_trace) - 1, 0, started)
        if not schedule.registers:
            converged = True
            break

        context = LikelihoodContext(images, atlas, params, transforms, coverage, workers)
        current = em_trace[-1]
        if schedule.enable_sc:
            started = time.perf_counter()
            outcome = slice_block(context, slice_controls, schedule.slice_steps)
            context = outcome.context
            after = context.log_likelihood()
            trace.append(("sc", after))
            accepted["sc"] += outcome.accepted
            rejected["sc"] += outcome.rejected
            _phase_record(round_, "sc", current, after, outcome.accepted, outcome.rejected,
                          started)
            current = after
        if schedule.enable_ffd:
            started = time.perf_counter()
            outcome = ffd_step(context, ffd_control, current)
            context = outcome.context
            trace.append(("ffd", outcome.log_likelihood))
            accepted["ffd"] += outcome.accepted
            rejected["ffd"] += outcome.rejected
            _phase_record(round_, "ffd", current, outcome.log_likelihood, outcome.accepted,
                          outcome.rejected, started)
            current = outcome.log_likelihood
        transforms, coverage = context.transforms, context.coverage

        gain = current - round_start
        runlog.info("ROUND round=%d ll=%.12g gain=%.6g", round_, current, gain)
        if gain < schedule.tol * abs(current):
            converged = True
            break

    if schedule.registers:
        posteriors = e_step(images, atlas, params, transforms, coverage, workers)
    runlog.info("DONE rounds=%d ll=%.12g converged=%s sc_accepted=%d ffd_accepted=%d",
                round_, posteriors.log_likelihood, converged, accepted["sc"], accepted["ffd"])
    return IcmState(params, posteriors, transforms, coverage, trace, round_, converged,
                    accepted, rejected)
