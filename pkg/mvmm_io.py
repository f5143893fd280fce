#!/usr/bin/env python3
"""
MvMM File Formats
=================

Readers and writers for every artifact the suite exchanges:

- volumes: a ``key = value`` header (``.vhdr``) next to a raw little-endian
  voxel payload (``.vraw``), x-fastest;
- model parameters: one INI section per (image, label, component);
- transforms: one line per slice plus the FFD lattice and control table;
- run configurations and phantom specifications: INI files;
- tables (LL traces, metrics, ablations, coverage): whitespace-aligned text
  written through pandas.

Floats are written with ``repr`` so every text format round-trips exactly.

Author: MvMM Segmentation Team
Version: 1.0.0
"""

import configparser
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from icm_driver import Schedule, schedule_from_config
from mvmm_errors import ConfigError, MvmmError, SpecError
from mvmm_model import AtlasPrior, LabelConfig, ModelParams
from phantom_metrics import DEFAULT_INTENSITIES, DEFAULT_SLICE_SPACING, TISSUES, PhantomSpec, SequenceSpec
from transforms import AtlasAffine, FfdDeformation, SliceAffineSet, SliceTransformMode, TransformState
from volume_core import LabelVolume, Lattice, MultivariateImageSet, VoxelGrid

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

PAYLOAD_DTYPES = {"f32le": "<f4"}


def _new_parser() -> configparser.ConfigParser:
    parser = configparser.ConfigParser(delimiters=("=",), interpolation=None,
                                       inline_comment_prefixes=("#",))
    return parser


def _read_ini(path: Path, error=ConfigError) -> configparser.ConfigParser:
    if not path.is_file():
        raise error("file not found", path=str(path))
    parser = _new_parser()
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise error(f"malformed file: {exc}", path=str(path))
    return parser


def _floats(raw: str, count: Optional[int], key: str, path: Path, error=ConfigError) -> List[float]:
    try:
        values = [float(v) for v in raw.replace(",", " ").split()]
    except ValueError:
        raise error(f"expected numbers, got '{raw}'", key=key, path=str(path))
    if count is not None and len(values) != count:
        raise error(f"expected {count} values, got {len(values)}", key=key, path=str(path))
    return values


def _ints(raw: str, count: Optional[int], key: str, path: Path, error=ConfigError) -> List[int]:
    values = _floats(raw, count, key, path, error)
    if any(v != int(v) for v in values):
        raise error(f"expected integers, got '{raw}'", key=key, path=str(path))
    return [int(v) for v in values]


def _fmt(values: Iterable[float]) -> str:
    return " ".join(repr(float(v)) for v in values)


def _reject_unknown(section: configparser.SectionProxy, allowed: Sequence[str], path: Path,
                    error=ConfigError) -> None:
    for key in section:
        if key not in allowed:
            raise error(f"unknown key in section [{section.name}]", key=key, path=str(path))


# ---------------------------------------------------------------- volumes

VOLUME_KEYS = ("dims", "spacing", "origin", "dtype")


def payload_path(header: Path) -> Path:
    return header.with_suffix(".vraw")


def write_volume(path: PathLike, grid: Union[VoxelGrid, LabelVolume], dtype: str = "f32le") -> Path:
    """
    Write a ``key = value`` volume header and its raw payload next to it.

    Label volumes are stored as floats too; integer labels survive ``f32le`` exactly.
    """
    header = Path(path).with_suffix(".vhdr")
    if dtype not in PAYLOAD_DTYPES:
        raise ConfigError(f"unsupported payload type '{dtype}'", key="dtype")
    if isinstance(grid, LabelVolume):
        lattice, values = grid.lattice, grid.labels
    else:
        lattice, values = grid.lattice, grid.values
    lines = [
        f"dims = {' '.join(str(d) for d in lattice.dims)}",
        f"spacing = {_fmt(lattice.spacing)}",
        f"origin = {_fmt(lattice.origin)}",
        f"dtype = {dtype}",
    ]
    header.parent.mkdir(parents=True, exist_ok=True)
    header.write_text("\n".join(lines) + "\n", encoding="utf-8")
    np.asarray(values).ravel(order="F").astype(PAYLOAD_DTYPES[dtype]).tofile(payload_path(header))
    return header


def _read_volume_header(header: Path) -> configparser.SectionProxy:
    if not header.is_file():
        raise ConfigError("file not found", path=str(header))
    text = header.read_text(encoding="utf-8")
    if not text.lstrip().startswith("["):
        text = "[volume]\n" + text
    parser = _new_parser()
    try:
        parser.read_string(text, source=str(header))
    except configparser.Error as exc:
        raise ConfigError(f"malformed file: {exc}", path=str(header))
    if parser.sections() != ["volume"]:
        raise ConfigError("expected plain 'key = value' lines", path=str(header))
    return parser["volume"]


def _read_payload(path: PathLike) -> Tuple[Lattice, np.ndarray]:
    header = Path(path)
    section = _read_volume_header(header)
    # older headers name their payload explicitly
    _reject_unknown(section, VOLUME_KEYS + ("data",), header)
    for key in VOLUME_KEYS:
        if key not in section:
            raise ConfigError("missing key", key=key, path=str(header))
    try:
        lattice = Lattice(_ints(section["dims"], 3, "dims", header),
                          _floats(section["spacing"], 3, "spacing", header),
                          _floats(section["origin"], 3, "origin", header))
    except MvmmError as exc:
        raise ConfigError(str(exc), path=str(header))
    dtype = section["dtype"].strip()
    if dtype not in PAYLOAD_DTYPES:
        raise ConfigError(f"unsupported payload type '{dtype}'", key="dtype", path=str(header))
    data = header.parent / section["data"].strip() if "data" in section else payload_path(header)
    if not data.is_file():
        raise ConfigError("voxel payload not found", path=str(data))
    values = np.fromfile(data, dtype=PAYLOAD_DTYPES[dtype])
    if values.size != lattice.n_voxels:
        raise ConfigError(f"payload holds {values.size} voxels, header declares "
                          f"{lattice.n_voxels}", path=str(data))
    return lattice, values


def read_volume(path: PathLike) -> VoxelGrid:
    lattice, values = _read_payload(path)
    return lattice.with_values(values.astype(np.float64))


def read_label_volume(path: PathLike) -> LabelVolume:
    lattice, values = _read_payload(path)
    try:
        return LabelVolume(lattice, values)
    except MvmmError as exc:
        raise ConfigError(str(exc), path=str(path))


# ---------------------------------------------------------------- model parameters

def write_params(path: PathLike, params: ModelParams) -> Path:
    """Write model parameters; one ``[component i:k:c]`` section per real component."""
    config = params.config
    lines = [
        "[model]",
        f"labels = {' '.join(str(k) for k in config.labels)}",
        f"images = {config.n_images}",
        f"pi = {_fmt(params.pi)}",
        f"sigma_floor = {_fmt(params.sigma_floor)}",
    ]
    for i in range(config.n_images):
        for position, k in enumerate(config.labels):
            for c in range(config.n_components(i, k)):
                lines += ["", f"[component {i}:{k}:{c}]",
                          f"tau = {float(params.tau[i, position, c])!r}",
                          f"mu = {float(params.mu[i, position, c])!r}",
                          f"sigma2 = {float(params.sigma2[i, position, c])!r}"]
    out = Path(path)
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out


def read_params(path: PathLike) -> ModelParams:
    source = Path(path)
    parser = _read_ini(source)
    if not parser.has_section("model"):
        raise ConfigError("missing [model] section", path=str(source))
    model = parser["model"]
    _reject_unknown(model, ("labels", "images", "pi", "sigma_floor"), source)
    labels = _ints(model.get("labels", ""), None, "labels", source)
    n_images = _ints(model.get("images", ""), 1, "images", source)[0]
    pi = _floats(model.get("pi", ""), len(labels), "pi", source)
    floors = _floats(model.get("sigma_floor", ""), n_images, "sigma_floor", source)

    entries: Dict[Tuple[int, int, int], Tuple[float, float, float]] = {}
    for name in parser.sections():
        if name == "model":
            continue
        if not name.startswith("component "):
            raise ConfigError(f"unknown section [{name}]", path=str(source))
        key = _ints(name[len("component "):].replace(":", " "), 3, name, source)
        section = parser[name]
        _reject_unknown(section, ("tau", "mu", "sigma2"), source)
        entries[tuple(key)] = tuple(_floats(section.get(f, ""), 1, f, source)[0]
                                    for f in ("tau", "mu", "sigma2"))
    counts = {(i, k): 1 + max((c for (ii, kk, c) in entries if (ii, kk) == (i, k)), default=-1)
              for i in range(n_images) for k in labels}
    try:
        config = LabelConfig(tuple(labels), counts, n_images)
        shape = (n_images, len(labels), config.max_components)
        tau, mu, sigma2 = np.zeros(shape), np.zeros(shape), np.ones(shape)
        for (i, k, c), (t, m, s) in entries.items():
            position = config.label_index(k)
            tau[i, position, c], mu[i, position, c], sigma2[i, position, c] = t, m, s
        return ModelParams(config, pi, tau, mu, sigma2, floors)
    except MvmmError as exc:
        raise ConfigError(str(exc), path=str(source))


# ---------------------------------------------------------------- transforms

def write_transforms(path: PathLike, transforms: TransformState,
                     header: Optional[str] = None) -> Path:
    """
    Write the registration state.

    Lines: ``slice_mode <mode>``; ``slice <image> <slice> <params...>``;
    ``ffd_dims``/``ffd_spacing``/``ffd_origin``; ``phi <a> <b> <c> <dx> <dy> <dz>``
    for every control point; ``atlas_center`` and ``atlas_affine``.
    """
    slices, ffd, affine = transforms.slices, transforms.ffd, transforms.atlas_affine
    lines = [f"# {header}"] if header else []
    lines.append(f"slice_mode {slices.mode.value}")
    for i in range(slices.n_images):
        for s in range(slices.n_slices(i)):
            lines.append(f"slice {i} {s} {_fmt(slices.params[i][s])}")
    lines += [f"ffd_dims {' '.join(str(d) for d in ffd.dims)}",
              f"ffd_spacing {_fmt(ffd.spacing)}",
              f"ffd_origin {_fmt(ffd.origin)}"]
    for a, b, c in np.ndindex(ffd.dims):
        lines.append(f"phi {a} {b} {c} {_fmt(ffd.phi[a, b, c])}")
    lines.append(f"atlas_center {_fmt(affine.center)}")
    lines.append(f"atlas_affine {_fmt(affine.params)}")
    out = Path(path)
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out


def read_transforms(path: PathLike, image_lattices: Sequence[Lattice]) -> TransformState:
    """Read a registration state for images with the given native lattices."""
    source = Path(path)
    if not source.is_file():
        raise ConfigError("file not found", path=str(source))
    mode = SliceTransformMode.RIGID
    slice_rows: List[Tuple[int, int, List[float]]] = []
    ffd_geometry: Dict[str, List[float]] = {}
    phi_rows: List[Tuple[int, int, int, List[float]]] = []
    center, affine = None, None
    for number, line in enumerate(source.read_text(encoding="utf-8").splitlines(), start=1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        key, _, rest = text.partition(" ")
        where = f"line {number}"
        try:
            if key == "slice_mode":
                mode = SliceTransformMode(rest.strip())
            elif key == "slice":
                values = rest.split()
                slice_rows.append((int(values[0]), int(values[1]), [float(v) for v in values[2:]]))
            elif key in ("ffd_dims", "ffd_spacing", "ffd_origin"):
                ffd_geometry[key] = [float(v) for v in rest.split()]
            elif key == "phi":
                values = rest.split()
                phi_rows.append((int(values[0]), int(values[1]), int(values[2]),
                                 [float(v) for v in values[3:]]))
            elif key == "atlas_center":
                center = [float(v) for v in rest.split()]
            elif key == "atlas_affine":
                affine = [float(v) for v in rest.split()]
            else:
                raise ConfigError(f"unknown record '{key}' on {where}", path=str(source))
        except (ValueError, IndexError):
            raise ConfigError(f"malformed record on {where}", key=key, path=str(source))

    try:
        slices = SliceAffineSet.identity(image_lattices, mode)
        for i, s, values in slice_rows:
            if not 0 <= i < len(image_lattices) or not 0 <= s < slices.n_slices(i):
                raise ConfigError(f"slice record ({i}, {s}) does not match the images",
                                  path=str(source))
            if len(values) != mode.n_params:
                raise ConfigError(f"slice record ({i}, {s}) has {len(values)} parameters",
                                  path=str(source))
            slices.params[i][s] = values
        for key in ("ffd_dims", "ffd_spacing", "ffd_origin"):
            if len(ffd_geometry.get(key, [])) != 3:
                raise ConfigError("missing or malformed record", key=key, path=str(source))
        dims = tuple(int(v) for v in ffd_geometry["ffd_dims"])
        phi = np.zeros(dims + (3,))
        for a, b, c, values in phi_rows:
            phi[a, b, c] = values
        ffd = FfdDeformation(dims, tuple(ffd_geometry["ffd_spacing"]),
                             tuple(ffd_geometry["ffd_origin"]), phi)
        if center is None or affine is None:
            raise ConfigError("missing atlas affine records", path=str(source))
        return TransformState(slices, ffd, AtlasAffine(tuple(center), np.asarray(affine)))
    except (ValueError, IndexError) as exc:
        if isinstance(exc, MvmmError):
            raise
        raise ConfigError(f"inconsistent transform records: {exc}", path=str(source))


# ---------------------------------------------------------------- run configuration

RUN_KEYS = ("images", "names", "atlas", "common_space", "truth", "seed", "output", "workers",
            "write_posteriors")
LABEL_KEYS = ("labels", "default_components")


@dataclass
class RunConfig:
    """Validated contents of a segmentation run configuration."""

    path: Path
    images: List[Path]
    names: List[str]
    atlas: List[Path]
    common_space: Path
    labels: LabelConfig
    schedule: Schedule
    schedule_entries: Dict[str, str] = field(default_factory=dict)
    truth: Optional[Path] = None
    seed: int = 0
    output: Path = Path("mvmm_output")
    workers: Optional[int] = None
    write_posteriors: bool = False

    def load_images(self) -> MultivariateImageSet:
        grids = [read_volume(p) for p in self.images]
        lattice = read_volume(self.common_space).lattice
        return MultivariateImageSet(grids, lattice, list(self.names))

    def load_atlas(self) -> AtlasPrior:
        maps = [read_volume(p) for p in self.atlas]
        try:
            return AtlasPrior(maps, self.labels.labels)
        except MvmmError as exc:
            raise ConfigError(str(exc), key="atlas", path=str(self.path))

    def load_truth(self) -> Optional[LabelVolume]:
        return read_label_volume(self.truth) if self.truth else None


def _path_list(raw: str, base: Path, key: str, source: Path) -> List[Path]:
    items = [item.strip() for item in raw.replace("\n", ",").split(",") if item.strip()]
    if not items:
        raise ConfigError("expected at least one path", key=key, path=str(source))
    paths = [(base / item) if not Path(item).is_absolute() else Path(item) for item in items]
    for p in paths:
        if not p.is_file():
            raise ConfigError(f"referenced file does not exist: {p}", key=key, path=str(source))
    return paths


def _components(parser: configparser.ConfigParser, labels: List[int], n_images: int,
                default: int, source: Path) -> Dict[Tuple[int, int], int]:
    counts = {(i, k): default for i in range(n_images) for k in labels}
    if not parser.has_section("components"):
        return counts
    for key, raw in parser["components"].items():
        image_part, sep, label_part = key.partition(":")
        if not sep:
            raise ConfigError("component keys look like 'image:label'", key=key, path=str(source))
        try:
            images = range(n_images) if image_part.strip() == "*" else [int(image_part)]
            targets = labels if label_part.strip() == "*" else [int(label_part)]
            count = int(raw)
        except ValueError:
            raise ConfigError(f"invalid component entry '{raw}'", key=key, path=str(source))
        for i in images:
            for k in targets:
                if (i, k) not in counts:
                    raise ConfigError("component entry names an unknown image or label",
                                      key=key, path=str(source))
                counts[(i, k)] = count
    return counts


def read_run_config(path: PathLike) -> RunConfig:
    """
    Parse and validate a run configuration.

    Relative paths resolve against the configuration's directory; every
    referenced file must exist.
    """
    source = Path(path)
    parser = _read_ini(source)
    for name in parser.sections():
        if name not in ("run", "labels", "components", "schedule"):
            raise ConfigError(f"unknown section [{name}]", path=str(source))
    if not parser.has_section("run"):
        raise ConfigError("missing [run] section", path=str(source))
    run = parser["run"]
    _reject_unknown(run, RUN_KEYS, source)
    base = source.parent

    for key in ("images", "atlas", "common_space"):
        if key not in run:
            raise ConfigError("missing key", key=key, path=str(source))
    images = _path_list(run["images"], base, "images", source)
    names = [n.strip() for n in run.get("names", "").split(",") if n.strip()]
    if not names:
        names = [p.stem for p in images]
    if len(names) != len(images):
        raise ConfigError("one name per image is required", key="names", path=str(source))
    atlas = _path_list(run["atlas"], base, "atlas", source)
    common = _path_list(run["common_space"], base, "common_space", source)[0]
    truth = _path_list(run["truth"], base, "truth", source)[0] if run.get("truth") else None

    label_section = parser["labels"] if parser.has_section("labels") else {}
    if parser.has_section("labels"):
        _reject_unknown(parser["labels"], LABEL_KEYS, source)
    labels = _ints(label_section.get("labels", " ".join(str(k) for k in range(len(atlas)))),
                   None, "labels", source)
    if len(labels) != len(atlas):
        raise ConfigError(f"{len(atlas)} atlas maps for {len(labels)} labels", key="atlas",
                          path=str(source))
    default = _ints(label_section.get("default_components", "1"), 1, "default_components",
                    source)[0]
    try:
        label_config = LabelConfig(tuple(labels),
                                   _components(parser, labels, len(images), default, source),
                                   len(images))
    except MvmmError as exc:
        raise ConfigError(str(exc), key="components", path=str(source))

    entries = dict(parser["schedule"]) if parser.has_section("schedule") else {}
    try:
        schedule = schedule_from_config(entries)
    except ConfigError as exc:
        raise ConfigError(str(exc), path=str(source))

    try:
        seed = int(run.get("seed", "0"))
        workers = int(run["workers"]) if "workers" in run else None
        write_posteriors = run.getboolean("write_posteriors", fallback=False)
    except ValueError as exc:
        raise ConfigError(f"invalid value: {exc}", path=str(source))
    if workers is not None and workers < 1:
        raise ConfigError("must be >= 1", key="workers", path=str(source))
    output = Path(run.get("output", "mvmm_output"))
    if not output.is_absolute():
        output = base / output
    return RunConfig(source, images, names, atlas, common, label_config, schedule, entries,
                     truth, seed, output, workers, write_posteriors)


def format_run_config(images: Sequence[str], names: Sequence[str], atlas: Sequence[str],
                      common_space: str, labels: LabelConfig, truth: Optional[str] = None,
                      seed: int = 0, output: str = "segmentation",
                      schedule: Optional[Dict[str, str]] = None) -> str:
    """Text of a run configuration whose paths are relative to its own directory."""
    lines = ["[run]",
             f"images = {', '.join(images)}",
             f"names = {', '.join(names)}",
             f"atlas = {', '.join(atlas)}",
             f"common_space = {common_space}"]
    if truth:
        lines.append(f"truth = {truth}")
    lines += [f"seed = {seed}", f"output = {output}", "",
              "[labels]", f"labels = {' '.join(str(k) for k in labels.labels)}",
              "default_components = 1", "", "[components]"]
    for i in range(labels.n_images):
        for k in labels.labels:
            if labels.n_components(i, k) != 1:
                lines.append(f"{i}:{k} = {labels.n_components(i, k)}")
    lines += ["", "[schedule]"]
    for key, value in (schedule or {"preset": "mvmm-full"}).items():
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- phantom specifications

PHANTOM_KEYS = ("dims", "spacing", "origin", "body_radii", "shell_outer_radii",
                "shell_inner_radii", "scar_offset", "scar_radius", "sequences", "shift_fraction",
                "shift_sigma_mm", "ffd_sigma_mm", "ffd_spacing_mm", "atlas_sigma_mm", "seed")
SEQUENCE_KEYS = ("slice_spacing_mm", "in_plane_mm", "margin_mm", "truncate_mm") + TISSUES


def read_phantom_spec(path: PathLike) -> PhantomSpec:
    """
    Parse a phantom specification.

    ``[phantom]`` holds geometry and corruption settings; each name listed in
    ``sequences`` may have a ``[sequence <name>]`` section with its slice
    geometry and ``<tissue> = <mean> <stddev>`` entries. Tissues left out keep the built-in
    contrast of a known sequence name.
    """
    source = Path(path)
    parser = _read_ini(source, SpecError)
    if not parser.has_section("phantom"):
        raise SpecError("missing [phantom] section", path=str(source))
    section = parser["phantom"]
    _reject_unknown(section, PHANTOM_KEYS, source, SpecError)

    settings = {}
    for key in ("dims",):
        if key in section:
            settings[key] = tuple(_ints(section[key], 3, key, source, SpecError))
    for key in ("spacing", "origin", "body_radii", "shell_outer_radii", "shell_inner_radii",
                "scar_offset"):
        if key in section:
            settings[key] = tuple(_floats(section[key], 3, key, source, SpecError))
    for key in ("scar_radius", "shift_fraction", "shift_sigma_mm", "ffd_sigma_mm",
                "ffd_spacing_mm", "atlas_sigma_mm"):
        if key in section:
            settings[key] = _floats(section[key], 1, key, source, SpecError)[0]
    if "seed" in section:
        settings["seed"] = _ints(section["seed"], 1, "seed", source, SpecError)[0]

    names = [n.strip() for n in section.get("sequences", "bssfp, lge, t2").split(",") if n.strip()]
    for name in parser.sections():
        if name != "phantom" and not (name.startswith("sequence ") and
                                      name[len("sequence "):].strip() in names):
            raise SpecError(f"unknown section [{name}]", path=str(source))
    sequences = []
    for name in names:
        options: Dict[str, object] = {}
        label = f"sequence {name}"
        if parser.has_section(label):
            seq_section = parser[label]
            _reject_unknown(seq_section, SEQUENCE_KEYS, source, SpecError)
            for key in ("slice_spacing_mm", "in_plane_mm", "margin_mm", "truncate_mm"):
                if key in seq_section:
                    options[key] = _floats(seq_section[key], 1, key, source, SpecError)[0]
            table = {tissue: tuple(_floats(seq_section[tissue], 2, f"{name}.{tissue}", source,
                                           SpecError))
                     for tissue in TISSUES if tissue in seq_section}
            if table:
                options["intensities"] = {**DEFAULT_INTENSITIES.get(name, {}), **table}
        if "slice_spacing_mm" not in options:
            if name not in DEFAULT_SLICE_SPACING:
                raise SpecError("missing key", key=f"{name}.slice_spacing_mm", path=str(source))
            options["slice_spacing_mm"] = DEFAULT_SLICE_SPACING[name]
        try:
            sequences.append(SequenceSpec(name, **options))
        except SpecError as exc:
            raise SpecError(str(exc), path=str(source))
    try:
        return PhantomSpec(sequences=sequences, **settings)
    except SpecError as exc:
        raise SpecError(str(exc), path=str(source))


# ---------------------------------------------------------------- tables

def write_table(path: PathLike, frame: pd.DataFrame) -> Path:
    """Whitespace-aligned text table; floats in full precision."""
    out = Path(path)
    text = frame.to_string(index=False, float_format=lambda v: repr(float(v)), na_rep="nan")
    out.write_text(text + "\n", encoding="utf-8")
    return out


def read_table(path: PathLike) -> pd.DataFrame:
    return pd.read_csv(path, sep=r"\s+", engine="python")


def ll_trace_frame(trace: Sequence[Union[float, Tuple[str, float]]]) -> pd.DataFrame:
    """Two columns (iteration, log_likelihood), plus the phase when the trace carries one."""
    if trace and isinstance(trace[0], tuple):
        return pd.DataFrame({"iteration": range(len(trace)),
                             "phase": [phase for phase, _ in trace],
                             "log_likelihood": [float(ll) for _, ll in trace]})
    return pd.DataFrame({"iteration": range(len(trace)),
                         "log_likelihood": [float(ll) for ll in trace]})


def write_ll_trace(path: PathLike, trace) -> Path:
    return write_table(path, ll_trace_frame(trace))
