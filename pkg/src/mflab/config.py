"""Experiment configuration: TOML parsing, validation, data generators and seeding.

Every section and key is checked against a fixed schema; an unknown key, a
wrong type or an out-of-range value raises :class:`ConfigError`. Random
streams for the data and the initial path are spawned from one
``numpy.random.SeedSequence`` so that each stream is reproducible on its own.
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from mflab.errors import ConfigError
from mflab.flow import FlowConfig, sample_initial_path
from mflab.measures import DataMeasure, ParameterPath
from mflab.model import SquaredError, VectorFieldModel, make_loss, make_model

__all__ = [
    "ModelSection",
    "LossSection",
    "DataSection",
    "PathSection",
    "AnalysisSection",
    "IOSection",
    "ExperimentConfig",
    "Experiment",
    "load_config",
    "parse_config",
    "build_experiment",
    "gaussian_pairs",
    "circle_labels",
    "GENERATORS",
]

GENERATORS = ("gaussian-pairs", "circle-labels", "file")


@dataclass(frozen=True)
class ModelSection:
    kind: str = "linear-tanh"
    d: int = 1
    m: int | None = None


@dataclass(frozen=True)
class LossSection:
    kind: str = "squared-error"


@dataclass(frozen=True)
class DataSection:
    n: int = 4
    generator: str = "gaussian-pairs"
    radius: float | None = None
    noise: float = 0.1
    file: str | None = None


@dataclass(frozen=True)
class PathSection:
    L: int = 4
    N: int = 8
    init_scale: float = 0.5
    smoothing: int = 2


@dataclass(frozen=True)
class AnalysisSection:
    gap_floor: float = 1e-12
    tail_fraction: float = 0.5
    alpha_tol: float = 0.05


@dataclass(frozen=True)
class IOSection:
    out: str | None = None
    snapshot_every: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossSection = field(default_factory=LossSection)
    data: DataSection = field(default_factory=DataSection)
    path: PathSection = field(default_factory=PathSection)
    flow: FlowConfig = field(default_factory=FlowConfig)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)
    io: IOSection = field(default_factory=IOSection)
    base_dir: Path = field(default=Path("."), compare=False)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, seed=seed,
                                   flow=dataclasses.replace(self.flow, seed=seed))

    def to_dict(self) -> dict:
        out = {"seed": self.seed}
        for name in ("model", "loss", "data", "path", "flow", "analysis", "io"):
            out[name] = {k: v for k, v in dataclasses.asdict(getattr(self, name)).items()
                         if v is not None}
        out["flow"].pop("seed", None)
        return out


_SECTIONS = {
    "model": ModelSection,
    "loss": LossSection,
    "data": DataSection,
    "path": PathSection,
    "flow": FlowConfig,
    "analysis": AnalysisSection,
    "io": IOSection,
}


def _coerce(section: str, key: str, value, annotation: str):
    where = f"[{section}].{key}"
    if isinstance(value, (dict, list)):
        raise ConfigError(f"{where}: expected a scalar, got {type(value).__name__}")
    if annotation.startswith("bool"):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if isinstance(value, bool):
        raise ConfigError(f"{where}: booleans are not numbers")
    if annotation.startswith("int"):
        if not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if annotation.startswith("float"):
        if not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{where}: expected a string, got {value!r}")
    return value


def _section(name: str, table) -> object:
    cls = _SECTIONS[name]
    if not isinstance(table, dict):
        raise ConfigError(f"[{name}] must be a table")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    if name == "flow":
        fields.pop("seed")
    unknown = sorted(set(table) - set(fields))
    if unknown:
        raise ConfigError(f"[{name}]: unknown key(s) {', '.join(unknown)}")
    kwargs = {k: _coerce(name, k, v, str(fields[k].type)) for k, v in table.items()}
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"[{name}]: {exc}") from exc


def _validate(cfg: ExperimentConfig) -> None:
    def need(cond, msg):
        if not cond:
            raise ConfigError(msg)

    need(cfg.seed >= 0, "seed must be a nonnegative integer")
    try:
        model = make_model(cfg.model.kind, cfg.model.d) if cfg.model.d >= 1 else None
    except ValueError as exc:
        raise ConfigError(f"[model]: {exc}") from exc
    need(model is not None, "[model].d must be >= 1")
    need(cfg.model.m is None or cfg.model.m == model.m,
         f"[model].m = {cfg.model.m} does not match kind {cfg.model.kind!r} with d = {cfg.model.d}"
         f" (expected {model.m})")
    need(cfg.loss.kind in ("squared-error", "SquaredError"),
         f"[loss].kind {cfg.loss.kind!r} is not supported")
    need(cfg.data.generator in GENERATORS,
         f"[data].generator must be one of {', '.join(GENERATORS)}")
    need(cfg.data.n >= 1, "[data].n must be >= 1")
    need(cfg.data.noise >= 0, "[data].noise must be >= 0")
    need(cfg.data.radius is None or cfg.data.radius > 0, "[data].radius must be positive")
    if cfg.data.generator == "circle-labels":
        need(cfg.model.d >= 2, "circle-labels needs [model].d >= 2")
    if cfg.data.generator == "file":
        need(cfg.data.file is not None, "[data].file is required for generator = \"file\"")
        need(cfg.base_dir.joinpath(cfg.data.file).is_file(),
             f"[data].file {cfg.data.file!r} does not exist")
    need(cfg.path.L >= 1 and cfg.path.N >= 1, "[path].L and [path].N must be >= 1")
    need(cfg.path.init_scale > 0, "[path].init_scale must be positive")
    need(cfg.path.smoothing >= 1, "[path].smoothing must be >= 1")
    need(0 < cfg.analysis.tail_fraction <= 1, "[analysis].tail_fraction must lie in (0, 1]")
    need(cfg.analysis.gap_floor >= 0, "[analysis].gap_floor must be >= 0")
    need(0 <= cfg.analysis.alpha_tol < 0.5, "[analysis].alpha_tol must lie in [0, 0.5)")
    need(cfg.io.snapshot_every >= 0, "[io].snapshot_every must be >= 0")


def parse_config(doc: dict, base_dir: Path | str = ".") -> ExperimentConfig:
    unknown = sorted(set(doc) - set(_SECTIONS) - {"seed"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {', '.join(unknown)}")
    seed = _coerce("top", "seed", doc.get("seed", 0), "int")
    sections = {name: _section(name, doc[name]) for name in _SECTIONS if name in doc}
    if "flow" in sections:
        sections["flow"] = dataclasses.replace(sections["flow"], seed=seed)
    else:
        sections["flow"] = FlowConfig(seed=seed)
    cfg = ExperimentConfig(seed=seed, base_dir=Path(base_dir), **sections)
    _validate(cfg)
    return cfg


def load_config(file) -> ExperimentConfig:
    file = Path(file)
    try:
        text = file.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {file}: {exc.strerror or exc}") from exc
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{file}: {exc}") from exc
    return parse_config(doc, file.parent)


# Fixed linear map and rotation used by the built-in generators.
_PAIR_GAIN = 0.5
_CIRCLE_ANGLE = np.pi / 4


def gaussian_pairs(rng: np.random.Generator, n: int, d: int, noise: float = 0.1):
    """``x`` clipped standard normal in ``[-1.5, 1.5]^d``, ``y = 0.5 x + noise``.

    The noise is clipped at three standard deviations so the samples stay in
    a known ball.
    """
    x = np.clip(rng.standard_normal((n, d)), -1.5, 1.5)
    eps = np.clip(rng.standard_normal((n, d)), -3.0, 3.0)
    return x, _PAIR_GAIN * x + noise * eps


def circle_labels(rng: np.random.Generator, n: int, d: int, noise: float = 0.0):
    """``x`` uniform on the unit circle of the first coordinate plane, ``y`` = ``x`` rotated."""
    phi = rng.uniform(0.0, 2.0 * np.pi, size=n)
    x = np.zeros((n, d))
    x[:, 0], x[:, 1] = np.cos(phi), np.sin(phi)
    y = np.zeros((n, d))
    y[:, 0], y[:, 1] = np.cos(phi + _CIRCLE_ANGLE), np.sin(phi + _CIRCLE_ANGLE)
    if noise > 0:
        y += noise * np.clip(rng.standard_normal((n, d)), -3.0, 3.0)
    return x, y


def _load_data_file(file: Path, d: int):
    try:
        with np.load(file) as npz:
            x, y = npz["x"], npz["y"]
            w = npz["weights"] if "weights" in npz.files else None
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot load data file {file}: {exc}") from exc
    x = np.asarray(x, dtype=float).reshape(len(x), -1)
    y = np.asarray(y, dtype=float).reshape(len(y), -1)
    if x.shape[1] != d:
        raise ConfigError(f"data file {file} has dimension {x.shape[1]}, model needs {d}")
    return x, y, w


@dataclass
class Experiment:
    config: ExperimentConfig
    model: VectorFieldModel
    loss: SquaredError
    data: DataMeasure
    path0: ParameterPath
    aux_seed: np.random.SeedSequence


def build_experiment(cfg: ExperimentConfig) -> Experiment:
    """Instantiate model, data and initial path from a validated config."""
    data_ss, path_ss, aux_ss = np.random.SeedSequence(cfg.seed).spawn(3)
    model = make_model(cfg.model.kind, cfg.model.d)
    dc = cfg.data
    weights = None
    if dc.generator == "gaussian-pairs":
        x, y = gaussian_pairs(np.random.default_rng(data_ss), dc.n, cfg.model.d, dc.noise)
    elif dc.generator == "circle-labels":
        x, y = circle_labels(np.random.default_rng(data_ss), dc.n, cfg.model.d, dc.noise)
    else:
        x, y, weights = _load_data_file(cfg.base_dir / dc.file, cfg.model.d)
    try:
        data = DataMeasure(x, y, weights, dc.radius)
    except ValueError as exc:
        raise ConfigError(f"[data]: {exc}") from exc
    pc = cfg.path
    path0 = sample_initial_path(np.random.default_rng(path_ss), pc.L, pc.N, model.m,
                                pc.init_scale, pc.smoothing)
    loss = make_loss(cfg.loss.kind, data.radius)
    return Experiment(cfg, model, loss, data, path0, aux_ss)
