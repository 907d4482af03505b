"""Run configuration: TOML file with one section per module, validated before any side effects.

Example::

    [run]
    out = "runs/desk"
    seed = 0

    [dataset]
    scene = "desk"        # or path = "data/lego" for a NeRF-synthetic folder

    [encoding]
    encoder = "facthash"
    levels = 8

Paths inside the file are resolved relative to the file's directory.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .encoding import GENERAL_MAPS, REDUCE_MODES
from .training import ModelConfig, TrainConfig

ENCODERS = ("facthash", "hashgrid3d", "triplane", "densegrid", "general")
DTYPES = ("float32", "float64")


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending entry."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class DatasetConfig:
    path: str = ""  # NeRF-synthetic style folder with transforms_{train,test}.json
    scene: str = ""  # "desk" or a scene JSON written by gen-scene
    train_views: int = 20
    test_views: int = 8
    few_shot: int = 0  # 0: use every training view
    width: int = 96
    height: int = 96
    fov: float = 0.69  # camera_angle_x, radians
    radius: float = 3.0
    oracle_factor: int = 4  # oracle step = march step / oracle_factor


@dataclass
class BenchConfig:
    views: int = 4
    repetitions: int = 3


@dataclass
class AblationConfig:
    table_sizes: List[int] = field(default_factory=lambda: [2**k for k in range(10, 17)])
    encoders: List[str] = field(default_factory=lambda: ["facthash", "hashgrid3d"])


@dataclass
class SceneGenConfig:
    primitives: int = 3
    density: float = 40.0


# section name -> (attribute on RunConfig, field names routed there)
_MODEL_SECTIONS = {
    "encoding": ("encoder", "levels", "n_min", "n_max", "feature_dim", "table_size",
                 "general_map", "general_reduce"),
    "field": ("geo_dim", "density_hidden", "color_hidden", "color_layers", "dtype"),
}
_TRAIN_SECTIONS = {
    "renderer": ("step_divisor", "termination", "bitfield_resolution", "bitfield_opacity",
                 "bitfield_decay", "bitfield_warmup", "bitfield_every", "stratified", "background"),
    "training": ("batch_rays", "iterations", "lr_tables", "lr_mlp", "beta1", "beta2", "adam_eps",
                 "lambda_op", "lambda_dist", "eval_every"),
}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    scene: SceneGenConfig = field(default_factory=SceneGenConfig)
    out: str = "runs/default"
    seed: int = 0

    def to_dict(self) -> Dict[str, Any]:
        """Nested plain-data form; section layout mirrors the TOML file."""
        model = asdict(self.model)
        train = asdict(self.train)
        d: Dict[str, Any] = {"run": {"out": self.out, "seed": self.seed}}
        for sec, keys in _MODEL_SECTIONS.items():
            d[sec] = {k: model[k] for k in keys}
        for sec, keys in _TRAIN_SECTIONS.items():
            d[sec] = {k: (list(train[k]) if k == "background" else train[k]) for k in keys}
        d["dataset"] = asdict(self.dataset)
        d["bench"] = asdict(self.bench)
        d["ablation"] = asdict(self.ablation)
        d["scene"] = asdict(self.scene)
        return d

    @classmethod
    def from_dict(cls, raw: Dict[str, Any], base_dir: str = ".") -> "RunConfig":
        return _parse(raw, base_dir)


def _coerce(name: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(name, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int) or (default is None and name.endswith("table_size")):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(name, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(name, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(name, f"expected a string, got {value!r}")
        return value
    if isinstance(default, (list, tuple)):
        if not isinstance(value, list):
            raise ConfigError(name, f"expected a list, got {value!r}")
        return list(value)
    return value


def _section(raw: Dict[str, Any], name: str) -> Dict[str, Any]:
    sec = raw.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(name, "expected a table")
    return sec


def _fill(target, sec_name: str, values: Dict[str, Any], allowed: Optional[Sequence[str]] = None) -> None:
    names = {f.name for f in dataclasses.fields(target)}
    allowed = set(allowed) if allowed is not None else names
    for key, value in values.items():
        if key not in allowed:
            raise ConfigError(f"{sec_name}.{key}", "unknown setting")
        setattr(target, key, _coerce(f"{sec_name}.{key}", value, getattr(target, key)))


def _parse(raw: Dict[str, Any], base_dir: str) -> RunConfig:
    known = {"run", "dataset", "bench", "ablation", "scene", *_MODEL_SECTIONS, *_TRAIN_SECTIONS}
    for key in raw:
        if key not in known:
            raise ConfigError(key, "unknown section")
    cfg = RunConfig()
    run = _section(raw, "run")
    _fill(cfg, "run", run, ("out", "seed"))
    model, train = ModelConfig(), TrainConfig()
    for sec, keys in _MODEL_SECTIONS.items():
        _fill(model, sec, _section(raw, sec), keys)
    for sec, keys in _TRAIN_SECTIONS.items():
        _fill(train, sec, _section(raw, sec), keys)
    cfg.model, cfg.train = model, train
    _fill(cfg.dataset, "dataset", _section(raw, "dataset"))
    _fill(cfg.bench, "bench", _section(raw, "bench"))
    _fill(cfg.ablation, "ablation", _section(raw, "ablation"))
    _fill(cfg.scene, "scene", _section(raw, "scene"))
    for attr in ("path", "scene"):
        p = getattr(cfg.dataset, attr)
        if p and p != "desk" and not os.path.isabs(p):
            setattr(cfg.dataset, attr, os.path.normpath(os.path.join(base_dir, p)))
    if not os.path.isabs(cfg.out):
        cfg.out = os.path.normpath(os.path.join(base_dir, cfg.out))
    return cfg


def load_config(path: str) -> RunConfig:
    """Read and parse a TOML run config (not yet validated; see :func:`validate`)."""
    if not os.path.isfile(path):
        raise ConfigError("config", f"file {path!r} not found")
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError("config", f"TOML parse error: {exc}") from None
    return _parse(raw, os.path.dirname(os.path.abspath(path)))


def apply_overrides(cfg: RunConfig, seed: Optional[int] = None, out: Optional[str] = None,
                    few_shot: Optional[int] = None) -> RunConfig:
    if seed is not None:
        cfg.seed = seed
    if out is not None:
        cfg.out = os.path.abspath(out)
    if few_shot is not None:
        cfg.dataset.few_shot = few_shot
    return cfg


def validate(cfg: RunConfig, need_dataset: bool = True) -> RunConfig:
    """Check every field; raises :class:`ConfigError` naming the first bad one."""
    m, t, d = cfg.model, cfg.train, cfg.dataset
    if m.encoder not in ENCODERS:
        raise ConfigError("encoding.encoder", f"must be one of {ENCODERS}, got {m.encoder!r}")
    if m.levels < 1:
        raise ConfigError("encoding.levels", "must be >= 1")
    if m.n_min < 1:
        raise ConfigError("encoding.n_min", "must be >= 1")
    if m.n_max < m.n_min:
        raise ConfigError("encoding.n_max", "must be >= n_min")
    if m.feature_dim < 1:
        raise ConfigError("encoding.feature_dim", "must be >= 1")
    if m.encoder in ("facthash", "hashgrid3d") and (m.table_size is None or m.table_size < 1):
        raise ConfigError("encoding.table_size", f"required (>= 1) for encoder {m.encoder!r}")
    if m.encoder == "general":
        if m.general_map not in GENERAL_MAPS:
            raise ConfigError("encoding.general_map", f"must be one of {tuple(GENERAL_MAPS)}")
        if m.general_reduce not in REDUCE_MODES:
            raise ConfigError("encoding.general_reduce", f"must be one of {REDUCE_MODES}")
    for name in ("geo_dim", "density_hidden", "color_hidden", "color_layers"):
        if getattr(m, name) < 1:
            raise ConfigError(f"field.{name}", "must be >= 1")
    if m.dtype not in DTYPES:
        raise ConfigError("field.dtype", f"must be one of {DTYPES}")
    if t.batch_rays < 1:
        raise ConfigError("training.batch_rays", "must be >= 1")
    if t.iterations < 0:
        raise ConfigError("training.iterations", "must be >= 0")
    for name in ("lr_tables", "lr_mlp", "lambda_op", "lambda_dist", "adam_eps"):
        if getattr(t, name) < 0:
            raise ConfigError(f"training.{name}", "must be >= 0")
    for name in ("beta1", "beta2"):
        if not 0 <= getattr(t, name) < 1:
            raise ConfigError(f"training.{name}", "must be in [0, 1)")
    if t.step_divisor <= 0:
        raise ConfigError("renderer.step_divisor", "must be > 0")
    if not 0 < t.bitfield_decay < 1:
        raise ConfigError("renderer.bitfield_decay", "must be in (0, 1)")
    if t.bitfield_resolution < 1:
        raise ConfigError("renderer.bitfield_resolution", "must be >= 1")
    if t.bitfield_every < 1:
        raise ConfigError("renderer.bitfield_every", "must be >= 1")
    if not 0 <= t.termination < 1:
        raise ConfigError("renderer.termination", "must be in [0, 1)")
    if len(t.background) != 3:
        raise ConfigError("renderer.background", "needs three components")
    if need_dataset:
        if not d.path and not d.scene:
            raise ConfigError("dataset", "set either dataset.path or dataset.scene")
        if d.path and d.scene:
            raise ConfigError("dataset", "dataset.path and dataset.scene are mutually exclusive")
        if d.path and not os.path.isdir(d.path):
            raise ConfigError("dataset.path", f"directory {d.path!r} does not exist")
        if d.scene and d.scene != "desk" and not os.path.isfile(d.scene):
            raise ConfigError("dataset.scene", f"scene file {d.scene!r} does not exist")
    for name in ("train_views", "test_views", "width", "height", "oracle_factor"):
        if getattr(d, name) < 1:
            raise ConfigError(f"dataset.{name}", "must be >= 1")
    if d.few_shot < 0 or (d.scene and d.few_shot > d.train_views):
        raise ConfigError("dataset.few_shot", "must be between 0 and train_views")
    if cfg.bench.repetitions < 0 or cfg.bench.views < 0:
        raise ConfigError("bench", "views and repetitions must be >= 0")
    if not cfg.ablation.table_sizes or any(s < 1 for s in cfg.ablation.table_sizes):
        raise ConfigError("ablation.table_sizes", "needs one or more positive sizes")
    for enc in cfg.ablation.encoders:
        if enc not in ("facthash", "hashgrid3d"):
            raise ConfigError("ablation.encoders", f"hashed encoders only, got {enc!r}")
    if cfg.scene.primitives < 1:
        raise ConfigError("scene.primitives", "must be >= 1")
    return cfg


def model_train_configs(cfg: RunConfig):
    """The (ModelConfig, TrainConfig) pair for training, seed taken from ``[run]``."""
    train = dataclasses.replace(cfg.train, seed=cfg.seed)
    train.background = tuple(float(c) for c in train.background)
    return dataclasses.replace(cfg.model), train
