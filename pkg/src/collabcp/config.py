"""Experiment configuration and its ``key = value`` text format.

Files are line-oriented with ``[section]`` headers::

    [dataset]
    n_agents = 4
    [attack]
    epsilon = 0.5

Unknown sections or keys are a hard error.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Tuple


class ConfigError(ValueError):
    pass


FUSION_MODES = ("early", "intermediate", "single")
OBJECTIVES = ("cls", "reg", "cls+reg")
ATTACK_PHASES = ("train", "test", "both", "none")


@dataclass
class DatasetConfig:
    grid_size: int = 16
    n_agents: int = 4
    min_objects: int = 1
    max_objects: int = 4
    min_box_size: float = 0.2
    max_box_size: float = 0.35
    noise_amplitude: float = 0.05
    fov_radius: float = 0.6
    fov_angle_deg: float = 240.0
    n_train: int = 400
    n_val: int = 50
    n_test: int = 50
    seed: int = 0
    n_vertices: int = 2
    n_coords: int = 2

    def validate(self) -> None:
        if self.n_agents < 1:
            raise ConfigError("n_agents must be >= 1")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ConfigError("object count range is empty")
        if not 0 < self.min_box_size <= self.max_box_size <= 1:
            raise ConfigError("box size range must satisfy 0 < min <= max <= 1")
        if self.grid_size < 1:
            raise ConfigError("grid_size must be positive")
        if self.noise_amplitude < 0:
            raise ConfigError("noise_amplitude must be >= 0")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ConfigError("split sizes must be >= 1")
        if (self.n_vertices, self.n_coords) != (2, 2):
            raise ConfigError("only the two-corner, two-coordinate box layout is implemented")


@dataclass
class ModelConfig:
    fusion: str = "intermediate"
    out_grid: int = 8
    hidden: int = 96
    feature_dim: int = 96
    uq_head: bool = True
    init_scale: float = 1.0
    feature_scale: float = 4.0
    confidence_threshold: float = 0.05

    def validate(self) -> None:
        if self.fusion not in FUSION_MODES:
            raise ConfigError(f"fusion must be one of {FUSION_MODES}")
        if min(self.out_grid, self.hidden, self.feature_dim) < 1:
            raise ConfigError("layer sizes must be positive")
        if self.feature_scale <= 0:
            raise ConfigError("feature_scale must be positive")
        if not 0 <= self.confidence_threshold <= 1:
            raise ConfigError("confidence_threshold must lie in [0, 1]")


@dataclass
class TrainingConfig:
    learning_rate: float = 6.0
    epochs: int = 30
    batch_size: int = 20
    w_reg: float = 1.0
    w_cls: float = 1.0
    w_uq: float = 1.0
    max_grad_norm: float = 0.05  # per parameter tensor; 0 disables
    seed: int = 0

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.max_grad_norm < 0:
            raise ConfigError("max_grad_norm must be >= 0")
        if min(self.w_reg, self.w_cls, self.w_uq) < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs >= 0 and batch_size >= 1 required")


@dataclass
class AttackConfig:
    eta: float = 0.1
    epsilon: float = 0.5
    pgd_iters: int = 25
    objective: str = "cls"
    num_attackers: int = 2
    phase: str = "both"
    random_start: bool = False
    seed: int = 0

    def validate(self, n_agents: int | None = None) -> None:
        if self.eta <= 0:
            raise ConfigError("eta must be positive")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        if self.pgd_iters < 0:
            raise ConfigError("pgd_iters must be >= 0")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}")
        if self.phase not in ATTACK_PHASES:
            raise ConfigError(f"phase must be one of {ATTACK_PHASES}")
        if self.num_attackers < 0:
            raise ConfigError("num_attackers must be >= 0")
        if n_agents is not None and self.num_attackers > n_agents - 1:
            raise ConfigError("num_attackers must be <= n_agents - 1")

    @property
    def attacks_train(self) -> bool:
        return self.phase in ("train", "both")

    @property
    def attacks_test(self) -> bool:
        return self.phase in ("test", "both")


@dataclass
class ConformalConfig:
    alpha: float = 0.1
    match_iou: float = 0.5
    per_coordinate: bool = False
    calibrated_metrics: bool = True

    def validate(self) -> None:
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    conformal: ConformalConfig = field(default_factory=ConformalConfig)
    scenario: str = "default"
    preset: str = "desk"

    def validate(self) -> "ExperimentConfig":
        self.dataset.validate()
        self.model.validate()
        self.training.validate()
        self.attack.validate(self.dataset.n_agents)
        self.conformal.validate()
        return self

    def replace(self, **sections) -> "ExperimentConfig":
        """Copy with per-section overrides, e.g. ``replace(attack={"epsilon": 0.1})``."""
        out = dataclasses.replace(self)
        for name, changes in sections.items():
            if isinstance(changes, dict):
                setattr(out, name, dataclasses.replace(getattr(self, name), **changes))
            else:
                setattr(out, name, changes)
        return out


SECTIONS = ("dataset", "model", "training", "attack", "conformal")


def paper_defaults() -> ExperimentConfig:
    """Hyperparameters as published: lr 0.001, 49 epochs, 80/10/10 scenes, N = 6, batch 20."""
    cfg = ExperimentConfig(preset="paper")
    cfg.dataset.n_train, cfg.dataset.n_val, cfg.dataset.n_test = 80, 10, 10
    cfg.dataset.n_agents = 6
    cfg.training.learning_rate = 0.001
    cfg.training.epochs = 49
    cfg.training.batch_size = 20
    return cfg


def _coerce(raw: str, kind, key: str):
    if kind is bool or kind == "bool":
        lowered = raw.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: not a boolean: {raw!r}")
    try:
        if kind is int or kind == "int":
            return int(raw)
        if kind is float or kind == "float":
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None
    return raw.strip()


def _field_types(obj) -> dict:
    return {f.name: f.type for f in fields(obj)}


def loads(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = dataclasses.replace(base) if base else ExperimentConfig()
    for name in SECTIONS:
        setattr(cfg, name, dataclasses.replace(getattr(cfg, name)))
    parser = configparser.ConfigParser(
        delimiters=("=",), comment_prefixes=("#", ";"), inline_comment_prefixes=("#",),
        default_section="__none__", interpolation=None,
    )
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    for section in parser.sections():
        if section == "experiment":
            for key, raw in parser.items(section):
                if key not in ("scenario", "preset"):
                    raise ConfigError(f"unknown key [experiment] {key}")
                setattr(cfg, key, raw.strip())
            continue
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        target = getattr(cfg, section)
        types = _field_types(target)
        for key, raw in parser.items(section):
            if key not in types:
                raise ConfigError(f"unknown key [{section}] {key}")
            setattr(target, key, _coerce(raw, types[key], f"[{section}] {key}"))
    return cfg.validate()


def load(path: str | Path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    return loads(Path(path).read_text(), base=base)


def dumps(cfg: ExperimentConfig) -> str:
    lines = ["[experiment]", f"scenario = {cfg.scenario}", f"preset = {cfg.preset}"]
    for name in SECTIONS:
        lines.append(f"[{name}]")
        section = getattr(cfg, name)
        for f in fields(section):
            lines.append(f"{f.name} = {getattr(section, f.name)!r}".replace("'", ""))
    return "\n".join(lines) + "\n"


def box_dim(cfg: DatasetConfig) -> int:
    return cfg.n_vertices * cfg.n_coords


def split_sizes(cfg: DatasetConfig) -> Tuple[int, int, int]:
    return cfg.n_train, cfg.n_val, cfg.n_test
