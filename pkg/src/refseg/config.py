"""Experiment configuration: nested YAML (or JSON) with strict keys.

Every section maps onto a dataclass; unknown keys, bad types and
cross-field violations raise :class:`ConfigError` naming the field path.
The resolved configuration (defaults applied, ``s`` and ``k`` clamped) is
written back in the syntax of the input file.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import os
import warnings
from dataclasses import dataclass, field

import yaml

from .consistency import AugmentationSpec
from .pool import PoolConfig, PoolWarning, parse_k
from .synth import MULTI_CLASS, MULTI_LABEL, TASK_KINDS, SceneSpec
from .trainer import METHODS, TAU_METHODS


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


@dataclass
class DataConfig:
    image_size: int = 64
    n_classes: int = 4
    task: str = MULTI_CLASS
    shapes_per_image: list = field(default_factory=lambda: [3, 6])
    radius_range: list = field(default_factory=lambda: [5, 13])
    noise_sigma: float = 0.05
    gain_jitter: float = 0.1
    offset_jitter: float = 0.05
    overlap_prob: float = 0.5
    n_labeled: int = 3
    n_unlabeled: int = 200
    n_val: int = 10
    n_test: int = 20
    n_seeds: int = 5

    def scene_spec(self) -> SceneSpec:
        return SceneSpec(
            height=self.image_size, width=self.image_size, n_classes=self.n_classes, task=self.task,
            shapes_per_image=tuple(self.shapes_per_image), radius_range=tuple(self.radius_range),
            noise_sigma=self.noise_sigma, gain_jitter=self.gain_jitter, offset_jitter=self.offset_jitter,
            overlap_prob=self.overlap_prob,
        )


@dataclass
class ModelConfig:
    hidden: int = 32
    coord_features: bool = False
    variance_scale: float = 25.0


@dataclass
class MethodConfig:
    name: str = "rpg"
    tau: float | None = None
    unlabeled_per_batch: int = 5
    unlabeled_weight: float = 1.0
    consistency_weight: float = 1.0
    eval_every: int = 10
    iteration_multiplier: int = 1
    augment_labeled: bool = True


@dataclass
class PoolSection:
    p: int = 3
    s: int = 64
    k: object = 7000


@dataclass
class AugmentationConfig:
    flip_p: float = 0.5
    rotation_deg: float = 15.0
    noise_sigma: float = 0.1
    jitter: float = 0.2
    cutout: bool = True
    cutout_area: list = field(default_factory=lambda: [0.05, 0.25])

    def spec(self) -> AugmentationSpec:
        return AugmentationSpec(self.flip_p, self.rotation_deg, self.noise_sigma, self.jitter,
                                self.cutout, tuple(self.cutout_area))


@dataclass
class OptimizerConfig:
    lr: float = 0.0005
    weight_decay: float = 0.0005
    epochs: int = 60
    steps_per_epoch: int | None = None


@dataclass
class OutputConfig:
    dir: str = "runs"


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    method: MethodConfig = field(default_factory=MethodConfig)
    pool: PoolSection = field(default_factory=PoolSection)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    # filled in by resolve(): source syntax and clamping notes
    syntax: str = field(default="yaml", repr=False, compare=False)
    notes: list = field(default_factory=list, repr=False, compare=False)
    raw: dict = field(default_factory=dict, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {f.name: dataclasses.asdict(getattr(self, f.name)) for f in _SECTIONS}

    def dumps(self) -> str:
        return dump_config(self.to_dict(), self.syntax)

    def estimator_params(self) -> dict:
        """Keyword arguments for :class:`refseg.estimators.RPGSegmenter`."""
        m, o, p = self.method, self.optimizer, self.pool
        return dict(
            method=m.name, task=self.data.task, n_classes=self.data.n_classes,
            hidden=self.model.hidden, coord_features=self.model.coord_features,
            variance_scale=self.model.variance_scale, pool_size=p.p, subsample=p.s, k=p.k,
            tau=m.tau, unlabeled_per_batch=m.unlabeled_per_batch,
            unlabeled_weight=m.unlabeled_weight, consistency_weight=m.consistency_weight,
            lr=o.lr, weight_decay=o.weight_decay, epochs=o.epochs,
            steps_per_epoch=o.steps_per_epoch, eval_every=m.eval_every,
            iteration_multiplier=m.iteration_multiplier, augmentation=self.augmentation.spec(),
            augment_labeled=m.augment_labeled,
        )


_SECTIONS = [f for f in dataclasses.fields(ExperimentConfig) if f.name not in ("syntax", "notes", "raw")]


def _check_type(path, value, default, annotation):
    annotation = str(annotation)
    if value is None:
        if "None" in annotation or annotation == "object":
            return None
        raise ConfigError(path, "must not be null")
    if annotation == "object":
        return value
    if isinstance(default, bool) or annotation == "bool":
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value
    if isinstance(default, list) or "list" in annotation:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {value!r}")
        return list(value)
    if "float" in annotation:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if "int" in annotation:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if "str" in annotation:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    return value


def _build_section(cls, raw, path):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(path, f"expected a mapping, got {type(raw).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        sub = f"{path}.{key}" if path else str(key)
        if key not in known:
            raise ConfigError(sub, f"unknown key {key!r}")
        f = known[key]
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        kwargs[key] = _check_type(sub, value, default, f.type)
    return cls(**kwargs)


def config_from_dict(raw: dict, syntax: str = "yaml") -> ExperimentConfig:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("", "top level must be a mapping")
    raw = dict(raw)
    if isinstance(raw.get("method"), str):
        raw["method"] = {"name": raw["method"]}
    sections = {f.name: f for f in _SECTIONS}
    for key in raw:
        if key not in sections:
            raise ConfigError(str(key), f"unknown key {key!r}")
    built = {}
    for name, f in sections.items():
        cls = f.default_factory().__class__
        built[name] = _build_section(cls, raw.get(name), name)
    cfg = ExperimentConfig(**built, syntax=syntax, raw=copy.deepcopy(raw))
    return resolve(cfg)


def resolve(cfg: ExperimentConfig) -> ExperimentConfig:
    """Check cross-field constraints and clamp ``s``/``k``; returns ``cfg``."""
    d, m, p, o = cfg.data, cfg.method, cfg.pool, cfg.optimizer
    if d.task not in TASK_KINDS:
        raise ConfigError("data.task", f"must be one of {TASK_KINDS}")
    if d.image_size < 4:
        raise ConfigError("data.image_size", "must be >= 4")
    if d.n_classes < (2 if d.task == MULTI_CLASS else 1):
        raise ConfigError("data.n_classes", "too few classes for the task")
    if d.n_labeled < 1:
        raise ConfigError("data.n_labeled", "must be >= 1")
    for key in ("n_unlabeled", "n_val", "n_test"):
        if getattr(d, key) < 0:
            raise ConfigError(f"data.{key}", "must be >= 0")
    if d.n_seeds < 1:
        raise ConfigError("data.n_seeds", "must be >= 1")
    if len(d.shapes_per_image) != 2 or not 1 <= d.shapes_per_image[0] <= d.shapes_per_image[1]:
        raise ConfigError("data.shapes_per_image", "must be [min, max] with 1 <= min <= max")
    if len(d.radius_range) != 2 or not 0 < d.radius_range[0] <= d.radius_range[1]:
        raise ConfigError("data.radius_range", "must be [min, max] with 0 < min <= max")
    if m.name not in METHODS:
        raise ConfigError("method.name", f"must be one of {METHODS}")
    if m.name in TAU_METHODS:
        if m.tau is None:
            raise ConfigError("method.tau", f"required for method {m.name}")
        lo = 0.5 if d.task == MULTI_LABEL else 1.0 / d.n_classes
        if not lo < m.tau < 1.0:
            raise ConfigError("method.tau", f"must lie in ({lo:g}, 1) for {d.task}")
    elif m.tau is not None:
        raise ConfigError("method.tau", f"not used by method {m.name}")
    if m.unlabeled_per_batch < 0:
        raise ConfigError("method.unlabeled_per_batch", "must be >= 0")
    if m.eval_every < 1:
        raise ConfigError("method.eval_every", "must be >= 1")
    if m.iteration_multiplier < 1:
        raise ConfigError("method.iteration_multiplier", "must be >= 1")
    if o.lr <= 0:
        raise ConfigError("optimizer.lr", "must be positive")
    if o.weight_decay < 0:
        raise ConfigError("optimizer.weight_decay", "must be >= 0")
    if o.epochs < 1:
        raise ConfigError("optimizer.epochs", "must be >= 1")
    if o.steps_per_epoch is not None and o.steps_per_epoch < 1:
        raise ConfigError("optimizer.steps_per_epoch", "must be >= 1")
    if cfg.model.hidden < 1:
        raise ConfigError("model.hidden", "must be >= 1")
    try:
        parse_k(p.k)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            p_eff, s_h, _, k_eff = PoolConfig(p.p, p.s, p.k).resolve(d.image_size)
    except ValueError as exc:
        raise ConfigError("pool", str(exc)) from None
    cfg.notes = [str(c.message) for c in caught if issubclass(c.category, PoolWarning)]
    p.s, p.k = s_h, k_eff
    try:
        cfg.augmentation.spec()
    except ValueError as exc:
        raise ConfigError("augmentation", str(exc)) from None
    return cfg


def _syntax_for(path) -> str:
    return "json" if str(path).lower().endswith(".json") else "yaml"


def load_config(path) -> ExperimentConfig:
    """Parse, validate and resolve the configuration file at ``path``."""
    if not os.path.exists(path):
        raise ConfigError("", f"config file {path} does not exist")
    syntax = _syntax_for(path)
    with open(path) as fh:
        text = fh.read()
    return loads_config(text, syntax)


def loads_config(text: str, syntax: str = "yaml") -> ExperimentConfig:
    try:
        raw = json.loads(text) if syntax == "json" else yaml.safe_load(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"parse error at line {exc.lineno}: {exc.msg}") from None
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else "?"
        raise ConfigError("", f"parse error at line {line}: {getattr(exc, 'problem', exc)}") from None
    return config_from_dict(raw, syntax)


def dump_config(data: dict, syntax: str = "yaml") -> str:
    if syntax == "json":
        return json.dumps(data, indent=2, sort_keys=True) + "\n"
    return yaml.safe_dump(data, sort_keys=True, default_flow_style=False)


def with_overrides(cfg: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    """Rebuild ``cfg`` from its unresolved source with ``{"section.key": value}`` overrides.

    Working from the source keeps relative settings (``k: 50%``) relative.
    """
    raw = copy.deepcopy(cfg.raw)
    for dotted, value in overrides.items():
        section, _, name = dotted.partition(".")
        raw.setdefault(section, {})
        raw[section][name] = value
    return config_from_dict(raw, cfg.syntax)
