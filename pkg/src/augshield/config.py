"""Run configuration: TOML sections parsed into frozen dataclasses, strictly.

Unknown sections or keys are rejected before any work starts.
"""

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field, fields, replace

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .trainer import DefensePolicy, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    source: str = "shapeset"
    seed: int = 7
    per_class: int = 250
    geometry: tuple = (32, 32, 3)
    classes: tuple = ()
    val_fraction: float = 0.2
    split_seed: int = 7
    path: str = ""

    def __post_init__(self):
        if self.source not in ("shapeset", "cifar10"):
            raise ConfigError(f"dataset.source must be shapeset or cifar10, got {self.source!r}")
        if self.source == "cifar10" and not self.path:
            raise ConfigError("dataset.path is required for cifar10")
        if self.per_class <= 0:
            raise ConfigError("dataset.per_class must be positive")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("dataset.val_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "smallconvnet"
    widths: tuple = (8, 16)

    def __post_init__(self):
        if self.arch not in ("smallconvnet", "mlp"):
            raise ConfigError(f"model.arch must be smallconvnet or mlp, got {self.arch!r}")


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "none"
    epsilon: float = 16 / 255
    budget: float = 0.01
    fraction: float = 1.0
    patch_side: int = 4
    placement: str = "corner"
    steps: int = 250
    step_size: float = 0.0  # 0 means epsilon / 10
    restarts: int = 1
    adaptive: bool = False
    target_class: int = -1  # -1: drawn per trial
    base_class: int = -1

    def __post_init__(self):
        if self.kind not in ("none", "backdoor", "targeted"):
            raise ConfigError(f"attack.kind must be none, backdoor or targeted, got {self.kind!r}")
        if self.placement not in ("corner", "random"):
            raise ConfigError("attack.placement must be corner or random")
        if not 0 < self.budget <= 1:
            raise ConfigError("attack.budget must lie in (0, 1]")
        if self.epsilon < 0 or self.steps < 0 or self.restarts < 1:
            raise ConfigError("attack.epsilon/steps must be >= 0 and restarts >= 1")

    def label(self):
        if self.kind == "targeted" and self.adaptive:
            return "targeted-adaptive"
        return self.kind


@dataclass(frozen=True)
class ScheduleConfig:
    epochs: int = 20
    lr: float = 0.05
    batch_size: int = 64
    momentum: float = 0.9
    decay_epochs: tuple = ()
    base_augment: bool = True
    weight_decay: float = 0.0
    surrogate_epochs: int = -1  # -1: same as epochs
    trials: int = 4
    master_seed: int = 0
    parallelism: int = 1

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size <= 0 or not self.lr > 0:
            raise ConfigError("schedule.epochs >= 0, batch_size > 0 and lr > 0 required")
        if self.trials < 1 or self.parallelism < 1:
            raise ConfigError("schedule.trials and schedule.parallelism must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    dataset: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    defense: DefensePolicy = field(default_factory=DefensePolicy)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    grid: tuple = ()  # tuple of (DefensePolicy, AttackConfig) cells

    def train_config(self, defense=None, epochs=None):
        s = self.schedule
        return TrainConfig(
            epochs=s.epochs if epochs is None else epochs,
            batch_size=s.batch_size,
            lr=s.lr,
            momentum=s.momentum,
            seed=s.master_seed,
            defense=self.defense if defense is None else defense,
            decay_epochs=tuple(s.decay_epochs),
            base_augment=s.base_augment,
            weight_decay=s.weight_decay,
        )

    def surrogate_config(self, defense=None):
        s = self.schedule
        epochs = s.epochs if s.surrogate_epochs < 0 else s.surrogate_epochs
        return self.train_config(DefensePolicy("standard") if defense is None else defense, epochs)

    def cells(self):
        """Grid cells as single-cell configs; a config without a grid is its own cell."""
        if not self.grid:
            return [self]
        return [replace(self, defense=d, attack=a, grid=()) for d, a in self.grid]

    def to_dict(self):
        return _plain(dataclasses.asdict(self))

    def fingerprint(self):
        """Hash of everything that can change results; ``parallelism`` cannot."""
        d = self.to_dict()
        del d["schedule"]["parallelism"]
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, float) and obj == float("inf"):
        return "inf"
    return obj


SECTIONS = {
    "dataset": DataConfig,
    "model": ModelConfig,
    "attack": AttackConfig,
    "defense": DefensePolicy,
    "schedule": ScheduleConfig,
}


def _build(cls, values, where):
    if not isinstance(values, dict):
        raise ConfigError(f"[{where}] must be a table")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"[{where}] unknown keys: {', '.join(unknown)}")
    kwargs = {}
    for k, v in values.items():
        default = known[k].default
        if isinstance(v, list):
            v = tuple(v)
        if isinstance(default, float) and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        if k in ("clip",) and v == "inf":
            v = float("inf")
        if (
            default is not dataclasses.MISSING
            and default is not None
            and not isinstance(v, type(default))
            and not (isinstance(default, float) and isinstance(v, float))
        ):
            raise ConfigError(f"[{where}] {k}: expected {type(default).__name__}, got {type(v).__name__}")
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}] {exc}") from None


def from_dict(data):
    unknown = sorted(set(data) - set(SECTIONS) - {"grid"})
    if unknown:
        raise ConfigError(f"unknown sections: {', '.join(unknown)}")
    parts = {name: _build(cls, data.get(name, {}), name) for name, cls in SECTIONS.items()}
    grid = ()
    if "grid" in data:
        g = data["grid"]
        if not isinstance(g, dict) or set(g) - {"defenses", "attacks"}:
            raise ConfigError("[grid] accepts only 'defenses' and 'attacks' arrays of tables")
        base_def = dict(data.get("defense", {}))
        base_att = dict(data.get("attack", {}))
        defenses = [
            _build(DefensePolicy, {**base_def, **d}, "grid.defenses") for d in g.get("defenses", [{}])
        ]
        attacks = [
            _build(AttackConfig, {**base_att, **a}, "grid.attacks") for a in g.get("attacks", [{}])
        ]
        grid = tuple((d, a) for a in attacks for d in defenses)
    return RunConfig(grid=grid, **parts)


def loads(text):
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from None
    return from_dict(data)


def load(path):
    with open(path, "rb") as fh:
        try:
            data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return from_dict(data)


def dumps(config):
    """TOML text that :func:`loads` maps back to an equal config."""
    d = config.to_dict()
    lines = []
    for name in SECTIONS:
        lines.append(f"[{name}]")
        for k, v in d[name].items():
            lines.append(f"{k} = {_toml_value(v)}")
        lines.append("")
    if config.grid:
        lines.append("[grid]")
        defs, atts = [], []
        for dpol, att in config.grid:
            dd, aa = _plain(dataclasses.asdict(dpol)), _plain(dataclasses.asdict(att))
            if dd not in defs:
                defs.append(dd)
            if aa not in atts:
                atts.append(aa)
        lines.append("defenses = [" + ", ".join(_inline(x) for x in defs) + "]")
        lines.append("attacks = [" + ", ".join(_inline(x) for x in atts) + "]")
        lines.append("")
    return "\n".join(lines)


def _inline(d):
    return "{" + ", ".join(f"{k} = {_toml_value(v)}" for k, v in d.items()) + "}"


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(type(v))
