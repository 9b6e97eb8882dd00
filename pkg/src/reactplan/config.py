"""Run configuration: nested dataclasses loaded from YAML/JSON with strict keys.

Precedence, lowest first: built-in defaults, the config file, ``--key=value``
overrides (dotted keys reach into sections, e.g. ``--train.episodes=20``),
then the dedicated CLI flags (``--seed``, ``--episodes``, ...).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

from .cost import CostConfig, CostWeights
from .frenet import PlannerConfig
from .learn import VARIANTS, PlannerSettings, TrainConfig
from .sim import FlowConfig
from .sim.maps import SCENARIOS


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    scenario: str = "all"
    variant: str = "ours"
    seed: int = 0
    out: str = "runs/default"
    test_flows: int = 50
    train: TrainConfig = field(default_factory=TrainConfig)
    weights: CostWeights = field(default_factory=CostWeights)
    cost: CostConfig = field(default_factory=CostConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)

    def __post_init__(self):
        if self.scenario != "all" and self.scenario not in SCENARIOS:
            raise ConfigError(f"scenario must be one of {SCENARIOS + ('all',)}, got {self.scenario!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.test_flows <= 0:
            raise ConfigError("test_flows must be positive")
        if self.planner.horizon != self.train.horizon:
            raise ConfigError(f"planner.horizon ({self.planner.horizon}) must equal train.horizon "
                              f"({self.train.horizon})")

    @property
    def scenarios(self) -> tuple[str, ...]:
        return SCENARIOS if self.scenario == "all" else (self.scenario,)

    def planner_settings(self) -> PlannerSettings:
        return PlannerSettings(self.weights, self.cost, self.planner)

    def to_dict(self) -> dict:
        return _plain(asdict(self))


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def _build(cls, data: dict, where: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"section {where or '<root>'} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(where + k for k in unknown)}")
    defaults = cls()
    kw = {}
    for name, value in data.items():
        cur = getattr(defaults, name)
        if is_dataclass(cur):
            kw[name] = _build(type(cur), value, f"{where}{name}.")
        else:
            kw[name] = _coerce(cur, value, where + name)
    try:
        return cls(**kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where or 'config'}: {e}") from e


def _coerce(default, value, name):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be a boolean")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{name} must be a list")
        return tuple(float(x) for x in value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{name} must be a string")
        return value
    return value


def from_dict(data: dict | None) -> RunConfig:
    return _build(RunConfig, data or {})


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {p}: {e}") from e
    try:
        data = json.loads(text) if p.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot parse config {p}: {e}") from e
    return from_dict(data or {})


def dump_config(cfg: RunConfig, path) -> None:
    p = Path(path)
    data = cfg.to_dict()
    if p.suffix == ".json":
        p.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    else:
        p.write_text(yaml.safe_dump(data, sort_keys=True))


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Layer ``key=value`` (or ``--key=value``) items over ``cfg``; values parse as YAML scalars."""
    data = cfg.to_dict()
    for item in overrides:
        item = item[2:] if item.startswith("--") else item
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as e:
            raise ConfigError(f"bad value for {key}: {e}") from e
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown config section {p!r} in {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = value
    return from_dict(data)
