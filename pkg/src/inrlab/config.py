"""Experiment configuration: YAML in, validated dataclasses out, YAML snapshot back.

Every run writes the fully populated config (defaults included) so a snapshot
alone reproduces the run; ``load_config(snapshot)`` returns an equal object.
"""

from __future__ import annotations

import dataclasses
import re
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .diffcore import ConfigError
from .models import ModelConfig

TASK_KINDS = ("stripe", "image", "sdf")


class _Loader(yaml.SafeLoader):
    """Safe loader where only true/false are booleans, so ``transform: off``
    stays a string."""


_Loader.yaml_implicit_resolvers = {
    first: [(tag, rx) for tag, rx in resolvers if tag != "tag:yaml.org,2002:bool"]
    for first, resolvers in yaml.SafeLoader.yaml_implicit_resolvers.items()
}
_Loader.add_implicit_resolver("tag:yaml.org,2002:bool", re.compile(r"^(?:true|True|TRUE|false|False|FALSE)$"),
                              list("tTfF"))


def parse_yaml(text: str):
    return yaml.load(text, Loader=_Loader)


@dataclass
class TaskConfig:
    kind: str
    # stripe
    n_points: int = 256
    n_bands: int = 8
    band_width: int = 1
    # image: "procedural", "constant" (uses color) or a PNG path
    source: str = "procedural"
    size: int = 64
    sampling_factor: int = 4
    color: list[float] = field(default_factory=lambda: [0.5, 0.5, 0.5])
    # sdf
    shape: str = "sphere"
    eval_resolution: int = 64


@dataclass
class OptimConfig:
    iters: int
    lr: float = 1e-3
    table_lr: float = 1e-2
    batch_size: typing.Optional[int] = None
    eval_interval: typing.Optional[int] = None
    cosine: bool = False


@dataclass
class SliceConfig:
    enabled: bool = False
    m: int = 128
    axes: typing.Optional[list[int]] = None
    fixed: typing.Optional[dict[int, float]] = None


@dataclass
class ExperimentConfig:
    task: TaskConfig
    model: ModelConfig
    optim: OptimConfig
    seed: int = 0
    output_dir: str = "runs/default"
    slices: SliceConfig = field(default_factory=SliceConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)


_SECTIONS = {"task": TaskConfig, "model": ModelConfig, "optim": OptimConfig, "slices": SliceConfig}


def _coerce(value, hint, path, problems):
    """Check ``value`` against a field annotation, converting where YAML is lax
    (``1e-3`` loads as a string, integers are acceptable floats)."""
    origin = typing.get_origin(hint)
    if origin is typing.Union or origin is types.UnionType:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, args[0], path, problems)
    if value is None:
        problems.append(f"{path}: must not be null")
        return value
    if hint is bool:
        if isinstance(value, bool):
            return value
    elif hint is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif hint is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                pass
    elif hint is str:
        if isinstance(value, str):
            return value
    elif origin is list:
        (inner,) = typing.get_args(hint)
        if isinstance(value, (list, tuple)):
            return [_coerce(v, inner, f"{path}[{i}]", problems) for i, v in enumerate(value)]
    elif origin is dict:
        key_t, val_t = typing.get_args(hint)
        if isinstance(value, dict):
            return {_coerce(k, key_t, f"{path}.key", problems): _coerce(v, val_t, f"{path}.{k}", problems)
                    for k, v in value.items()}
    problems.append(f"{path}: expected {getattr(hint, '__name__', hint)}, got {value!r}")
    return value


def _build_section(cls, data, prefix, problems):
    if not isinstance(data, dict):
        problems.append(f"{prefix}: expected a mapping")
        return None
    hints = typing.get_type_hints(cls)
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            problems.append(f"{prefix}.{key}: unknown field")
    kwargs = {}
    for name, f in known.items():
        required = f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING
        if name in data:
            kwargs[name] = _coerce(data[name], hints[name], f"{prefix}.{name}", problems)
        elif required:
            problems.append(f"{prefix}.{name}: missing required field")
    if any(p.startswith(prefix + ".") or p == prefix for p in problems):
        return None
    return cls(**kwargs)


def _check_task(t: TaskConfig) -> list[str]:
    problems = []
    if t.kind not in TASK_KINDS:
        problems.append(f"task.kind: unknown task {t.kind!r} (expected one of {', '.join(TASK_KINDS)})")
    for name in ("n_points", "n_bands", "band_width", "size", "sampling_factor", "eval_resolution"):
        if getattr(t, name) < 1:
            problems.append(f"task.{name}: must be >= 1")
    if t.kind == "image" and len(t.color) != 3:
        problems.append("task.color: expected 3 values")
    return problems


def _check_optim(o: OptimConfig) -> list[str]:
    problems = []
    if o.iters < 1:
        problems.append("optim.iters: must be >= 1")
    for name in ("lr", "table_lr"):
        if getattr(o, name) <= 0:
            problems.append(f"optim.{name}: must be > 0")
    for name in ("batch_size", "eval_interval"):
        if getattr(o, name) is not None and getattr(o, name) < 1:
            problems.append(f"optim.{name}: must be >= 1")
    return problems


def _check_slices(s: SliceConfig) -> list[str]:
    return ["slices.m: must be >= 2"] if s.m < 2 else []


_CHECKS = {"task": _check_task, "model": ModelConfig.validate, "optim": _check_optim, "slices": _check_slices}


def validate_experiment(cfg: ExperimentConfig) -> list[str]:
    return [p for name, check in _CHECKS.items() for p in check(getattr(cfg, name))]


def config_from_dict(data) -> ExperimentConfig:
    """Build and validate; raises ConfigError listing every problem found."""
    problems = []
    if not isinstance(data, dict):
        raise ConfigError("config: expected a mapping at top level")
    allowed = {f.name for f in dataclasses.fields(ExperimentConfig)}
    for key in data:
        if key not in allowed:
            problems.append(f"{key}: unknown field")
    sections = {}
    for name, cls in _SECTIONS.items():
        if name in data:
            sections[name] = _build_section(cls, data[name], name, problems)
        elif name == "slices":
            sections[name] = SliceConfig()
        else:
            problems.append(f"{name}: missing required section")
    seed = _coerce(data.get("seed", 0), int, "seed", problems)
    output_dir = _coerce(data.get("output_dir", "runs/default"), str, "output_dir", problems)
    for name, section in sections.items():
        if section is not None:
            problems += _CHECKS[name](section)
    if problems:
        raise ConfigError("invalid config:\n  " + "\n  ".join(problems), problems)
    return ExperimentConfig(seed=seed, output_dir=output_dir, **sections)


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``dotted.key=value`` strings; values are parsed as YAML scalars."""
    data = _deep_copy(data)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value", [f"override {item!r}: expected key=value"])
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key}: {part} is not a section", [f"{key}: not a section"])
        node[parts[-1]] = parse_yaml(raw)
    return data


def _deep_copy(data):
    if isinstance(data, dict):
        return {k: _deep_copy(v) for k, v in data.items()}
    if isinstance(data, list):
        return [_deep_copy(v) for v in data]
    return data


def load_config(path, overrides=None, seed: int | None = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}", [f"config: cannot read {path}"]) from exc
    try:
        data = parse_yaml(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}", ["config: YAML syntax error"]) from exc
    data = apply_overrides(data, overrides)
    if seed is not None:
        data["seed"] = seed
    return config_from_dict(data)
