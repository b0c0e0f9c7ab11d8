"""JSON run configuration: strict parsing, documented defaults, and the
effective-config echo embedded in every report and checkpoint.

Unknown keys are rejected outright; silent hyperparameter typos are the
main reproducibility hazard this guards against.
"""

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field

from .data import SyntheticSpec
from .evaluation import DEFAULT_KS, STRICT_PAIR_CAP
from .training import LoraConfig, SoftPromptConfig, TrainConfig


class ConfigError(Exception):
    """Raised for malformed or invalid run configuration."""


@dataclass
class EvalConfig:
    ks: list[int] = field(default_factory=lambda: list(DEFAULT_KS))
    strict_pair_cap: int = STRICT_PAIR_CAP
    strict_seed: int = 0

    def __post_init__(self):
        if list(self.ks) != sorted(self.ks) or len(set(self.ks)) != len(self.ks):
            raise ValueError("eval.ks must be strictly ascending")
        if any(k < 1 for k in self.ks):
            raise ValueError("eval.ks entries must be >= 1")


@dataclass
class PathsConfig:
    """Optional default locations; command-line flags take precedence."""

    data_dir: str | None = None
    checkpoint: str | None = None
    phi_checkpoint: str | None = None
    report: str | None = None


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SyntheticSpec = field(default_factory=SyntheticSpec)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)


_SECTIONS = {
    "train": TrainConfig,
    "synth": SyntheticSpec,
    "eval": EvalConfig,
    "paths": PathsConfig,
}
_NESTED = {"lora": LoraConfig, "soft_prompt": SoftPromptConfig}


def _type_ok(value, ftype) -> bool:
    if isinstance(ftype, types.UnionType):
        return any(_type_ok(value, t) for t in typing.get_args(ftype))
    if ftype is type(None):
        return value is None
    if ftype is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if ftype is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if ftype is str:
        return isinstance(value, str)
    if typing.get_origin(ftype) is list:
        (item,) = typing.get_args(ftype)
        return isinstance(value, list) and all(_type_ok(v, item) for v in value)
    return True  # nested dataclasses are handled by recursion


def _build(dc_type, doc, path: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{path or 'config'} must be a JSON object")
    fields_by_name = {f.name: f for f in dataclasses.fields(dc_type)}
    for key in doc:
        if key not in fields_by_name:
            raise ConfigError(f"unknown config key: {path}{key}")
    kwargs = {}
    for key, value in doc.items():
        if key in _NESTED:
            kwargs[key] = _build(_NESTED[key], value, f"{path}{key}.")
        else:
            if not _type_ok(value, fields_by_name[key].type):
                raise ConfigError(
                    f"{path}{key}: expected {fields_by_name[key].type}, got {value!r}")
            kwargs[key] = value
    try:
        return dc_type(**kwargs)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"{path.rstrip('.') or 'config'}: {e}") from e


def parse_run_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    for key in doc:
        if key not in _SECTIONS:
            raise ConfigError(f"unknown config key: {key}")
    sections = {name: _build(dc, doc.get(name, {}), f"{name}.")
                for name, dc in _SECTIONS.items()}
    return RunConfig(**sections)


def load_run_config(path: str) -> RunConfig:
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from e
    return parse_run_config(doc)


def effective_config(rc: RunConfig) -> dict:
    """Full defaults-merged configuration, as echoed into reports."""
    return dataclasses.asdict(rc)
