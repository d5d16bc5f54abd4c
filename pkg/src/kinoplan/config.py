"""Experiment configuration: one JSON file drives training, evaluation, and
planning. Every run writes its fully resolved config back into the run
directory so (config, seed, format versions) reproduce it exactly.
"""

from __future__ import annotations

import json
import os
import types
import typing
from dataclasses import dataclass, field, fields, is_dataclass

from .env import EnvConfig
from .errors import ConfigError
from .model import ModelConfig
from .planner import ConstraintSet, PlannerConfig
from .state import BodyParams

CONFIG_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class TrainSettings:
    iterations: int = 300
    steps_per_iteration: int = 240
    gamma: float = 0.99
    gae_lambda: float = 0.95
    ppo_epochs: int = 4
    ppo_minibatches: int = 4
    clip_ratio: float = 0.2
    entropy_coef: float = 0.005
    learning_rate: float = 1e-3
    model_updates_per_iteration: int = 8
    model_batch: int = 16
    model_seq_len: int = 16
    replay_capacity: int = 200_000
    grad_clip_model: float = 100.0
    grad_clip_ac: float = 1.0
    num_envs: int = 64
    curriculum: bool = True
    curriculum_window: int = 50
    checkpoint_every: int = 50
    save_resume_state: bool = True

    def validate(self):
        for name in ("iterations", "steps_per_iteration", "ppo_epochs",
                     "ppo_minibatches", "model_batch", "model_seq_len", "num_envs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"train.{name}", "must be >= 1")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError("train.gamma", "must lie in (0, 1)")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ConfigError("train.gae_lambda", "must lie in [0, 1]")
        return self


def _coerce(value, ftype, path):
    origin = typing.get_origin(ftype)
    if origin is typing.Union or isinstance(ftype, types.UnionType):
        args = typing.get_args(ftype)
        if value is None and type(None) in args:
            return None
        return _coerce(value, next(a for a in args if a is not type(None)), path)
    if ftype is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)) \
                or int(value) != value:
            raise ConfigError(path, f"expected integer, got {value!r}")
        return int(value)
    if ftype is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected number, got {value!r}")
        return float(value)
    if ftype is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected boolean, got {value!r}")
        return value
    if ftype is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected string, got {value!r}")
        return value
    if origin is tuple or ftype is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected list, got {value!r}")
        return tuple(value)
    if is_dataclass(ftype):
        if not isinstance(value, dict):
            raise ConfigError(path, f"expected object, got {value!r}")
        return _apply(ftype, value, path)
    return value


def _apply(cls, data: dict, path: str):
    """Build dataclass `cls` from a dict, reporting dotted-path field errors."""
    known = {f.name for f in fields(cls)}
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"{path}.{key}" if path else key, "unknown field")
        sub = f"{path}.{key}" if path else key
        kwargs[key] = _coerce(value, hints[key], sub)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(path or cls.__name__, str(e)) from e


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    run_tag: str = "run"
    out_dir: str | None = None
    env: EnvConfig = field(default_factory=EnvConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    constraints: ConstraintSet = field(default_factory=ConstraintSet)
    train: TrainSettings = field(default_factory=TrainSettings)

    def validate(self) -> "ExperimentConfig":
        self.train.validate()
        self.planner.validate()
        if self.model.obs_dim != self.env.obs_dim:
            raise ConfigError(
                "model", f"model obs dim {self.model.obs_dim} != env obs dim "
                f"{self.env.obs_dim} (history/scan settings disagree)")
        if self.env.scan_every != int(round(self.model.dt_model / self.env.dt)):
            raise ConfigError(
                "model.dt_model", "model timestep must equal env.dt * env.scan_every "
                "(the two-rate contract)")
        return self

    @property
    def steps_per_tick(self) -> int:
        return self.env.scan_every

    def to_dict(self) -> dict:
        def conv(obj):
            if is_dataclass(obj) and not isinstance(obj, type):
                return {f.name: conv(getattr(obj, f.name)) for f in fields(obj)}
            if isinstance(obj, tuple):
                return list(obj)
            return obj
        d = conv(self)
        d["config_schema_version"] = CONFIG_SCHEMA_VERSION
        return d

    def resolved_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        data = dict(data)
        version = data.pop("config_schema_version", CONFIG_SCHEMA_VERSION)
        if version != CONFIG_SCHEMA_VERSION:
            raise ConfigError("config_schema_version",
                              f"unsupported version {version}")
        if "seed" not in data:
            raise ConfigError("seed", "required field is missing")
        cfg = _apply(cls, data, "")
        return cfg.validate()

    @classmethod
    def load(cls, path: str) -> "ExperimentConfig":
        if not os.path.exists(path):
            raise ConfigError("<config file>", f"no such file: {path}")
        with open(path) as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError("<config file>", f"invalid JSON: {e}") from e
        return cls.from_dict(data)


def smoke_config(seed: int = 0, **overrides) -> ExperimentConfig:
    """Tiny flat-terrain setup used by tests and quick local runs."""
    base = dict(
        seed=seed,
        run_tag="smoke",
        env={"terrain_kind": "flat", "terrain_level": 0, "max_steps": 300,
             "terrain_jitter": False},
        model={"d_h": 48, "d_z": 8, "d_e": 32, "embed_hidden": 32,
               "head_hidden": 32, "decoder_hidden": 48, "imagination_horizon": 4},
        planner={"horizon": 4, "iterations": 2, "samples": 48,
                 "policy_samples": 8, "elites": 8},
        train={"iterations": 20, "steps_per_iteration": 120, "num_envs": 2,
               "model_updates_per_iteration": 2, "model_batch": 8,
               "model_seq_len": 8, "checkpoint_every": 10},
    )
    for key, value in overrides.items():
        if isinstance(value, dict) and key in base and isinstance(base[key], dict):
            base[key] = {**base[key], **value}
        else:
            base[key] = value
    return ExperimentConfig.from_dict(base)
