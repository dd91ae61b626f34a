"""Run configuration: defaults, the sectioned key=value file, validation.

Defaults follow the published hyper-parameters (gamma 0.95, alpha 100,
beta 0.95, Adam at 1e-4, batches of 2048 frames, 20000 iterations); the
desk-scale experiment configs under configs/ override the expensive ones.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .policies import PolicyConfig
from .simworld import SimConfig, Tolerances
from .training import EmSettings, TrainSettings


class ConfigError(ValueError):
    """Bad or unresolvable run configuration."""


@dataclass(frozen=True)
class RunConfig:
    family: str = "stacking_a"
    seed: int = 0
    demo_count: int = 40
    downsample_len: int = 60
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    tolerances: Tolerances = field(default_factory=Tolerances)
    init_iterations: int = 2000
    init_batch: int = 512
    init_lr: float = 2e-3
    train_iterations: int = 20000
    batch_frames: int = 2048
    learning_rate: float = 1e-4
    em_max_outer: int = 5
    em_epsilon: float = 0.01
    em_train_iterations: int = 0  # 0: same as train_iterations
    infer_mode: str = "auto"  # exact | beam | auto
    beam_width: int = 512
    stride: int = 0  # 0: auto (1 up to 80 frames, 2 beyond)
    eval_episodes: int = 50
    eval_seeds: tuple = (1, 2, 3, 4, 5)
    step_cap: int = 600
    check_every: int = 10
    sweep: tuple = ()
    out_dir: str = "out"
    demos_path: str = ""
    checkpoint_path: str = ""

    def train_settings(self, iterations: int | None = None) -> TrainSettings:
        return TrainSettings(
            iterations=iterations if iterations is not None else self.train_iterations,
            batch_frames=self.batch_frames,
            learning_rate=self.learning_rate,
        )

    def em_settings(self, horizon: int) -> EmSettings:
        return EmSettings(
            max_outer=self.em_max_outer,
            epsilon=self.em_epsilon,
            mode=self.resolve_mode(horizon),
            beam_width=self.beam_width,
            stride=self.resolve_stride(horizon),
            init_iterations=self.init_iterations,
            init_batch=self.init_batch,
            init_lr=self.init_lr,
        )

    @property
    def em_inner_iterations(self) -> int:
        return self.em_train_iterations or self.train_iterations

    def resolve_mode(self, horizon: int) -> str:
        if self.infer_mode != "auto":
            return self.infer_mode
        return "exact" if horizon <= 80 else "beam"

    def resolve_stride(self, horizon: int) -> int:
        if self.stride > 0:
            return self.stride
        return 1 if horizon <= 80 else 2

    def validate(self) -> None:
        from .simworld import FAMILIES

        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family '{self.family}' (choose from {FAMILIES})")
        if self.infer_mode not in ("auto", "exact", "beam"):
            raise ConfigError(f"infer mode '{self.infer_mode}' not one of auto/exact/beam")
        if self.beam_width < 1:
            raise ConfigError("beam width must be >= 1")
        if self.demo_count < 1:
            raise ConfigError("demo count must be >= 1")
        if self.downsample_len < 2:
            raise ConfigError("downsample length must be >= 2")
        if not self.eval_seeds:
            raise ConfigError("need at least one eval seed")
        if self.demos_path and not Path(self.demos_path).exists():
            raise ConfigError(f"demos path '{self.demos_path}' does not exist")
        if self.checkpoint_path and not Path(self.checkpoint_path).exists():
            raise ConfigError(f"checkpoint path '{self.checkpoint_path}' does not exist")


_SECTION_FIELDS = {
    "task": {"family": str, "seed": int},
    "demos": {"count": ("demo_count", int), "downsample_len": int, "path": ("demos_path", str)},
    "init": {
        "iterations": ("init_iterations", int),
        "batch": ("init_batch", int),
        "learning_rate": ("init_lr", float),
    },
    "train": {
        "iterations": ("train_iterations", int),
        "batch_frames": int,
        "learning_rate": float,
    },
    "em": {
        "max_outer": ("em_max_outer", int),
        "epsilon": ("em_epsilon", float),
        "train_iterations": ("em_train_iterations", int),
    },
    "infer": {
        "mode": ("infer_mode", str),
        "beam_width": int,
        "stride": int,
    },
    "eval": {
        "episodes": ("eval_episodes", int),
        "seeds": ("eval_seeds", "int_tuple"),
        "step_cap": int,
        "check_every": int,
    },
    "pipeline": {"sweep": ("sweep", "int_tuple"), "out_dir": str},
    "paths": {
        "out_dir": str,
        "demos": ("demos_path", str),
        "checkpoint": ("checkpoint_path", str),
    },
}

_POLICY_FIELDS = {f.name: f.type for f in fields(PolicyConfig)}
_SIM_FIELDS = {f.name: f.type for f in fields(SimConfig)}


def _parse_value(raw: str, kind):
    if kind == "int_tuple":
        return tuple(int(v) for v in raw.split(",") if v.strip() != "")
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    return raw


def load_config(path) -> RunConfig:
    """Parse a sectioned key=value config file into a RunConfig."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file '{path}' does not exist")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from e

    updates: dict = {}
    policy_updates: dict = {}
    sim_updates: dict = {}
    for section in parser.sections():
        if section == "policy":
            for key, raw in parser.items(section):
                if key not in _POLICY_FIELDS:
                    raise ConfigError(f"[policy] has no field '{key}'")
                kind = float if _POLICY_FIELDS[key] in ("float", float) else int
                policy_updates[key] = _parse_value(raw, kind)
            continue
        if section == "sim":
            for key, raw in parser.items(section):
                if key not in _SIM_FIELDS:
                    raise ConfigError(f"[sim] has no field '{key}'")
                sim_updates[key] = _parse_value(raw, float)
            continue
        if section not in _SECTION_FIELDS:
            raise ConfigError(f"unknown config section [{section}]")
        table = _SECTION_FIELDS[section]
        for key, raw in parser.items(section):
            if key not in table:
                raise ConfigError(f"[{section}] has no field '{key}'")
            spec = table[key]
            if isinstance(spec, tuple):
                name, kind = spec
            else:
                name, kind = key, spec
            updates[name] = _parse_value(raw, kind)

    cfg = RunConfig(**updates)
    if policy_updates:
        cfg = replace(cfg, policy=replace(cfg.policy, **policy_updates))
    if sim_updates:
        cfg = replace(cfg, sim=replace(cfg.sim, **sim_updates))
    cfg.validate()
    return cfg


def apply_overrides(cfg: RunConfig, **overrides) -> RunConfig:
    """CLI-flag overrides; None values are ignored."""
    clean = {k: v for k, v in overrides.items() if v is not None}
    if not clean:
        return cfg
    cfg = replace(cfg, **clean)
    return cfg
