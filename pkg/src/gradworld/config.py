"""Run configuration: one JSON document with per-subsystem sections.

Strict parsing: unknown keys anywhere are rejected. Every run writes the
fully resolved configuration into its output directory so results are
reproducible from the artifact alone.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .dynamics import ModelConfig, TrainConfig
from .oracle import BallTaskConfig, PushTaskConfig
from .policy import PolicyConfig
from .real2sim import StaInfConfig
from .renderer import CameraConfig


class ConfigError(ValueError):
    """Malformed or unknown configuration content."""


def _merge_dataclass(cls, overrides: dict, where: str):
    """Build a dataclass from defaults + overrides; unknown keys rejected,
    list values coerced to tuples where the default is a tuple."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(overrides) - set(fields)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for k, v in overrides.items():
        current = getattr(defaults, k)
        if isinstance(current, tuple) and isinstance(v, list):
            v = tuple(v)
        kwargs[k] = v
    return dataclasses.replace(defaults, **kwargs)


@dataclass
class SysIdSettings:
    mask: str = "obj0.friction"
    window: int = 64
    window_at_first_motion: bool = True
    lr: float = 0.05
    steps: int = 60
    n_starts: int = 4

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class EvalSettings:
    modes: tuple = ("gt_first", "gt_state", "recon_first", "recon_all")
    horizon: int = 100
    n_episodes: int = 20
    frame_stride: int = 10
    noise_std: float = 0.0

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["modes"] = list(d["modes"])
        return d


@dataclass
class PolicyRunSettings:
    episodes_budget: int = 320
    batch: int = 8
    n_train_scenes: int = 16
    n_eval_scenes: int = 32
    eval_every: int = 10

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/out"
    env: PushTaskConfig = field(default_factory=PushTaskConfig)
    dynamics_model: ModelConfig = field(default_factory=ModelConfig)
    dynamics_train: TrainConfig = field(default_factory=TrainConfig)
    renderer: CameraConfig = field(default_factory=CameraConfig)
    stainf: StaInfConfig = field(default_factory=StaInfConfig)
    sysid: SysIdSettings = field(default_factory=SysIdSettings)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    policy_run: PolicyRunSettings = field(default_factory=PolicyRunSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)
    ball: BallTaskConfig = field(default_factory=BallTaskConfig)

    _SECTIONS = {
        "env": PushTaskConfig,
        "dynamics_model": ModelConfig,
        "dynamics_train": TrainConfig,
        "renderer": CameraConfig,
        "stainf": StaInfConfig,
        "sysid": SysIdSettings,
        "policy": PolicyConfig,
        "policy_run": PolicyRunSettings,
        "eval": EvalSettings,
        "ball": BallTaskConfig,
    }

    @staticmethod
    def from_dict(d: dict) -> "RunConfig":
        known = {"seed", "output_dir", *RunConfig._SECTIONS}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
        kwargs = {"seed": d.get("seed", 0), "output_dir": d.get("output_dir", "runs/out")}
        for name, cls in RunConfig._SECTIONS.items():
            overrides = d.get(name, {})
            if not isinstance(overrides, dict):
                raise ConfigError(f"section {name!r} must be an object")
            if name == "policy" and "hidden" in overrides and isinstance(overrides["hidden"], list):
                overrides = {**overrides, "hidden": tuple(overrides["hidden"])}
            kwargs[name] = _merge_dataclass(cls, overrides, name)
        return RunConfig(**kwargs)

    @staticmethod
    def load(path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
        return RunConfig.from_dict(raw)

    def to_dict(self) -> dict:
        out = {"seed": self.seed, "output_dir": self.output_dir}
        for name in self._SECTIONS:
            section = getattr(self, name)
            if hasattr(section, "to_dict"):
                out[name] = section.to_dict()
            else:
                d = dataclasses.asdict(section)
                for k, v in d.items():
                    if isinstance(v, tuple):
                        d[k] = list(v)
                out[name] = d
        return out

    def resolved_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def write_resolved(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "resolved_config.json"
        path.write_text(self.resolved_json())
        return path
