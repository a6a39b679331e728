"""Flat JSON experiment configuration. Unknown keys are errors."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .encoders import ENCODERS, EncoderConfig
from .environments import ENVIRONMENTS
from .ppo import PPOConfig
from .sensor_failure import ChainParams

DESK_STEPS = {"chain5": 50_000}
DEFAULT_STEPS = 200_000


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    env: str = "pointmass"
    encoder: str = "mlp"
    wrapper: bool = True
    normalize: bool = True
    sensor_p_fail: float = 0.01
    sensor_p_recover: float = 0.9
    group_p_fail: float = 0.55
    group_p_recover: float = 0.9
    seeds: list[int] = field(default_factory=lambda: list(range(8)))
    eval_episodes: int = 100
    bootstrap_resamples: int = 10_000
    workers: int = 1
    out: str = "runs"
    checkpoint_dir: str | None = None
    # PPO
    total_timesteps: int | None = None
    learning_rate: float = 3e-4
    n_steps: int = 2048
    gamma: float = 0.99
    gae_lambda: float = 0.95
    n_minibatches: int = 32
    update_epochs: int = 10
    clip_coef: float = 0.2
    ent_coef: float = 0.0
    vf_coef: float = 0.5
    max_grad_norm: float = 0.5
    segment_len: int = 16
    burn_in: int = 8
    norm_adv: bool = True
    # encoders
    d_model: int = 128
    tf_layers: int = 2
    rnn_layers: int = 4
    n_heads: int = 2
    tf_dropout: float = 0.1
    seq_len: int = 16
    lru_r_min: float = 0.9
    lru_r_max: float = 0.999
    lru_max_phase: float = 6.28
    # mask simulation
    trace_steps: int = 1_000_000
    # bound verification
    delta: float = 0.1
    n_trials: int = 2000
    theory_gamma: float = 0.9
    policy_weights: list[float] | None = None

    def __post_init__(self):
        if self.env not in ENVIRONMENTS:
            raise ConfigError(f"env must be one of {sorted(ENVIRONMENTS)}, got {self.env!r}")
        if self.encoder not in ENCODERS:
            raise ConfigError(f"encoder must be one of {list(ENCODERS)}, got {self.encoder!r}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        self.seeds = [int(s) for s in self.seeds]

    @property
    def steps(self) -> int:
        if self.total_timesteps is not None:
            return int(self.total_timesteps)
        return DESK_STEPS.get(self.env, DEFAULT_STEPS)

    def ppo(self) -> PPOConfig:
        names = {f.name for f in fields(PPOConfig)} - {"total_timesteps"}
        return PPOConfig(total_timesteps=self.steps, **{n: getattr(self, n) for n in names})

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(**{f.name: getattr(self, f.name) for f in fields(EncoderConfig)})

    def chains(self) -> tuple[ChainParams | None, ChainParams | None]:
        if not self.wrapper:
            return None, None
        return (ChainParams(self.sensor_p_fail, self.sensor_p_recover),
                ChainParams(self.group_p_fail, self.group_p_recover))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
        return cls.from_dict(data)

    def with_overrides(self, pairs: list[str]) -> "ExperimentConfig":
        data = self.to_dict()
        for pair in pairs:
            key, sep, raw = pair.partition("=")
            if not sep:
                raise ConfigError(f"override {pair!r} is not key=value")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            data[key.strip()] = value
        return self.from_dict(data)
