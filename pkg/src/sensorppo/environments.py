"""Small native control tasks and the observation-failure wrapper."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .sensor_failure import (
    ChainParams,
    SensorLayout,
    initial_state,
    step as mask_step,
)


@dataclass(frozen=True)
class ActionSpace:
    kind: str  # "discrete" or "box"
    n: int = 0
    low: tuple[float, ...] = ()
    high: tuple[float, ...] = ()

    @property
    def dim(self) -> int:
        return 1 if self.kind == "discrete" else len(self.low)


@dataclass(frozen=True)
class EnvSpec:
    name: str
    obs_dim: int
    action_space: ActionSpace
    max_steps: int
    layout: SensorLayout

    def __post_init__(self):
        if self.layout.d != self.obs_dim:
            raise ValueError(f"{self.name}: sensor layout covers {self.layout.d} features, obs has {self.obs_dim}")


class StepResult(NamedTuple):
    observation: np.ndarray
    reward: float
    done: bool
    truncated: bool


class Env:
    spec: EnvSpec

    def __init__(self, seed: int = 0):
        self._rng = np.random.default_rng(seed)
        self.t = 0

    @property
    def obs_dim(self) -> int:
        return self.spec.obs_dim

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        self.t = 0
        self._reset_state()
        return self.observe()

    def step(self, action) -> StepResult:
        reward = self._transition(action)
        self.t += 1
        return StepResult(self.observe(), float(reward), False, self.t >= self.spec.max_steps)

    def _reset_state(self) -> None:
        raise NotImplementedError

    def _transition(self, action) -> float:
        raise NotImplementedError

    def observe(self) -> np.ndarray:
        raise NotImplementedError


class ChainMDP(Env):
    """Deterministic walk on a line; action 1 moves right, 0 moves left, reward 1 at the right end.

    The reward is paid for occupying the rightmost state, so from state 0 an
    always-right policy first collects it at t = n_states - 1.
    """

    def __init__(self, n_states: int = 5, n_actions: int = 2, max_steps: int = 50, seed: int = 0):
        super().__init__(seed)
        if n_actions != 2:
            raise ValueError("the chain task has exactly two actions")
        self.n_states, self.n_actions = n_states, n_actions
        groups = np.array_split(np.arange(n_states), min(3, n_states))
        self.spec = EnvSpec("chain5" if n_states == 5 else f"chain{n_states}", n_states,
                            ActionSpace("discrete", n=n_actions), max_steps,
                            SensorLayout.from_groups([g.tolist() for g in groups]))
        self.state = 0

    def _reset_state(self):
        self.state = 0

    def _transition(self, action) -> float:
        a = int(np.asarray(action).reshape(-1)[0])
        reward = float(self.state == self.n_states - 1)
        self.state = int(self.next_state(self.state, a))
        return reward

    def next_state(self, s: int, a: int) -> int:
        return min(s + 1, self.n_states - 1) if a == 1 else max(s - 1, 0)

    def observe(self) -> np.ndarray:
        return self.observation_map()[self.state].copy()

    def observation_map(self) -> np.ndarray:
        return np.eye(self.n_states)

    def transition_tensor(self) -> np.ndarray:
        P = np.zeros((self.n_states, self.n_actions, self.n_states))
        for s in range(self.n_states):
            for a in range(self.n_actions):
                P[s, a, self.next_state(s, a)] = 1.0
        return P

    def reward_table(self) -> np.ndarray:
        R = np.zeros((self.n_states, self.n_actions))
        R[-1, :] = 1.0
        return R


class PointMass(Env):
    """Planar point mass pushed toward the origin."""

    spec = EnvSpec("pointmass", 6, ActionSpace("box", low=(-1.0, -1.0), high=(1.0, 1.0)), 200,
                   SensorLayout.from_groups([[0, 1], [2, 3], [4, 5]]))

    def __init__(self, seed: int = 0):
        super().__init__(seed)
        self.pos = np.zeros(2)
        self.vel = np.zeros(2)

    def _reset_state(self):
        self.pos = self._rng.uniform(-1.0, 1.0, size=2)
        self.vel = np.zeros(2)

    def _transition(self, action) -> float:
        a = np.clip(np.asarray(action, dtype=float).reshape(2), -1.0, 1.0)
        self.vel = 0.9 * self.vel + 0.1 * a
        self.pos = self.pos + 0.1 * self.vel
        return -float(self.pos @ self.pos) - 0.01 * float(a @ a)

    def observe(self) -> np.ndarray:
        return np.concatenate([self.pos, self.vel, -self.pos])


def wrap_angle(theta: float) -> float:
    return (theta + math.pi) % (2 * math.pi) - math.pi


class Pendulum(Env):
    """Torque-limited swing-up; theta = 0 is upright."""

    spec = EnvSpec("pendulum", 3, ActionSpace("box", low=(-2.0,), high=(2.0,)), 200,
                   SensorLayout.from_groups([[0, 1], [2]]))

    def __init__(self, seed: int = 0):
        super().__init__(seed)
        self.theta = math.pi
        self.omega = 0.0

    def _reset_state(self):
        self.theta = float(self._rng.uniform(-math.pi, math.pi))
        self.omega = float(self._rng.uniform(-1.0, 1.0))

    def set_state(self, theta: float, omega: float) -> np.ndarray:
        self.theta, self.omega = float(theta), float(omega)
        return self.observe()

    def _transition(self, action) -> float:
        a = float(np.clip(np.asarray(action, dtype=float).reshape(-1)[0], -2.0, 2.0))
        reward = -(wrap_angle(self.theta) ** 2 + 0.1 * self.omega ** 2 + 0.001 * a * a)
        self.omega = float(np.clip(self.omega + 0.05 * (-10.0 * math.sin(self.theta + math.pi) + 3.0 * a), -8.0, 8.0))
        self.theta = self.theta + 0.05 * self.omega
        return reward

    def observe(self) -> np.ndarray:
        return np.array([math.cos(self.theta), math.sin(self.theta), self.omega])


ENVIRONMENTS = {"chain5": ChainMDP, "pointmass": PointMass, "pendulum": Pendulum}


def make_env(name: str, seed: int = 0) -> Env:
    try:
        return ENVIRONMENTS[name](seed=seed)
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}") from None


class RunningNormalizer:
    """Streaming per-feature mean/variance (Welford) with clipped standardisation."""

    def __init__(self, dim: int, clip: float = 10.0):
        self.count = 0.0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)
        self.clip = clip

    @property
    def var(self) -> np.ndarray:
        return self.m2 / self.count if self.count > 0 else np.ones_like(self.mean)

    def update(self, x: np.ndarray) -> None:
        self.count += 1.0
        delta = x - self.mean
        self.mean = self.mean + delta / self.count
        self.m2 = self.m2 + delta * (x - self.mean)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.clip((x - self.mean) / np.sqrt(np.maximum(self.var, 1e-8)), -self.clip, self.clip)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {"count": np.array([self.count]), "mean": self.mean.copy(), "m2": self.m2.copy()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.count = float(np.asarray(state["count"]).reshape(-1)[0])
        self.mean = np.array(state["mean"], dtype=float)
        self.m2 = np.array(state["m2"], dtype=float)


class ObservationWrapper:
    """Normalise raw features and, when failure parameters are given, mask them.

    Without failure parameters the output is the d normalised features. With
    them the output has 2d entries: masked normalised features followed by the
    mask bits, which are never normalised or masked themselves. The mask process
    advances once per environment step and holds still across resets.
    Normaliser statistics update from raw (pre-mask) observations while
    ``training`` is set.
    """

    def __init__(self, env: Env, sensor: ChainParams | None = None, group: ChainParams | None = None,
                 normalize: bool = True, seed: int | np.random.Generator = 0):
        if (sensor is None) != (group is None):
            raise ValueError("give both sensor and group chain parameters, or neither")
        self.env = env
        self.spec = env.spec
        self.sensor, self.group = sensor, group
        self.failures = sensor is not None
        self.normalizer = RunningNormalizer(env.spec.obs_dim) if normalize else None
        self.training = True
        self._rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.mask_state = initial_state(env.spec.layout, sensor, group, self._rng) if self.failures else None
        self.last_raw: np.ndarray | None = None

    @property
    def obs_dim(self) -> int:
        return 2 * self.spec.obs_dim if self.failures else self.spec.obs_dim

    @property
    def mask(self) -> np.ndarray:
        if self.mask_state is None:
            return np.ones(self.spec.obs_dim, dtype=np.int8)
        return self.mask_state.x

    def _emit(self, raw: np.ndarray) -> np.ndarray:
        self.last_raw = raw
        if self.normalizer is not None:
            if self.training:
                self.normalizer.update(raw)
            feats = self.normalizer(raw)
        else:
            feats = np.asarray(raw, dtype=float)
        if not self.failures:
            return feats
        x = self.mask_state.x
        return np.concatenate([np.where(x == 1, feats, 0.0), x.astype(float)])

    def reset(self, seed: int | None = None) -> np.ndarray:
        return self._emit(self.env.reset(seed))

    def step(self, action) -> StepResult:
        res = self.env.step(action)
        if self.failures:
            self.mask_state = mask_step(self.mask_state, self.spec.layout, self.sensor, self.group, self._rng)
        return StepResult(self._emit(res.observation), res.reward, res.done, res.truncated)


def dump_trajectory(path: str | Path, records: Iterable[dict]) -> None:
    """Write one JSON object per step with keys obs, mask, action, reward, done."""
    with open(path, "w") as fh:
        for rec in records:
            row = {k: (np.asarray(v).tolist() if isinstance(v, np.ndarray) else v)
                   for k, v in rec.items()}
            fh.write(json.dumps(row) + "\n")
