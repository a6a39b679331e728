"""Two-layer Markov sensor-failure process.

Each sensor ``i`` carries a binary up/down chain ``z_i``; each sensor group
``j`` carries its own chain ``y_j``. A sensor is effectively up when both its
own chain and its group's chain are up: ``x_i = z_i * y_group(i)``.

Random draws are consumed in a fixed order so traces replay exactly: one
uniform per sensor (ascending), then one per group (ascending), per step.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np


class FrozenChainError(ValueError):
    """p_fail + p_recover == 0: the chain never moves, so no steady state or mixing time exists."""


@dataclass(frozen=True)
class ChainParams:
    p_fail: float
    p_recover: float

    def __post_init__(self):
        for name in ("p_fail", "p_recover"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} is not a probability")

    @property
    def gap(self) -> float:
        return self.p_fail + self.p_recover

    def transition_matrix(self) -> np.ndarray:
        """Row-stochastic matrix over states (down, up)."""
        p, q = self.p_fail, self.p_recover
        return np.array([[1.0 - q, q], [p, 1.0 - p]])


# failure settings used throughout the experiments
SENSOR_DEFAULT = ChainParams(p_fail=0.01, p_recover=0.9)
GROUP_DEFAULT = ChainParams(p_fail=0.55, p_recover=0.9)


@dataclass(frozen=True)
class SensorLayout:
    group_of: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "group_of", tuple(int(g) for g in self.group_of))
        if not self.group_of:
            raise ValueError("layout needs at least one sensor")
        present = set(self.group_of)
        if present != set(range(len(present))):
            raise ValueError(f"groups must be numbered 0..g-1 with none empty, got {sorted(present)}")

    @classmethod
    def from_groups(cls, groups: Sequence[Sequence[int]]) -> "SensorLayout":
        d = sum(len(g) for g in groups)
        group_of = [-1] * d
        for j, members in enumerate(groups):
            for i in members:
                if group_of[i] != -1:
                    raise ValueError(f"sensor {i} assigned to two groups")
                group_of[i] = j
        if -1 in group_of:
            raise ValueError("every sensor must belong to a group")
        return cls(tuple(group_of))

    @property
    def d(self) -> int:
        return len(self.group_of)

    @property
    def g(self) -> int:
        return max(self.group_of) + 1

    @property
    def index(self) -> np.ndarray:
        return np.asarray(self.group_of, dtype=np.intp)


@dataclass
class MaskProcessState:
    z: np.ndarray
    y: np.ndarray
    x: np.ndarray


class EffectiveRates(NamedTuple):
    p_fail_eff: float
    p_recover_eff: float


def steady_state(params: ChainParams) -> float:
    if params.gap == 0:
        raise FrozenChainError("steady state undefined for a frozen chain (p_fail = p_recover = 0)")
    return params.p_recover / params.gap


def effective_rates(sensor: ChainParams, group: ChainParams) -> EffectiveRates:
    """Composite failure probability (exact) and the product approximation of the recovery rate."""
    p_fail_eff = 1.0 - (1.0 - sensor.p_fail) * (1.0 - group.p_fail)
    return EffectiveRates(p_fail_eff, sensor.p_recover * group.p_recover)


def stationary_up_rate(sensor: ChainParams, group: ChainParams) -> float:
    return steady_state(sensor) * steady_state(group)


def mixing_time_bound(sensor: ChainParams, group: ChainParams) -> float:
    """Conservative mixing-time bound ln 4 / min(gap_sensor, gap_group)."""
    g = min(sensor.gap, group.gap)
    if g <= 0:
        raise FrozenChainError("mixing time is infinite for a frozen chain")
    return math.log(4.0) / g


def _advance(state: np.ndarray, u: np.ndarray, params: ChainParams) -> np.ndarray:
    up = state.astype(bool)
    return np.where(up, u >= params.p_fail, u < params.p_recover).astype(np.int8)


def initial_state(layout: SensorLayout, sensor: ChainParams, group: ChainParams,
                  rng: np.random.Generator, batch: tuple[int, ...] = ()) -> MaskProcessState:
    """Draw every chain independently from its stationary marginal."""
    u = rng.random(batch + (layout.d + layout.g,))
    z = (u[..., :layout.d] < steady_state(sensor)).astype(np.int8)
    y = (u[..., layout.d:] < steady_state(group)).astype(np.int8)
    return MaskProcessState(z, y, z * y[..., layout.index])


def step(state: MaskProcessState, layout: SensorLayout, sensor: ChainParams, group: ChainParams,
         rng: np.random.Generator) -> MaskProcessState:
    """Advance all chains by one step; consumes d + g uniforms per state."""
    u = rng.random(state.z.shape[:-1] + (layout.d + layout.g,))
    z = _advance(state.z, u[..., :layout.d], sensor)
    y = _advance(state.y, u[..., layout.d:], group)
    return MaskProcessState(z, y, z * y[..., layout.index])


def _scan_chain(s0: np.ndarray, u: np.ndarray, params: ChainParams) -> np.ndarray:
    """Run ``len(u)`` steps of independent two-state chains, column-wise, without a Python loop.

    A uniform either forces the next state regardless of the current one
    (reset), copies the current state, or flips it. The state at time t is the
    value of the most recent reset XOR the parity of flips since.
    """
    nxt_if_up = u >= params.p_fail
    nxt_if_down = u < params.p_recover
    reset = nxt_if_up == nxt_if_down
    flip = nxt_if_down & ~nxt_if_up
    n = u.shape[0]
    flips = np.cumsum(flip, axis=0, dtype=np.int64)
    idx = np.where(reset, np.arange(n)[:, None], -1)
    last = np.maximum.accumulate(idx, axis=0)
    has_reset = last >= 0
    safe = np.where(has_reset, last, 0)
    cols = np.arange(u.shape[1])[None, :]
    base = np.where(has_reset, nxt_if_up[safe, cols], s0[None, :].astype(bool))
    since = flips - np.where(has_reset, flips[safe, cols], 0)
    return (base ^ (since % 2).astype(bool)).astype(np.int8)


def simulate_trace(layout: SensorLayout, sensor: ChainParams, group: ChainParams, T: int,
                   seed: int | np.random.Generator, return_layers: bool = False, block: int = 1 << 16):
    """Return a ``T x d`` int8 matrix whose row t is the effective mask x(t).

    Row 0 is the stationary initial draw; rows 1.. come from stepping. The
    random stream is identical to calling :func:`initial_state` then
    :func:`step` ``T - 1`` times with the same generator.
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    d, g = layout.d, layout.g
    st = initial_state(layout, sensor, group, rng)
    zs = np.empty((T, d), dtype=np.int8)
    ys = np.empty((T, g), dtype=np.int8)
    zs[0], ys[0] = st.z, st.y
    t = 1
    while t < T:
        n = min(block, T - t)
        u = rng.random((n, d + g))
        zs[t:t + n] = _scan_chain(zs[t - 1], u[:, :d], sensor)
        ys[t:t + n] = _scan_chain(ys[t - 1], u[:, d:], group)
        t += n
    xs = zs * ys[:, layout.index]
    if return_layers:
        return xs, zs, ys
    return xs


def write_trace_csv(path: str | Path, trace: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"x_{i}" for i in range(trace.shape[1])])
        for t, row in enumerate(trace):
            w.writerow([t, *row.tolist()])


def read_trace_csv(path: str | Path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return np.array([[int(v) for v in r[1:]] for r in rows[1:]], dtype=np.int8)
