"""PPO with GAE, sequence-aware minibatching and deterministic evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import EncoderConfig, HistoryBuffer, RecurrentEncoder, build_encoder, burn_in_unroll, reset_on_done
from .environments import ActionSpace
from .layers import Linear, Module

LOG_2PI = math.log(2.0 * math.pi)


class RolloutError(RuntimeError):
    pass


@dataclass(frozen=True)
class PPOConfig:
    total_timesteps: int = 1_000_000
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


# ---------------------------------------------------------------------- agent

class Agent(Module):
    """Shared encoder feeding separate actor and critic heads."""

    def __init__(self, obs_dim: int, action_space: ActionSpace, encoder: str,
                 enc_cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.action_space = action_space
        self.encoder_name = encoder
        self.encoder = build_encoder(encoder, obs_dim, enc_cfg, rng)
        self.discrete = action_space.kind == "discrete"
        n_out = action_space.n if self.discrete else action_space.dim
        self.actor = Linear(enc_cfg.d_model, n_out, rng, gain=0.01)
        self.critic = Linear(enc_cfg.d_model, 1, rng, gain=1.0)
        if not self.discrete:
            self.param("log_std", np.zeros(n_out))

    @property
    def kind(self) -> str:
        return self.encoder.kind

    @property
    def sequential(self) -> bool:
        return self.kind != "mlp"

    def set_dropout_rng(self, rng: np.random.Generator | None) -> None:
        if hasattr(self.encoder, "set_dropout_rng"):
            self.encoder.set_dropout_rng(rng)

    def value(self, z) -> Tensor:
        return self.critic(z)[:, 0]

    def log_prob_entropy(self, z, actions: np.ndarray) -> tuple[Tensor, Tensor]:
        out = self.actor(z)
        if self.discrete:
            lsm = ad.log_softmax(out)
            a = actions.reshape(-1).astype(np.intp)
            logp = lsm[np.arange(len(a)), a]
            ent = -ad.tsum(ad.exp(lsm) * lsm, axis=1)
            return logp, ent
        std = ad.exp(self.log_std)
        zscore = (Tensor(actions) - out) / std
        k = out.shape[1]
        logp = ad.tsum(zscore * zscore, axis=1) * -0.5 - ad.tsum(self.log_std) - 0.5 * k * LOG_2PI
        ent = ad.tsum(self.log_std) + 0.5 * k * (1.0 + LOG_2PI)
        return logp, ent * np.ones(out.shape[0])

    def sample(self, z: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        out = self.actor(z).data[0]
        if self.discrete:
            p = np.exp(out - out.max())
            p /= p.sum()
            return np.array([min(int(np.searchsorted(np.cumsum(p), rng.random())), len(p) - 1)], dtype=float)
        return out + np.exp(self.log_std.data) * rng.standard_normal(out.shape)

    def mode(self, z: np.ndarray) -> np.ndarray:
        out = self.actor(z).data[0]
        if self.discrete:
            return np.array([float(np.argmax(out))])
        return out

    # --- per-step feature extraction with the encoder's own memory

    def new_memory(self, obs_dim: int):
        if self.kind == "recurrent":
            return self.encoder.initial_state(1)
        if self.kind == "transformer":
            return HistoryBuffer(self.encoder.seq_len, obs_dim)
        return None

    def step_features(self, memory, obs: np.ndarray, start: bool):
        """Features for one observation. Returns (z, new_memory, record) where record holds
        what a later minibatch needs to recompute z."""
        with ad.no_grad():
            if self.kind == "mlp":
                return self.encoder(obs[None]).data, memory, {}
            if self.kind == "recurrent":
                state = reset_on_done(memory, [float(start)])
                new, z = self.encoder.step(state, obs[None])
                return z.data, self.encoder.pack(new), {"state": memory}
            buf = memory
            if start:
                buf.reset()
            buf.push(obs)
            window, invalid = buf.view()
            z = self.encoder(window[None], invalid[None])
            return z.data, buf, {"window": window, "invalid": invalid}

    def peek_value(self, memory, obs: np.ndarray, start: bool) -> float:
        if self.kind == "transformer":
            memory = memory.copy()
        z, _, _ = self.step_features(memory, obs, start)
        with ad.no_grad():
            return float(self.value(z).data[0])


# --------------------------------------------------------------------- rollout

@dataclass
class RolloutBuffer:
    obs: np.ndarray
    actions: np.ndarray
    logprobs: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    truncated: np.ndarray
    trunc_values: np.ndarray
    starts: np.ndarray
    last_value: float = 0.0
    states: np.ndarray | None = None
    windows: np.ndarray | None = None
    invalids: np.ndarray | None = None
    episode_returns: list[float] = field(default_factory=list)
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.rewards)


class Runner:
    """Owns one environment instance and the agent's per-episode memory across rollouts."""

    def __init__(self, env, agent: Agent, rng: np.random.Generator):
        self.env, self.agent, self.rng = env, agent, rng
        self.obs_dim = env.obs_dim
        self.obs = env.reset()
        self.start = True
        self.memory = agent.new_memory(self.obs_dim)
        self.ep_return = 0.0
        self.global_step = 0

    def collect(self, n_steps: int) -> RolloutBuffer:
        agent = self.agent
        A = agent.action_space.dim
        buf = RolloutBuffer(
            obs=np.zeros((n_steps, self.obs_dim)), actions=np.zeros((n_steps, A)),
            logprobs=np.zeros(n_steps), values=np.zeros(n_steps), rewards=np.zeros(n_steps),
            dones=np.zeros(n_steps), truncated=np.zeros(n_steps), trunc_values=np.zeros(n_steps),
            starts=np.zeros(n_steps))
        if agent.kind == "recurrent":
            buf.states = np.zeros((n_steps, agent.encoder.state_size))
        elif agent.kind == "transformer":
            L = agent.encoder.seq_len
            buf.windows = np.zeros((n_steps, L, self.obs_dim))
            buf.invalids = np.zeros((n_steps, L), dtype=bool)
        agent.eval()
        for t in range(n_steps):
            buf.obs[t] = self.obs
            buf.starts[t] = float(self.start)
            z, self.memory, rec = agent.step_features(self.memory, self.obs, self.start)
            if "state" in rec:
                buf.states[t] = rec["state"][0]
            if "window" in rec:
                buf.windows[t], buf.invalids[t] = rec["window"], rec["invalid"]
            with ad.no_grad():
                action = agent.sample(z, self.rng)
                logp, _ = agent.log_prob_entropy(z, action[None])
                value = float(agent.value(z).data[0])
            if not (np.all(np.isfinite(action)) and math.isfinite(value)):
                raise RolloutError(f"non-finite action or value at rollout step {t}")
            res = self.env.step(action if not agent.discrete else int(action[0]))
            buf.actions[t], buf.logprobs[t], buf.values[t] = action, logp.data[0], value
            buf.rewards[t] = res.reward
            self.ep_return += res.reward
            self.global_step += 1
            ended = res.done or res.truncated
            buf.dones[t] = float(ended)
            buf.truncated[t] = float(res.truncated and not res.done)
            if buf.truncated[t]:
                buf.trunc_values[t] = agent.peek_value(self.memory, res.observation, False)
            if ended:
                buf.episode_returns.append(self.ep_return)
                self.ep_return = 0.0
                self.obs = self.env.reset()
                self.start = True
            else:
                self.obs = res.observation
                self.start = False
        buf.last_value = agent.peek_value(self.memory, self.obs, self.start)
        return buf


def compute_gae(rewards, values, dones, truncated, trunc_values, last_value: float,
                gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Generalised advantage estimates and value targets.

    ``dones[t]`` marks the end of an episode at step t (termination or
    truncation). Truncated steps bootstrap from ``trunc_values[t]``; terminal
    steps from zero; the final step of the buffer from ``last_value``.
    """
    n = len(rewards)
    adv = np.zeros(n)
    running = 0.0
    for t in range(n - 1, -1, -1):
        if dones[t]:
            next_v = trunc_values[t] if truncated[t] else 0.0
        else:
            next_v = last_value if t == n - 1 else values[t + 1]
        delta = rewards[t] + gamma * next_v - values[t]
        running = delta + gamma * lam * (1.0 - dones[t]) * running
        adv[t] = running
    return adv, adv + values


# ---------------------------------------------------------------------- update

def minibatch_plan(n_steps: int, cfg: PPOConfig, sequential: bool, rng: np.random.Generator) -> list[np.ndarray]:
    """Index groups for one epoch: shuffled transitions, or shuffled segment starts for sequence models."""
    if sequential:
        if n_steps % cfg.segment_len:
            raise ValueError(f"n_steps {n_steps} is not a multiple of segment_len {cfg.segment_len}")
        units = np.arange(0, n_steps, cfg.segment_len)
    else:
        units = np.arange(n_steps)
    if len(units) % cfg.n_minibatches:
        raise ValueError(f"{len(units)} units cannot be split into {cfg.n_minibatches} minibatches")
    return np.split(rng.permutation(units), cfg.n_minibatches)


def minibatch_features(agent: Agent, buf: RolloutBuffer, group: np.ndarray, cfg: PPOConfig) -> tuple[Tensor, np.ndarray]:
    """Recompute features (with gradient recording) for a minibatch; returns (z, step indices)."""
    if agent.kind == "mlp":
        return agent.encoder(buf.obs[group]), group
    K = cfg.segment_len
    idx = (group[:, None] + np.arange(K)[None, :]).reshape(-1)
    if agent.kind == "transformer":
        return agent.encoder(buf.windows[idx], buf.invalids[idx]), idx
    enc: RecurrentEncoder = agent.encoder
    states = []
    for s in group:
        b = max(0, s - cfg.burn_in)
        states.append(burn_in_unroll(enc, buf.states[b:b + 1], buf.obs[b:s, None, :], buf.starts[b:s, None]))
    state0 = np.concatenate(states, axis=0)
    obs_seq = np.stack([buf.obs[s:s + K] for s in group], axis=1)
    starts = np.stack([buf.starts[s:s + K] for s in group], axis=1)
    _, zs = enc.unroll(state0, obs_seq, starts)
    z = ad.reshape(ad.stack(zs, axis=1), (len(group) * K, -1))
    return z, idx


@dataclass
class MinibatchLoss:
    loss: Tensor
    pg_loss: Tensor
    v_loss: Tensor
    entropy: Tensor
    logratio: Tensor
    ratio: Tensor


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def minibatch_loss(agent: Agent, buf: RolloutBuffer, group: np.ndarray, cfg: PPOConfig) -> MinibatchLoss:
    """Clipped surrogate plus value loss for one minibatch; call inside a tape to record gradients."""
    z, idx = minibatch_features(agent, buf, group, cfg)
    newlogp, entropy = agent.log_prob_entropy(z, buf.actions[idx])
    newv = agent.value(z)
    logratio = newlogp - buf.logprobs[idx]
    ratio = ad.exp(logratio)
    adv = buf.advantages[idx]
    if cfg.norm_adv:
        adv = normalize_advantages(adv)
    clipped = ad.clip(ratio, 1 - cfg.clip_coef, 1 + cfg.clip_coef)
    pg_loss = ad.mean(ad.maximum(ratio * -adv, clipped * -adv))
    v_loss = ad.mean(ad.square(newv - buf.returns[idx]))
    ent = ad.mean(entropy)
    loss = pg_loss - cfg.ent_coef * ent + cfg.vf_coef * v_loss
    return MinibatchLoss(loss, pg_loss, v_loss, ent, logratio, ratio)


def ppo_update(agent: Agent, optimizer: ad.Adam, buf: RolloutBuffer, cfg: PPOConfig,
               rng: np.random.Generator) -> dict:
    params = agent.named_parameters()
    stats = {"policy_loss": [], "value_loss": [], "entropy": [], "clip_frac": [], "approx_kl": []}
    skipped = 0
    first_kl = None
    agent.train(True)
    for epoch in range(cfg.update_epochs):
        for group in minibatch_plan(len(buf), cfg, agent.sequential, rng):
            try:
                with ad.Tape() as tape:
                    mb = minibatch_loss(agent, buf, group, cfg)
            except ad.NumericDomainError:
                skipped += 1
                continue
            if not math.isfinite(mb.loss.item()):
                skipped += 1
                continue
            for p in params.values():
                p.grad = None
            tape.backward(mb.loss)
            grads = ad.collect_grads(params)
            clipped, _ = ad.clip_global_norm(list(grads.values()), cfg.max_grad_norm)
            try:
                optimizer.step(dict(zip(grads.keys(), clipped)))
            except ad.NonFiniteGradientError:
                skipped += 1
                continue
            lr = mb.logratio.data
            r = mb.ratio.data
            kl = float(np.mean((r - 1.0) - lr))
            if first_kl is None:
                first_kl = kl
            stats["policy_loss"].append(mb.pg_loss.item())
            stats["value_loss"].append(mb.v_loss.item())
            stats["entropy"].append(mb.entropy.item())
            stats["clip_frac"].append(float(np.mean(np.abs(r - 1.0) > cfg.clip_coef)))
            stats["approx_kl"].append(kl)
    agent.eval()
    out = {k: (float(np.mean(v)) if v else float("nan")) for k, v in stats.items()}
    out["first_approx_kl"] = first_kl if first_kl is not None else float("nan")
    out["skipped_minibatches"] = skipped
    return out


# ------------------------------------------------------------------ training

def train(agent: Agent, runner: Runner, cfg: PPOConfig, rng: np.random.Generator, log=None) -> list[dict]:
    """Run ``total_timesteps // n_steps`` collect/update rounds; ``log`` receives each metrics row."""
    optimizer = ad.Adam(agent.named_parameters(), lr=cfg.learning_rate)
    history = []
    for _ in range(cfg.total_timesteps // cfg.n_steps):
        buf = runner.collect(cfg.n_steps)
        buf.advantages, buf.returns = compute_gae(buf.rewards, buf.values, buf.dones, buf.truncated,
                                                  buf.trunc_values, buf.last_value, cfg.gamma, cfg.gae_lambda)
        metrics = ppo_update(agent, optimizer, buf, cfg, rng)
        row = {
            "global_step": runner.global_step,
            "mean_episodic_return": float(np.mean(buf.episode_returns)) if buf.episode_returns else None,
            "episodes": len(buf.episode_returns),
            **metrics,
        }
        history.append(row)
        if log is not None:
            log(row)
    return history


def evaluate(agent: Agent, env, n_episodes: int) -> list[float]:
    """Deterministic (mean / argmax action) episodic returns."""
    agent.eval()
    if hasattr(env, "training"):
        env.training = False
    returns = []
    for _ in range(n_episodes):
        obs = env.reset()
        memory = agent.new_memory(env.obs_dim)
        start, total = True, 0.0
        while True:
            z, memory, _ = agent.step_features(memory, obs, start)
            with ad.no_grad():
                action = agent.mode(z)
            res = env.step(action if not agent.discrete else int(action[0]))
            total += res.reward
            if res.done or res.truncated:
                break
            obs, start = res.observation, False
        returns.append(total)
    return returns
