"""Observation encoders: MLP, GRU, LRU and a windowed Transformer.

Every encoder emits a ``d_model``-wide feature so the actor and critic heads do
not care which one produced it. Three calling conventions exist:

* ``mlp``: ``encoder(obs[B, d_in]) -> z[B, d]``
* recurrent (``gru``, ``lru``): ``encoder.step(state, obs[B, d_in]) -> (state, z)``
  where ``state`` is a list of per-layer tensors, packed to ``[B, state_size]``
  arrays for storage.
* ``transformer``: ``encoder(window[B, L, d_in], invalid[B, L]) -> z[B, d]``
  fed from a :class:`HistoryBuffer`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import LayerNorm, Linear, Module, orthogonal

ENCODERS = ("mlp", "gru", "lru", "transformer")


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int = 128
    tf_layers: int = 2
    rnn_layers: int = 4
    n_heads: int = 2
    tf_dropout: float = 0.1
    seq_len: int = 16
    lru_r_min: float = 0.9
    lru_r_max: float = 0.999
    lru_max_phase: float = 6.28


# ------------------------------------------------------------------------ MLP

class MLPEncoder(Module):
    kind = "mlp"

    def __init__(self, obs_dim: int, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.obs_dim, self.out_dim = obs_dim, cfg.d_model
        self.fc1 = Linear(obs_dim, cfg.d_model, rng)
        self.fc2 = Linear(cfg.d_model, cfg.d_model, rng)

    def __call__(self, obs) -> Tensor:
        return self.fc2(self.fc1(obs).tanh()).tanh()


# -------------------------------------------------------------- recurrent base

def reset_on_done(state, dones) -> list:
    """Zero the rows of every per-layer state whose done flag is set: h <- (1 - d) h."""
    keep = 1.0 - np.asarray(dones, dtype=float).reshape(-1, 1)
    if isinstance(state, np.ndarray):
        return state * keep
    return [ad.mul(h, keep) for h in state]


class RecurrentEncoder(Module):
    kind = "recurrent"
    state_widths: list[int]

    @property
    def state_size(self) -> int:
        return sum(self.state_widths)

    def initial_state(self, batch: int) -> np.ndarray:
        return np.zeros((batch, self.state_size))

    def unpack(self, packed) -> list[Tensor]:
        packed = ad.as_tensor(packed)
        out, i = [], 0
        for w in self.state_widths:
            out.append(Tensor(packed.data[:, i:i + w]) if not packed.requires_grad else packed[:, i:i + w])
            i += w
        return out

    @staticmethod
    def pack(state: list[Tensor]) -> np.ndarray:
        return np.concatenate([h.data for h in state], axis=1)

    def step(self, state, obs) -> tuple[list[Tensor], Tensor]:
        raise NotImplementedError

    def unroll(self, state, obs_seq: np.ndarray, dones: np.ndarray) -> tuple[list[Tensor], list[Tensor]]:
        """Run ``T`` steps over ``obs_seq[T, B, d_in]``; ``dones[t]`` resets memory before step t."""
        if isinstance(state, np.ndarray):
            state = self.unpack(state)
        zs = []
        for t in range(obs_seq.shape[0]):
            state = reset_on_done(state, dones[t])
            state, z = self.step(state, obs_seq[t])
            zs.append(z)
        return state, zs


def burn_in_unroll(encoder: RecurrentEncoder, state0: np.ndarray, obs_seq: np.ndarray,
                   dones: np.ndarray) -> np.ndarray:
    """Warm the hidden state over a prefix without recording gradients."""
    if obs_seq.shape[0] == 0:
        return np.array(state0, copy=True)
    with ad.no_grad():
        state, _ = encoder.unroll(state0, obs_seq, dones)
    return encoder.pack(state)


# ------------------------------------------------------------------------ GRU

class GRUCell(Module):
    """r = s(W_r x + U_r h), u = s(W_u x + U_u h), c = tanh(W_h x + U_h (r*h)), h' = (1-u) h + u c."""

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.hidden = hidden
        self.wx = Linear(n_in, 3 * hidden, rng, gain=1.0)
        self.param("u_ru", np.concatenate([_orth(hidden, rng), _orth(hidden, rng)], axis=1))
        self.param("u_h", _orth(hidden, rng))

    def __call__(self, h: Tensor, x) -> Tensor:
        H = self.hidden
        gx = self.wx(x)
        gh = ad.matmul(h, self.u_ru)
        r = ad.sigmoid(gx[:, :H] + gh[:, :H])
        u = ad.sigmoid(gx[:, H:2 * H] + gh[:, H:])
        cand = ad.tanh(gx[:, 2 * H:] + ad.matmul(r * h, self.u_h))
        return (1.0 - u) * h + u * cand


def _orth(n: int, rng: np.random.Generator) -> np.ndarray:
    return orthogonal((n, n), 1.0, rng)


class GRUEncoder(RecurrentEncoder):
    def __init__(self, obs_dim: int, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.obs_dim, self.out_dim = obs_dim, cfg.d_model
        self.embed = Linear(obs_dim, cfg.d_model, rng)
        self.cells = [GRUCell(cfg.d_model, cfg.d_model, rng) for _ in range(cfg.rnn_layers)]
        self.state_widths = [cfg.d_model] * cfg.rnn_layers

    def step(self, state, obs):
        if isinstance(state, np.ndarray):
            state = self.unpack(state)
        x = ad.tanh(self.embed(_batch(obs, self.obs_dim)))
        new = []
        for cell, h in zip(self.cells, state):
            x = cell(h, x)
            new.append(x)
        return new, x


# ------------------------------------------------------------------------ LRU

def diagonal_recurrence(lam: np.ndarray, B: np.ndarray, xs: np.ndarray, h0: np.ndarray | None = None) -> np.ndarray:
    """Reference complex recurrence h_t = lam * h_{t-1} + B x_t; returns all h_t (rows)."""
    h = np.zeros(lam.shape, dtype=complex) if h0 is None else np.asarray(h0, dtype=complex)
    out = []
    for x in xs:
        h = lam * h + B @ x
        out.append(h)
    return np.array(out)


def lru_init(n: int, r_min: float, r_max: float, max_phase: float, rng: np.random.Generator):
    """Sample eigenvalues uniformly on the ring r_min <= |lambda| <= r_max; returns (nu_log, theta_log)."""
    if not (0.0 < r_min <= r_max < 1.0):
        raise ConfigurationError(f"LRU moduli must satisfy 0 < r_min <= r_max < 1, got [{r_min}, {r_max}]")
    if max_phase <= 0:
        raise ConfigurationError("max_phase must be positive")
    u1 = rng.random(n)
    u2 = rng.uniform(1e-6, 1.0, n)
    nu = -0.5 * np.log(u1 * (r_max ** 2 - r_min ** 2) + r_min ** 2)
    return np.log(nu), np.log(max_phase * u2)


class LRULayer(Module):
    """Diagonal complex linear recurrence with a real readout, then LN(x + GLU(y))."""

    def __init__(self, dim: int, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.dim = dim
        nu_log, theta_log = lru_init(dim, cfg.lru_r_min, cfg.lru_r_max, cfg.lru_max_phase, rng)
        self.param("nu_log", nu_log)
        self.param("theta_log", theta_log)
        mod = np.exp(-np.exp(nu_log))
        self.param("gamma_log", np.log(np.sqrt(1.0 - mod ** 2)))
        scale = 1.0 / math.sqrt(2 * dim)
        self.param("b_re", rng.standard_normal((dim, dim)) * scale)
        self.param("b_im", rng.standard_normal((dim, dim)) * scale)
        self.param("c_re", rng.standard_normal((dim, dim)) / math.sqrt(dim))
        self.param("c_im", rng.standard_normal((dim, dim)) / math.sqrt(dim))
        self.param("d_skip", rng.standard_normal(dim))
        self.glu_a = Linear(dim, dim, rng, gain=1.0)
        self.glu_b = Linear(dim, dim, rng, gain=1.0)
        self.norm = LayerNorm(dim)

    def eigenvalues(self) -> tuple[Tensor, Tensor]:
        mod = ad.exp(-ad.exp(self.nu_log))
        phase = ad.exp(self.theta_log)
        return mod * ad.cos(phase), mod * ad.sin(phase)

    def __call__(self, h_re: Tensor, h_im: Tensor, x: Tensor):
        lam_re, lam_im = self.eigenvalues()
        gamma = ad.exp(self.gamma_log)
        bx_re = ad.matmul(x, self.b_re) * gamma
        bx_im = ad.matmul(x, self.b_im) * gamma
        new_re = lam_re * h_re - lam_im * h_im + bx_re
        new_im = lam_re * h_im + lam_im * h_re + bx_im
        y = ad.matmul(new_re, self.c_re) - ad.matmul(new_im, self.c_im) + self.d_skip * x
        out = self.norm(x + self.glu_a(y) * ad.sigmoid(self.glu_b(y)))
        return new_re, new_im, out


class LRUEncoder(RecurrentEncoder):
    def __init__(self, obs_dim: int, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.obs_dim, self.out_dim = obs_dim, cfg.d_model
        self.embed = Linear(obs_dim, cfg.d_model, rng)
        self.blocks = [LRULayer(cfg.d_model, cfg, rng) for _ in range(cfg.rnn_layers)]
        # real and imaginary halves per layer
        self.state_widths = [cfg.d_model] * (2 * cfg.rnn_layers)

    def step(self, state, obs):
        if isinstance(state, np.ndarray):
            state = self.unpack(state)
        x = ad.tanh(self.embed(_batch(obs, self.obs_dim)))
        new = []
        for k, block in enumerate(self.blocks):
            h_re, h_im, x = block(state[2 * k], state[2 * k + 1], x)
            new += [h_re, h_im]
        return new, x


# ---------------------------------------------------------------- Transformer

class HistoryBuffer:
    """Ring of the last ``capacity`` observations with validity flags."""

    def __init__(self, capacity: int, dim: int):
        self.capacity, self.dim = capacity, dim
        self.slots = np.zeros((capacity, dim))
        self.valid = np.zeros(capacity, dtype=bool)
        self.cursor = 0

    def reset(self) -> None:
        self.valid[:] = False
        self.cursor = 0

    def push(self, obs: np.ndarray) -> None:
        self.slots[self.cursor] = obs
        self.valid[self.cursor] = True
        self.cursor = (self.cursor + 1) % self.capacity

    def view(self) -> tuple[np.ndarray, np.ndarray]:
        """Rolled window (oldest valid first) and the padding mask (True = invalid)."""
        n = int(self.valid.sum())
        order = (self.cursor - n + np.arange(self.capacity)) % self.capacity
        return self.slots[order].copy(), ~self.valid[order]

    def copy(self) -> "HistoryBuffer":
        other = HistoryBuffer(self.capacity, self.dim)
        other.slots = self.slots.copy()
        other.valid = self.valid.copy()
        other.cursor = self.cursor
        return other


def sinusoidal_encoding(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    freq = np.exp(-math.log(10000.0) * (np.arange(0, dim, 2) / dim))
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq[: dim // 2])
    return pe


class EncoderLayer(Module):
    """Pre-norm self-attention block with a GELU feed-forward of width 4d."""

    def __init__(self, dim: int, n_heads: int, dropout: float, rng: np.random.Generator):
        super().__init__()
        if dim % n_heads:
            raise ConfigurationError(f"d_model {dim} not divisible by {n_heads} heads")
        self.dim, self.n_heads, self.p = dim, n_heads, dropout
        self.ln1 = LayerNorm(dim)
        self.qkv = Linear(dim, 3 * dim, rng, gain=1.0)
        self.proj = Linear(dim, dim, rng, gain=1.0)
        self.ln2 = LayerNorm(dim)
        self.ff1 = Linear(dim, 4 * dim, rng, gain=1.0)
        self.ff2 = Linear(4 * dim, dim, rng, gain=1.0)
        self.rng: np.random.Generator | None = None

    def attention(self, x: Tensor, invalid: np.ndarray) -> Tensor:
        B, L, D = x.shape
        h, dh = self.n_heads, D // self.n_heads
        qkv = ad.transpose(ad.reshape(self.qkv(x), (B, L, 3, h, dh)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = ad.matmul(q, ad.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
        attn = ad.masked_softmax(scores, invalid[:, None, None, :])
        out = ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3))
        return self.proj(ad.reshape(out, (B, L, D)))

    def __call__(self, x: Tensor, invalid: np.ndarray) -> Tensor:
        x = x + ad.dropout(self.attention(self.ln1(x), invalid), self.p, self.rng, self.training)
        hidden = ad.dropout(ad.gelu(self.ff1(self.ln2(x))), self.p, self.rng, self.training)
        return x + ad.dropout(self.ff2(hidden), self.p, self.rng, self.training)


class TransformerEncoder(Module):
    kind = "transformer"

    def __init__(self, obs_dim: int, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.obs_dim, self.out_dim, self.seq_len = obs_dim, cfg.d_model, cfg.seq_len
        self.inp = Linear(obs_dim, cfg.d_model, rng, gain=1.0)
        self.layers = [EncoderLayer(cfg.d_model, cfg.n_heads, cfg.tf_dropout, rng) for _ in range(cfg.tf_layers)]
        self.norm = LayerNorm(cfg.d_model)
        self.param("pool_w", rng.standard_normal(cfg.d_model) / math.sqrt(cfg.d_model))
        self.param("pool_b", np.zeros(1))
        self.pe = sinusoidal_encoding(cfg.seq_len, cfg.d_model)

    def set_dropout_rng(self, rng: np.random.Generator | None) -> None:
        for layer in self.layers:
            layer.rng = rng

    def pooling_weights(self, h: Tensor, invalid: np.ndarray) -> Tensor:
        e = ad.matmul(h, ad.reshape(self.pool_w, (-1, 1)))[..., 0] + self.pool_b
        return ad.masked_softmax(e, invalid)

    def encode_sequence(self, window, invalid) -> tuple[Tensor, np.ndarray]:
        window = ad.as_tensor(window)
        invalid = np.asarray(invalid, dtype=bool)
        if window.ndim == 2:
            window, invalid = ad.reshape(window, (1,) + window.shape), invalid[None]
        if window.shape[1:] != (self.seq_len, self.obs_dim):
            raise ad.DimensionError(f"window shape {window.shape} != (B, {self.seq_len}, {self.obs_dim})")
        if np.any(invalid.all(axis=1)):
            raise ad.EmptyContextError("transformer needs at least one valid history position")
        # invalid slots are zeroed before anything reads them
        window = window * (~invalid)[..., None]
        x = self.inp(window) + self.pe
        for layer in self.layers:
            x = layer(x, invalid)
        return self.norm(x), invalid

    def __call__(self, window, invalid) -> Tensor:
        h, invalid = self.encode_sequence(window, invalid)
        alpha = self.pooling_weights(h, invalid)
        return ad.tsum(h * ad.reshape(alpha, alpha.shape + (1,)), axis=1)


def _batch(obs, dim: int) -> Tensor:
    obs = ad.as_tensor(obs)
    if obs.ndim == 1:
        obs = ad.reshape(obs, (1, -1))
    if obs.shape[-1] != dim:
        raise ad.DimensionError(f"expected observation width {dim}, got shape {obs.shape}")
    return obs


def build_encoder(name: str, obs_dim: int, cfg: EncoderConfig, rng: np.random.Generator) -> Module:
    classes = {"mlp": MLPEncoder, "gru": GRUEncoder, "lru": LRUEncoder, "transformer": TransformerEncoder}
    try:
        cls = classes[name]
    except KeyError:
        raise ConfigurationError(f"unknown encoder {name!r}; choose from {ENCODERS}") from None
    return cls(obs_dim, cfg, rng)
