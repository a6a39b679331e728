"""Exact constants and Monte Carlo checks for the masked-observation degradation bound.

Everything here works on small tabular instances: a finite MDP, an observation
map h(s) in R^d, the two-layer mask process, and a softmax policy whose action
scores are linear in the (possibly masked) observation.
"""

from __future__ import annotations

import itertools
import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .environments import ChainMDP
from .rng import generator
from .sensor_failure import (
    GROUP_DEFAULT,
    SENSOR_DEFAULT,
    ChainParams,
    SensorLayout,
    mixing_time_bound,
    steady_state,
    stationary_up_rate,
)


class ConvergenceError(ArithmeticError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass
class TabularInstance:
    P: np.ndarray  # (S, A, S)
    R: np.ndarray  # (S, A) expected reward
    gamma: float
    h: np.ndarray  # (S, d) observation map
    layout: SensorLayout
    sensor: ChainParams
    group: ChainParams
    weights: np.ndarray  # (d, A) policy scores are o @ weights + bias
    bias: np.ndarray | None = None
    B: np.ndarray | None = None  # per-feature bounds, defaults to max |h_i|

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=float)
        self.R = np.asarray(self.R, dtype=float)
        self.h = np.asarray(self.h, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        S, A = self.R.shape
        if self.P.shape != (S, A, S):
            raise ValueError(f"P has shape {self.P.shape}, expected {(S, A, S)}")
        if np.any(self.P < 0) or not np.allclose(self.P.sum(axis=2), 1.0, atol=1e-12):
            raise ValueError("transition rows must be probability vectors")
        if self.h.shape[0] != S or self.h.shape[1] != self.layout.d:
            raise ValueError(f"observation map shape {self.h.shape} does not match {S} states and {self.layout.d} sensors")
        if self.weights.shape != (self.layout.d, A):
            raise ValueError(f"policy weights have shape {self.weights.shape}, expected {(self.layout.d, A)}")
        self.bias = np.zeros(A) if self.bias is None else np.asarray(self.bias, dtype=float)
        bound = np.abs(self.h).max(axis=0)
        self.B = bound if self.B is None else np.asarray(self.B, dtype=float)
        if np.any(bound > self.B + 1e-12):
            raise ValueError("observation map exceeds the stated per-feature bounds")
        if not 0.0 <= self.gamma < 1.0:
            raise ConvergenceError(f"discount must lie in [0, 1), got {self.gamma}")

    @property
    def n_states(self) -> int:
        return self.R.shape[0]

    @property
    def n_actions(self) -> int:
        return self.R.shape[1]

    @property
    def d(self) -> int:
        return self.layout.d

    @property
    def action_points(self) -> np.ndarray:
        """Actions embedded as evenly spaced points of [0, 1]."""
        k = self.n_actions
        return np.arange(k) / (k - 1) if k > 1 else np.zeros(1)

    def policy(self, obs: np.ndarray) -> np.ndarray:
        """Action probabilities for one observation or a stack of them (last axis d)."""
        scores = np.asarray(obs, dtype=float) @ self.weights + self.bias
        scores = scores - scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        return e / e.sum(axis=-1, keepdims=True)

    def up_rates(self) -> np.ndarray:
        return np.full(self.d, stationary_up_rate(self.sensor, self.group))


def chain5_instance(gamma: float = 0.9, weights: np.ndarray | None = None,
                    sensor: ChainParams = SENSOR_DEFAULT, group: ChainParams = GROUP_DEFAULT) -> TabularInstance:
    """The five-state chain with one-hot observations; by default the policy leans right,
    more strongly near the rewarding end."""
    env = ChainMDP()
    if weights is None:
        weights = np.zeros((5, 2))
        weights[:, 1] = [1.0, 1.5, 2.0, 2.5, 3.0]
    return TabularInstance(env.transition_tensor(), env.reward_table(), gamma, env.observation_map(),
                           env.spec.layout, sensor, group, weights)


# ------------------------------------------------------------ value functions

def _bellman(inst: TabularInstance, Q: np.ndarray, next_pi: np.ndarray) -> np.ndarray:
    v = (next_pi * Q).sum(axis=1)
    return inst.R + inst.gamma * inst.P @ v


def mask_distribution(inst: TabularInstance) -> tuple[np.ndarray, np.ndarray]:
    """Stationary law of the effective mask: (patterns (K, d), probabilities (K,))."""
    pz, py = steady_state(inst.sensor), steady_state(inst.group)
    d, g = inst.d, inst.layout.g
    patterns = np.array(list(itertools.product([0, 1], repeat=d)), dtype=np.int8)
    probs = np.zeros(len(patterns))
    idx = inst.layout.index
    for ybits in itertools.product([0, 1], repeat=g):
        y = np.array(ybits)
        w_y = np.prod(np.where(y == 1, py, 1 - py))
        w_z = np.prod(np.where(patterns == 1, pz, 1 - pz), axis=1)
        xs = patterns * y[idx]
        keys = xs @ (1 << np.arange(d)[::-1])
        np.add.at(probs, keys, w_y * w_z)
    return patterns, probs


def value_iteration_Q(inst: TabularInstance, masked: bool = False, tol: float = 1e-12,
                      max_iter: int = 1_000_000) -> np.ndarray:
    """Q table of the softmax policy by repeated Bellman backups.

    Next actions are drawn from pi(.|h(s')), or with ``masked`` from the policy
    averaged over the stationary mask distribution pi(.|h_M(s')).
    """
    if not 0.0 <= inst.gamma < 1.0:
        raise ConvergenceError(f"Bellman backups diverge for discount {inst.gamma}")
    if masked:
        patterns, probs = mask_distribution(inst)
        obs = inst.h[:, None, :] * patterns[None, :, :]
        next_pi = np.einsum("k,ska->sa", probs, inst.policy(obs))
    else:
        next_pi = inst.policy(inst.h)
    Q = np.zeros_like(inst.R)
    for _ in range(max_iter):
        Q_new = _bellman(inst, Q, next_pi)
        if np.max(np.abs(Q_new - Q)) < tol * 0.1:
            return Q_new
        Q = Q_new
    raise ConvergenceError(f"no convergence within {max_iter} backups")


def bellman_residual(inst: TabularInstance, Q: np.ndarray) -> float:
    return float(np.max(np.abs(_bellman(inst, Q, inst.policy(inst.h)) - Q)))


# ------------------------------------------------------------ certificates

def wasserstein_1d(p, q, x=None, y=None) -> float:
    """W1 between two finitely supported distributions on the real line.

    ``p`` lives on points ``x`` and ``q`` on ``y`` (both default to 0..n-1);
    CDFs are compared on the union of the supports.
    """
    p, q = np.asarray(p, dtype=float), np.asarray(q, dtype=float)
    x = np.arange(len(p), dtype=float) if x is None else np.asarray(x, dtype=float)
    y = x if y is None else np.asarray(y, dtype=float)
    grid = np.union1d(x, y)
    if len(grid) < 2:
        return 0.0
    Fp = np.array([p[x <= g].sum() for g in grid[:-1]])
    Fq = np.array([q[y <= g].sum() for g in grid[:-1]])
    return float(np.sum(np.abs(Fp - Fq) * np.diff(grid)))


@dataclass(frozen=True)
class LipschitzCertificate:
    L_pi: float
    L_Q: float
    method: str = "exact-enumeration"


def observation_set(inst: TabularInstance) -> np.ndarray:
    """Every observation the policy can see: h_M(s) over states and reachable masks."""
    patterns, probs = mask_distribution(inst)
    reachable = patterns[probs > 0]
    obs = (inst.h[:, None, :] * reachable[None, :, :]).reshape(-1, inst.d)
    return np.unique(obs, axis=0)


def certify_L_pi(inst: TabularInstance) -> float:
    """Largest W1(pi(.|o), pi(.|o')) / ||o - o'||_1 over distinct enumerated observations."""
    obs = observation_set(inst)
    if len(obs) < 2:
        warnings.warn("only one observation is reachable; the policy constant is zero")
        return 0.0
    pts = inst.action_points
    probs = inst.policy(obs)
    cdf = np.cumsum(probs, axis=1)[:, :-1]
    gaps = np.diff(pts)
    best = 0.0
    for i in range(len(obs)):
        dist = np.abs(obs[i + 1:] - obs[i]).sum(axis=1)
        w1 = (np.abs(cdf[i + 1:] - cdf[i]) * gaps).sum(axis=1)
        if len(dist):
            best = max(best, float(np.max(w1 / dist)))
    return best


def certify_L_Q(inst: TabularInstance, Q: np.ndarray) -> float:
    """Largest |Q(s,a) - Q(s,a')| / |a - a'| over states and action pairs."""
    k = inst.n_actions
    if k < 2:
        return 0.0
    pts = inst.action_points
    iu = np.triu_indices(k, 1)
    diff = np.abs(Q[:, iu[0]] - Q[:, iu[1]]) / np.abs(pts[iu[0]] - pts[iu[1]])
    return float(diff.max())


def delta_t(inst: TabularInstance, Q: np.ndarray, s: int, M: np.ndarray) -> float:
    """Expected Q gap between acting on the full and on the masked observation of state s."""
    full = inst.policy(inst.h[s]) @ Q[s]
    masked = inst.policy(inst.h[s] * np.asarray(M)) @ Q[s]
    return float(full - masked)


def inequality_chain(inst: TabularInstance, Q: np.ndarray, L_pi: float, L_Q: float) -> dict[str, np.ndarray]:
    """The four terms of the per-step inequality chain on every (state, mask pattern) pair:
    |delta| <= L_Q W1 <= L_Q L_pi ||h - h_M||_1 <= C_max."""
    patterns = np.array(list(itertools.product([0, 1], repeat=inst.d)), dtype=np.int8)
    pts = inst.action_points
    S, K = inst.n_states, len(patterns)
    gap, w1, l1 = np.zeros((S, K)), np.zeros((S, K)), np.zeros((S, K))
    for s in range(S):
        pf = inst.policy(inst.h[s])
        for k, M in enumerate(patterns):
            hm = inst.h[s] * M
            gap[s, k] = abs(delta_t(inst, Q, s, M))
            w1[s, k] = wasserstein_1d(pf, inst.policy(hm), pts)
            l1[s, k] = np.abs(inst.h[s] - hm).sum()
    c_max = L_Q * L_pi * float(inst.B.sum())
    return {"abs_delta": gap, "lq_w1": L_Q * w1, "lq_lpi_l1": L_Q * L_pi * l1,
            "c_max": np.full((S, K), c_max), "patterns": patterns}


# ------------------------------------------------------- augmented chain

class AugmentedChain:
    """Exact (state, sensor bits, group bits) chain under masked execution."""

    def __init__(self, inst: TabularInstance):
        self.inst = inst
        d, g = inst.d, inst.layout.g
        self.bits = np.array(list(itertools.product([0, 1], repeat=d + g)), dtype=np.int8)
        z, y = self.bits[:, :d], self.bits[:, d:]
        self.x = z * y[:, inst.layout.index]
        Tz, Ty = inst.sensor.transition_matrix(), inst.group.transition_matrix()
        # mask transition as a product of independent two-state chains
        TM = np.ones((len(self.bits), len(self.bits)))
        for j in range(d + g):
            T = Tz if j < d else Ty
            TM *= T[self.bits[:, j][:, None], self.bits[:, j][None, :]]
        self.TM = TM
        obs = inst.h[:, None, :] * self.x[None, :, :]
        self.pi = inst.policy(obs)  # (S, K, A)
        Ps = np.einsum("ska,sat->skt", self.pi, inst.P)  # next-state law given (s, mask)
        S, K = inst.n_states, len(self.bits)
        self.T = np.einsum("skt,kl->sktl", Ps, TM).reshape(S * K, S * K)
        self.shape = (S, K)

    def stationary(self, tol: float = 1e-12, max_iter: int = 1_000_000) -> np.ndarray:
        """Stationary law over (state, mask) by power iteration, shape (S, K)."""
        inst = self.inst
        pz, py = steady_state(inst.sensor), steady_state(inst.group)
        d = inst.d
        wm = np.prod(np.where(self.bits[:, :d] == 1, pz, 1 - pz), axis=1) * \
            np.prod(np.where(self.bits[:, d:] == 1, py, 1 - py), axis=1)
        mu = np.outer(np.full(inst.n_states, 1.0 / inst.n_states), wm).reshape(-1)
        for _ in range(max_iter):
            nxt = mu @ self.T
            if np.abs(nxt - mu).sum() < tol:
                return nxt.reshape(self.shape)
            mu = nxt
        raise ConvergenceError("augmented chain did not reach stationarity")

    def tv_mixing_time(self, eps: float = 0.125, max_t: int = 10_000) -> int:
        """Smallest t with worst-start total variation to stationarity at most eps."""
        pi = self.stationary().reshape(-1)
        Tt = np.eye(len(pi))
        for t in range(max_t + 1):
            if 0.5 * np.abs(Tt - pi).sum(axis=1).max() <= eps:
                return t
            Tt = Tt @ self.T
        raise ConvergenceError(f"total variation above {eps} after {max_t} steps")


def state_distribution(inst: TabularInstance) -> np.ndarray:
    """Stationary state distribution of the executed (masked) process."""
    return AugmentedChain(inst).stationary().sum(axis=1)


def feature_means(inst: TabularInstance, d_pi: np.ndarray | None = None) -> np.ndarray:
    d_pi = state_distribution(inst) if d_pi is None else d_pi
    return d_pi @ np.abs(inst.h)


def mu_S_bound(inst: TabularInstance, L_pi: float, L_Q: float, d_pi: np.ndarray | None = None) -> float:
    h_bar = feature_means(inst, d_pi)
    return float(L_Q * L_pi / (1.0 - inst.gamma) * np.sum((1.0 - inst.up_rates()) * h_bar))


def deviation_bound(C_max: float, tau: float, gamma: float, delta: float) -> float:
    if not 0.0 < delta < 1.0:
        raise ValueError(f"confidence parameter must lie in (0, 1), got {delta}")
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"discount must lie in [0, 1), got {gamma}")
    if tau < 0 or C_max < 0:
        raise ValueError("mixing time and loss scale must be non-negative")
    log_term = math.log(2.0 / delta)
    bernstein = math.sqrt(2.0 * tau / (1.0 - gamma ** 2) * log_term) + 4.0 / 3.0 * tau * log_term
    return C_max * min(bernstein, 1.0 / (1.0 - gamma))


# ------------------------------------------------------------- Monte Carlo

def horizon_for(C_max: float, gamma: float, tol: float | None = None, max_T: int = 1_000_000) -> int:
    """Smallest T with C_max gamma^T / (1 - gamma) below tol (default 1e-6 C_max / (1 - gamma))."""
    if C_max == 0.0 or gamma == 0.0:
        return 1
    tol = 1e-6 * C_max / (1.0 - gamma) if tol is None else tol
    T = max(1, math.ceil(math.log(tol * (1.0 - gamma) / C_max) / math.log(gamma)))
    if T > max_T:
        raise ConfigurationError(f"truncation tolerance {tol} needs horizon {T} > {max_T}")
    return T


def simulate_chain(inst: TabularInstance, n_trials: int, T: int, rng: np.random.Generator,
                   masked: bool = True, chain: AugmentedChain | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Simulate states and mask indices, shape (T, n_trials) each, from the stationary law.

    With ``masked`` actions come from pi(.|h_M(s)); otherwise from pi(.|h(s)), which
    makes the state chain independent of the mask process.
    """
    chain = AugmentedChain(inst) if chain is None else chain
    S, K = chain.shape
    d, g = inst.d, inst.layout.g
    if masked:
        start = chain.stationary().reshape(-1)
    else:
        full_P = np.einsum("sa,sat->st", inst.policy(inst.h), inst.P)
        ds = _power(full_P)
        wm = chain.stationary().sum(axis=0)  # mask marginal is the same either way
        start = np.outer(ds, wm).reshape(-1)
    cdf = np.cumsum(start)
    flat = np.minimum(np.searchsorted(cdf, rng.random(n_trials) * cdf[-1], side="right"), S * K - 1)
    s, m = np.divmod(flat, K)
    bits = chain.bits[m].astype(bool)
    weights = 1 << np.arange(d + g)[::-1]
    pfail = np.array([inst.sensor.p_fail] * d + [inst.group.p_fail] * g)
    prec = np.array([inst.sensor.p_recover] * d + [inst.group.p_recover] * g)
    pol = chain.pi if masked else np.broadcast_to(inst.policy(inst.h)[:, None, :], chain.pi.shape)
    pol_cdf = np.cumsum(pol, axis=2)
    P_cdf = np.cumsum(inst.P, axis=2)
    states = np.zeros((T, n_trials), dtype=np.int64)
    masks = np.zeros((T, n_trials), dtype=np.int64)
    A = inst.n_actions
    for t in range(T):
        m = bits.astype(np.int64) @ weights
        states[t], masks[t] = s, m
        a = np.minimum((rng.random(n_trials)[:, None] > pol_cdf[s, m]).sum(axis=1), A - 1)
        s = np.minimum((rng.random(n_trials)[:, None] > P_cdf[s, a]).sum(axis=1), S - 1)
        u = rng.random((n_trials, d + g))
        bits = np.where(bits, u >= pfail, u < prec)
    return states, masks


def _power(P: np.ndarray, tol: float = 1e-13, max_iter: int = 1_000_000) -> np.ndarray:
    mu = np.full(len(P), 1.0 / len(P))
    for _ in range(max_iter):
        nxt = mu @ P
        if np.abs(nxt - mu).sum() < tol:
            return nxt
        mu = nxt
    raise ConvergenceError("state chain did not reach stationarity")


def abs_delta_table(inst: TabularInstance, Q: np.ndarray, chain: AugmentedChain) -> np.ndarray:
    """|delta| for every (state, augmented mask index)."""
    full = (inst.policy(inst.h) * Q).sum(axis=1)
    masked = (chain.pi * Q[:, None, :]).sum(axis=2)
    return np.abs(full[:, None] - masked)


def monte_carlo_S(inst: TabularInstance, Q: np.ndarray, n_trials: int, seed: int = 0,
                  T: int | None = None, C_max: float | None = None,
                  chain: AugmentedChain | None = None) -> tuple[np.ndarray, float]:
    """Samples of the discounted cumulative gap and the truncation bound on the ignored tail."""
    chain = AugmentedChain(inst) if chain is None else chain
    if C_max is None:
        C_max = certify_L_Q(inst, Q) * certify_L_pi(inst) * float(inst.B.sum())
    T = horizon_for(C_max, inst.gamma) if T is None else T
    states, masks = simulate_chain(inst, n_trials, T, generator(seed, "theory"), chain=chain)
    X = abs_delta_table(inst, Q, chain)[states, masks]
    disc = inst.gamma ** np.arange(T)
    S = disc @ X
    tail = C_max * inst.gamma ** T / (1.0 - inst.gamma) if inst.gamma > 0 else 0.0
    return S, tail


# ------------------------------------------------------------------ report

def wilson_upper(p: float, n: int, z: float = 2.5758293035489004) -> float:
    """Upper end of the Wilson score interval for a proportion p observed over n trials."""
    denom = 1.0 + z * z / n
    centre = p + z * z / (2 * n)
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n))
    return (centre + half) / denom


@dataclass
class BoundReport:
    gamma: float
    delta: float
    n_trials: int
    pi_x: list[float]
    h_bar: list[float]
    L_pi: float
    L_Q: float
    C_max: float
    tau: float
    tau_tv: int | None
    mu_S_bound: float
    deviation: float
    cap: float
    final_bound: float
    bellman_residual: float
    horizon: int
    truncation_bound: float
    mean_S: float
    se_S: float
    quantile_S: float
    exceed_fraction: float
    exceed_threshold: float
    inequality_chain_holds: bool
    mean_check: bool
    tail_check: bool
    verdict: str
    rng_algorithm: str = ""
    extras: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "BoundReport":
        return cls(**json.loads(text))


def verify_bound(inst: TabularInstance, delta: float = 0.1, n_trials: int = 2000, seed: int = 0,
                   diagnostics: bool = True) -> BoundReport:
    """Compute every constant of the bound, sample S and check the mean and tail statements."""
    from .rng import RNG_ALGORITHM

    Q = value_iteration_Q(inst)
    residual = bellman_residual(inst, Q)
    L_pi = certify_L_pi(inst)
    L_Q = certify_L_Q(inst, Q)
    C_max = L_Q * L_pi * float(inst.B.sum())
    chain = AugmentedChain(inst)
    d_pi = chain.stationary().sum(axis=1)
    h_bar = feature_means(inst, d_pi)
    mu_bound = mu_S_bound(inst, L_pi, L_Q, d_pi)
    tau = mixing_time_bound(inst.sensor, inst.group)
    dev = deviation_bound(C_max, tau, inst.gamma, delta)
    final = mu_bound + dev
    T = horizon_for(C_max, inst.gamma)
    S, tail = monte_carlo_S(inst, Q, n_trials, seed, T=T, C_max=C_max, chain=chain)
    chain_terms = inequality_chain(inst, Q, L_pi, L_Q)
    tol = 1e-12
    chain_ok = bool(np.all(chain_terms["abs_delta"] <= chain_terms["lq_w1"] + tol)
                    and np.all(chain_terms["lq_w1"] <= chain_terms["lq_lpi_l1"] + tol)
                    and np.all(chain_terms["lq_lpi_l1"] <= chain_terms["c_max"] + tol))
    mean_S = float(S.mean())
    se = float(S.std(ddof=1) / math.sqrt(n_trials)) if n_trials > 1 else 0.0
    exceed = float(np.mean(S > final))
    threshold = wilson_upper(delta, n_trials)
    mean_ok = mean_S <= mu_bound + 3 * se
    tail_ok = exceed <= threshold
    tau_tv = chain.tv_mixing_time() if diagnostics else None
    return BoundReport(
        gamma=inst.gamma, delta=delta, n_trials=n_trials, pi_x=inst.up_rates().tolist(), h_bar=h_bar.tolist(),
        L_pi=L_pi, L_Q=L_Q, C_max=C_max, tau=tau, tau_tv=tau_tv, mu_S_bound=mu_bound, deviation=dev,
        cap=1.0 / (1.0 - inst.gamma), final_bound=final, bellman_residual=residual, horizon=T,
        truncation_bound=tail, mean_S=mean_S, se_S=se, quantile_S=float(np.quantile(S, 1 - delta)),
        exceed_fraction=exceed, exceed_threshold=threshold, inequality_chain_holds=chain_ok,
        mean_check=bool(mean_ok), tail_check=bool(tail_ok), verdict="PASS" if mean_ok and tail_ok else "FAIL",
        rng_algorithm=RNG_ALGORITHM)
