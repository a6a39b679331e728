"""Orchestration for training, evaluation, mask simulation and bound verification runs."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig
from .environments import ObservationWrapper, make_env
from .ppo import Agent, Runner, evaluate, train
from .rng import RNG_ALGORITHM, generator, subseed
from .sensor_failure import (
    ChainParams,
    effective_rates,
    mixing_time_bound,
    simulate_trace,
    steady_state,
    stationary_up_rate,
    write_trace_csv,
)
from .stats import RunSummary, ema, summarize
from .theory import BoundReport, chain5_instance, verify_bound

log = logging.getLogger(__name__)

NORMALIZER_KEYS = ("normalizer.count", "normalizer.mean", "normalizer.m2")


def seed_dir(cfg: ExperimentConfig, seed: int, root: str | Path | None = None) -> Path:
    return Path(root or cfg.out) / f"seed_{seed}"


def build_agent(cfg: ExperimentConfig, env: ObservationWrapper, seed: int) -> Agent:
    agent = Agent(env.obs_dim, env.spec.action_space, cfg.encoder, cfg.encoder_config(), generator(seed, "init"))
    agent.set_dropout_rng(generator(seed, "dropout"))
    return agent


def build_env(cfg: ExperimentConfig, seed: int, evaluation: bool = False) -> ObservationWrapper:
    sensor, group = cfg.chains()
    base = subseed(seed, "eval") if evaluation else seed
    return ObservationWrapper(make_env(cfg.env, seed=subseed(base, "env")), sensor, group,
                              normalize=cfg.normalize, seed=generator(base, "mask"))


def agent_arrays(agent: Agent, env: ObservationWrapper) -> dict[str, np.ndarray]:
    arrays = {name: p.data for name, p in agent.named_parameters().items()}
    if env.normalizer is not None:
        for key, val in env.normalizer.state_dict().items():
            arrays[f"normalizer.{key}"] = val
    return arrays


def train_seed(cfg: ExperimentConfig, seed: int) -> list[dict]:
    """One PPO run; writes metrics.jsonl and checkpoint.bin under the seed directory."""
    out = seed_dir(cfg, seed)
    out.mkdir(parents=True, exist_ok=True)
    env = build_env(cfg, seed)
    agent = build_agent(cfg, env, seed)
    runner = Runner(env, agent, generator(seed, "policy"))
    with open(out / "metrics.jsonl", "w") as fh:
        def write(row):
            fh.write(json.dumps({"seed": seed, **row}) + "\n")
            fh.flush()
        history = train(agent, runner, cfg.ppo(), generator(seed, "minibatch"), log=write)
    save_checkpoint(out / "checkpoint.bin", agent_arrays(agent, env))
    return history


def load_agent(cfg: ExperimentConfig, seed: int, path: str | Path) -> tuple[Agent, ObservationWrapper]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    arrays = load_checkpoint(path)
    env = build_env(cfg, seed, evaluation=True)
    agent = build_agent(cfg, env, seed)
    agent.load_arrays(arrays)
    if env.normalizer is not None:
        if not all(k in arrays for k in NORMALIZER_KEYS):
            raise ConfigError(f"{path} has no normalizer statistics but the config normalizes observations")
        env.normalizer.load_state_dict({k.split(".", 1)[1]: arrays[k] for k in NORMALIZER_KEYS})
    env.training = False
    return agent, env


def eval_seed(cfg: ExperimentConfig, seed: int) -> list[float]:
    root = cfg.checkpoint_dir or cfg.out
    agent, env = load_agent(cfg, seed, seed_dir(cfg, seed, root) / "checkpoint.bin")
    return evaluate(agent, env, cfg.eval_episodes)


def _fan_out(fn, cfg: ExperimentConfig) -> dict[int, object]:
    """Run ``fn(cfg, seed)`` for every seed; failures are returned as exceptions."""
    results: dict[int, object] = {}
    if cfg.workers > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            futures = {seed: pool.submit(fn, cfg, seed) for seed in cfg.seeds}
            for seed, fut in futures.items():
                try:
                    results[seed] = fut.result()
                except Exception as exc:  # keep partial results
                    results[seed] = exc
    else:
        for seed in cfg.seeds:
            try:
                results[seed] = fn(cfg, seed)
            except Exception as exc:
                results[seed] = exc
    return results


def training_curve(histories: list[list[dict]]) -> np.ndarray:
    """Rows of (step, median, q25, q75) across seeds for each update index."""
    n = min(len(h) for h in histories)
    rows = []
    for i in range(n):
        vals = np.array([np.nan if h[i]["mean_episodic_return"] is None else h[i]["mean_episodic_return"]
                         for h in histories])
        step = histories[0][i]["global_step"]
        if np.all(np.isnan(vals)):
            rows.append((step, np.nan, np.nan, np.nan))
        else:
            q25, med, q75 = np.nanquantile(vals, [0.25, 0.5, 0.75])
            rows.append((step, med, q25, q75))
    return np.array(rows, dtype=float).reshape(-1, 4)


def write_curve(path: Path, curve: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "median", "q25", "q75"])
        for step, med, q25, q75 in curve:
            w.writerow([int(step), repr(float(med)), repr(float(q25)), repr(float(q75))])


def cmd_train(cfg: ExperimentConfig) -> tuple[dict[int, object], np.ndarray]:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    results = _fan_out(train_seed, cfg)
    ok = [r for r in results.values() if not isinstance(r, Exception)]
    curve = training_curve(ok) if ok else np.zeros((0, 4))
    write_curve(out / "curve.csv", curve)
    smoothed = curve.copy()
    for j in (1, 2, 3):
        smoothed[:, j] = ema(curve[:, j], 0.9)
    write_curve(out / "curve_smoothed.csv", smoothed)
    return results, curve


def cmd_eval(cfg: ExperimentConfig) -> tuple[RunSummary | None, dict[int, object]]:
    results = _fan_out(eval_seed, cfg)
    per_seed = {str(s): r for s, r in results.items() if not isinstance(r, Exception)}
    if not per_seed:
        return None, results
    summary = summarize(per_seed, cfg.bootstrap_resamples, rng=generator(cfg.seeds[0], "bootstrap"))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"env": cfg.env, "encoder": cfg.encoder, "wrapper": cfg.wrapper, "rng_algorithm": RNG_ALGORITHM,
           **summary.to_dict()}
    (out / "summary.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    return summary, results


def mask_report(cfg: ExperimentConfig, T: int, seed: int, trace_path: Path | None = None) -> dict:
    sensor = ChainParams(cfg.sensor_p_fail, cfg.sensor_p_recover)
    group = ChainParams(cfg.group_p_fail, cfg.group_p_recover)
    layout = make_env(cfg.env).spec.layout
    xs, zs, ys = simulate_trace(layout, sensor, group, T, generator(seed, "mask"), return_layers=True)
    if trace_path is not None:
        write_trace_csv(trace_path, xs)
    rates = effective_rates(sensor, group)
    return {
        "env": cfg.env, "T": T, "seed": seed, "rng_algorithm": RNG_ALGORITHM,
        "sensor": {"p_fail": sensor.p_fail, "p_recover": sensor.p_recover},
        "group": {"p_fail": group.p_fail, "p_recover": group.p_recover},
        "pi_z": steady_state(sensor), "pi_y": steady_state(group), "pi_x": stationary_up_rate(sensor, group),
        "p_fail_eff": rates.p_fail_eff, "p_recover_eff": rates.p_recover_eff,
        "mixing_time_bound": mixing_time_bound(sensor, group),
        "empirical_pi_z": zs.mean(axis=0).tolist(), "empirical_pi_y": ys.mean(axis=0).tolist(),
        "empirical_pi_x": xs.mean(axis=0).tolist(),
    }


def cmd_mask_sim(cfg: ExperimentConfig, seed: int) -> dict:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    report = mask_report(cfg, cfg.trace_steps, seed, out / "trace.csv")
    (out / "mask_report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return report


def bound_instance(cfg: ExperimentConfig):
    if cfg.env != "chain5":
        raise ConfigError("bound verification needs the tabular chain5 environment")
    weights = None
    if cfg.policy_weights is not None:
        if len(cfg.policy_weights) != 5:
            raise ConfigError("policy_weights must give one right-action score per chain state")
        weights = np.zeros((5, 2))
        weights[:, 1] = cfg.policy_weights
    return chain5_instance(cfg.theory_gamma, weights, ChainParams(cfg.sensor_p_fail, cfg.sensor_p_recover),
                           ChainParams(cfg.group_p_fail, cfg.group_p_recover))


def cmd_verify_bound(cfg: ExperimentConfig, seed: int) -> BoundReport:
    report = verify_bound(bound_instance(cfg), cfg.delta, cfg.n_trials, seed)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "bound_report.json").write_text(report.to_json())
    return report
