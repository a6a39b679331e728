"""Summary statistics for pooled evaluation returns."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


def bootstrap_median_ci(values, n_resamples: int = 10_000, level: float = 0.95,
                        rng: np.random.Generator | None = None) -> tuple[float, float]:
    """Percentile bootstrap interval for the median.

    The observed sample counts as the first replicate, so a single resample
    returns the sample median at both ends. The interval is widened if needed
    so that it always contains the sample median.
    """
    x = np.asarray(values, dtype=float)
    if x.size == 0:
        raise ValueError("no values to resample")
    rng = np.random.default_rng(0) if rng is None else rng
    med = float(np.median(x))
    reps = [np.array([med])]
    if n_resamples > 1:
        idx = rng.integers(0, x.size, size=(n_resamples - 1, x.size))
        reps.append(np.median(x[idx], axis=1))
    reps = np.concatenate(reps)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(reps, [alpha, 1.0 - alpha])
    return float(min(lo, med)), float(max(hi, med))


@dataclass
class RunSummary:
    per_seed: dict[str, list[float]]
    median: float
    q25: float
    q75: float
    iqr: float
    ci_low: float
    ci_high: float
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def summarize(per_seed: dict[str, list[float]], n_resamples: int = 10_000,
              rng: np.random.Generator | None = None) -> RunSummary:
    pooled = np.concatenate([np.asarray(v, dtype=float) for v in per_seed.values()])
    q25, med, q75 = np.quantile(pooled, [0.25, 0.5, 0.75])
    lo, hi = bootstrap_median_ci(pooled, n_resamples, rng=rng)
    return RunSummary({k: [float(r) for r in v] for k, v in per_seed.items()}, float(med), float(q25),
                      float(q75), float(q75 - q25), lo, hi, int(pooled.size))


def ema(values, factor: float = 0.9) -> np.ndarray:
    """Exponential moving average that skips NaNs (they carry the previous value forward)."""
    out = np.empty(len(values))
    acc = np.nan
    for i, v in enumerate(values):
        if np.isfinite(v):
            acc = v if not np.isfinite(acc) else factor * acc + (1.0 - factor) * v
        out[i] = acc
    return out
