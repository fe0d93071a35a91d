"""Learning-curve metrics and across-seed statistics.

Every function reads only ``eval_steps`` and ``eval_returns`` of a record,
so metrics are pure functions of the stored checkpoints.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_WINDOW = 5


def _series(record) -> tuple[np.ndarray, np.ndarray]:
    steps = np.asarray(record.eval_steps, dtype=float)
    returns = np.asarray(record.eval_returns, dtype=float)
    if len(steps) == 0 or len(steps) != len(returns):
        raise ValueError("record needs matching, non-empty eval_steps and eval_returns")
    if np.any(np.diff(steps) <= 0):
        raise ValueError("eval steps must be strictly increasing")
    return steps, returns


def smooth(returns, window: int = DEFAULT_WINDOW) -> np.ndarray:
    """Trailing moving average; the first checkpoints average what exists so far."""
    if window < 1:
        raise ValueError("window must be >= 1")
    x = np.asarray(returns, dtype=float)
    c = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(1, len(x) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def auc_at_n(record, n: float, window: int = DEFAULT_WINDOW) -> float:
    """Trapezoidal area under the smoothed curve over checkpoints ``<= n``."""
    steps, returns = _series(record)
    if n > steps[-1]:
        raise ValueError(f"n={n} exceeds the last eval step {steps[-1]:g}")
    y = smooth(returns, window)
    keep = steps <= n
    return float(np.trapezoid(y[keep], steps[keep]))


def steps_to_threshold(record, r_thr: float, n: float, window: int = DEFAULT_WINDOW) -> float:
    """First eval step whose smoothed return reaches ``r_thr``; ``n`` if never."""
    steps, returns = _series(record)
    y = smooth(returns, window)
    hit = np.nonzero((y >= r_thr) & (steps <= n))[0]
    return float(steps[hit[0]]) if len(hit) else float(n)


def final_return(record, frac: float = 0.2) -> float:
    """Mean raw return over the last ``frac`` of checkpoints (at least one)."""
    _, returns = _series(record)
    k = max(1, math.ceil(frac * len(returns) - 1e-9))
    return float(np.mean(returns[-k:]))


def window_variance(record, window: int = 10) -> float:
    """Mean population variance of raw returns over every run of ``window`` consecutive checkpoints.

    Records shorter than the window give the variance of the whole series.
    """
    _, returns = _series(record)
    if window < 1:
        raise ValueError("window must be >= 1")
    if len(returns) <= window:
        return float(np.var(returns))
    runs = np.lib.stride_tricks.sliding_window_view(returns, window)
    return float(np.var(runs, axis=1).mean())


def bootstrap_ci(values, resamples: int = 10_000, level: float = 0.95, seed: int = 0,
                 stat=np.mean) -> tuple[float, float]:
    """Percentile bootstrap interval of ``stat`` over per-seed values."""
    x = np.asarray(values, dtype=float)
    if len(x) < 2:
        raise ValueError("need at least two seeds")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    draws = stat(x[rng.integers(0, len(x), size=(resamples, len(x)))], axis=1)
    tail = (1 - level) / 2
    lo, hi = np.quantile(draws, [tail, 1 - tail])
    return float(lo), float(hi)


@dataclass
class MetricsSummary:
    auc_at_n: float
    steps_to_threshold: float
    final_return_mean: float
    final_return_std: float
    worst_seed_final: float
    ci95: dict

    @classmethod
    def of(cls, records, r_thr: float, n: float | None = None, window: int = DEFAULT_WINDOW,
           resamples: int = 10_000, seed: int = 0) -> "MetricsSummary":
        """Across-seed means (medians for steps-to-threshold) with bootstrap CIs."""
        records = list(records)
        if not records:
            raise ValueError("no records")
        if n is None:
            n = min(r.eval_steps[-1] for r in records)
        auc = np.array([auc_at_n(r, n, window) for r in records])
        stt = np.array([steps_to_threshold(r, r_thr, n, window) for r in records])
        fin = np.array([final_return(r) for r in records])
        ci = {}
        if len(records) >= 2:
            ci = {"auc": bootstrap_ci(auc, resamples, seed=seed),
                  "steps_to_thr": bootstrap_ci(stt, resamples, seed=seed, stat=np.median),
                  "final_return": bootstrap_ci(fin, resamples, seed=seed)}
        return cls(float(auc.mean()), float(np.median(stt)), float(fin.mean()),
                   float(fin.std(ddof=1)) if len(fin) > 1 else 0.0, float(fin.min()), ci)
