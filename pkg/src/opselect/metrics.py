"""Regret metrics and cross-repetition aggregation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "RegretCurve",
    "simple_regret",
    "normalize_regret",
    "rank_of_selection",
    "cumulative_regret",
    "worst_policy_frequency",
    "aggregate_curves",
    "rescale_returns",
    "write_curve_csv",
    "read_curve_csv",
]


def simple_regret(values: np.ndarray, selected: int) -> float:
    """Gap between the best true value and the selected policy's."""
    values = np.asarray(values, dtype=float)
    if not 0 <= selected < values.size:
        raise ValueError(f"selected index {selected} out of range")
    return float(values.max() - values[selected])


def normalize_regret(regret: float, pool_values: np.ndarray) -> float:
    """Regret divided by the value gap (max minus min) of the full pool.

    A degenerate pool with all values equal has zero gap; normalized regret
    is defined as 0 there.
    """
    pool_values = np.asarray(pool_values, dtype=float)
    gap = float(pool_values.max() - pool_values.min())
    if gap == 0.0:
        return 0.0
    return float(regret) / gap


def rank_of_selection(values: np.ndarray, selected: int) -> int:
    """1 for the best policy; ties share the better rank."""
    values = np.asarray(values, dtype=float)
    if not 0 <= selected < values.size:
        raise ValueError(f"selected index {selected} out of range")
    return 1 + int((values > values[selected]).sum())


def cumulative_regret(values: np.ndarray, executed: np.ndarray) -> np.ndarray:
    """Running sum of per-step simple regrets of the executed policies."""
    values = np.asarray(values, dtype=float)
    executed = np.asarray(executed, dtype=np.int64)
    return np.cumsum(values.max() - values[executed]) if executed.size else np.zeros(0)


def worst_policy_frequency(
    values: np.ndarray, executed: np.ndarray, quantile: float = 0.1
) -> float:
    """Fraction of executions spent on bottom-quantile policies.

    The bottom set holds every policy whose true value is <= the
    ceil(quantile * K)-th smallest value (ties included).
    """
    values = np.asarray(values, dtype=float)
    executed = np.asarray(executed, dtype=np.int64)
    if not 0 < quantile <= 1:
        raise ValueError("quantile must be in (0, 1]")
    if executed.size == 0:
        return 0.0
    cutoff = np.sort(values)[math.ceil(quantile * values.size) - 1]
    return float(np.mean(values[executed] <= cutoff))


@dataclass(frozen=True)
class RegretCurve:
    """Per-step mean regret over repetitions with its standard error."""

    mean: np.ndarray
    sd_of_mean: np.ndarray
    n_reps: int

    def __post_init__(self):
        m = np.asarray(self.mean, dtype=float)
        s = np.asarray(self.sd_of_mean, dtype=float)
        if m.shape != s.shape or m.ndim != 1:
            raise ValueError("mean and sd_of_mean must be matching 1-d arrays")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "sd_of_mean", s)

    @property
    def num_steps(self) -> int:
        return self.mean.size


def aggregate_curves(per_rep: list[np.ndarray]) -> RegretCurve:
    """Stack per-repetition regret sequences into mean and sd-of-mean.

    A single repetition gets sd_of_mean == 0.
    """
    if not per_rep:
        raise ValueError("no repetitions to aggregate")
    rows = [np.asarray(r, dtype=float) for r in per_rep]
    if any(r.ndim != 1 or r.shape != rows[0].shape for r in rows):
        raise ValueError("repetitions must all have the same number of steps")
    mat = np.asarray(rows)
    n = mat.shape[0]
    mean = mat.mean(axis=0)
    if n < 2:
        sd = np.zeros_like(mean)
    else:
        sd = mat.std(axis=0, ddof=1) / math.sqrt(n)
    return RegretCurve(mean=mean, sd_of_mean=sd, n_reps=n)


def rescale_returns(values: np.ndarray, target_mean: float, target_sd: float) -> np.ndarray:
    """Affine map of values onto a target mean and standard deviation.

    With fewer than two distinct values the sd is undefined; only the mean
    is shifted then.
    """
    values = np.asarray(values, dtype=float)
    if target_sd < 0:
        raise ValueError("target_sd must be >= 0")
    mu = values.mean()
    sd = values.std()
    if sd == 0.0:
        return values - mu + target_mean
    return (values - mu) / sd * target_sd + target_mean


# ---------------------------------------------------------------------------
# curve csv: columns step, mean_regret, sd_of_mean, n_reps


def write_curve_csv(path: str | Path, curve: RegretCurve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "mean_regret", "sd_of_mean", "n_reps"])
        for i in range(curve.num_steps):
            w.writerow([i + 1, repr(float(curve.mean[i])), repr(float(curve.sd_of_mean[i])), curve.n_reps])


def read_curve_csv(path: str | Path) -> RegretCurve:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["step", "mean_regret", "sd_of_mean", "n_reps"]:
        raise ValueError(f"curve file {path}: unexpected header")
    body = rows[1:]
    mean = np.array([float(r[1]) for r in body])
    sd = np.array([float(r[2]) for r in body])
    n = int(body[0][3]) if body else 0
    return RegretCurve(mean=mean, sd_of_mean=sd, n_reps=n)
