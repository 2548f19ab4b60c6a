"""Observation bookkeeping shared by both value models.

Each candidate policy can carry at most one offline estimate of its value
plus any number of episodic returns from actually running it.  The log keeps
the raw per-policy data; models consume the sufficient statistics
(count, sum, sum of squares) per policy.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = ["IGPrior", "AdamConfig", "ObservationLog", "ObservationStats"]


@dataclass(frozen=True)
class IGPrior:
    """Inverse-gamma prior on a variance parameter."""

    alpha: float = 1.0
    beta: float = 200.0

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError(f"inverse-gamma parameters must be positive, got {self}")

    def log_density(self, x: float) -> float:
        return (
            self.alpha * math.log(self.beta)
            - math.lgamma(self.alpha)
            - (self.alpha + 1.0) * math.log(x)
            - self.beta / x
        )

    def dlog_density_dlog(self, x: float) -> float:
        # derivative of log_density with respect to log(x)
        return -(self.alpha + 1.0) + self.beta / x


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    steps: int = 1000
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


@dataclass(frozen=True)
class ObservationStats:
    """Per-policy sufficient statistics extracted from a log.

    ``has_ope`` is 0/1, ``ope`` is only meaningful where has_ope == 1.
    ``observed`` marks policies with at least one observation of either kind.
    """

    has_ope: np.ndarray
    ope: np.ndarray
    count: np.ndarray
    total: np.ndarray
    total_sq: np.ndarray

    @property
    def observed(self) -> np.ndarray:
        return (self.has_ope > 0) | (self.count > 0)


class ObservationLog:
    """Mutable record of everything observed about each candidate policy."""

    def __init__(self, num_policies: int):
        if num_policies < 1:
            raise ValueError("need at least one policy")
        self.num_policies = int(num_policies)
        self._ope: list[float | None] = [None] * self.num_policies
        self._returns: list[list[float]] = [[] for _ in range(self.num_policies)]

    def _check_policy(self, k: int) -> int:
        k = int(k)
        if not 0 <= k < self.num_policies:
            raise ValueError(f"policy index {k} out of range [0, {self.num_policies})")
        return k

    def set_ope(self, k: int, value: float) -> None:
        k = self._check_policy(k)
        value = float(value)
        if not math.isfinite(value):
            raise ValueError(f"offline estimate for policy {k} is not finite")
        self._ope[k] = value

    def add_return(self, k: int, value: float) -> None:
        k = self._check_policy(k)
        value = float(value)
        if not math.isfinite(value):
            raise ValueError(f"return for policy {k} is not finite")
        self._returns[k].append(value)

    def ope(self, k: int) -> float | None:
        return self._ope[self._check_policy(k)]

    def returns(self, k: int) -> list[float]:
        return list(self._returns[self._check_policy(k)])

    def num_returns(self, k: int) -> int:
        return len(self._returns[self._check_policy(k)])

    def total_observations(self) -> int:
        return sum(1 for v in self._ope if v is not None) + sum(len(r) for r in self._returns)

    def stats(self) -> ObservationStats:
        n = self.num_policies
        has_ope = np.array([0.0 if v is None else 1.0 for v in self._ope])
        ope = np.array([0.0 if v is None else v for v in self._ope])
        count = np.array([float(len(r)) for r in self._returns])
        total = np.array([math.fsum(r) for r in self._returns])
        total_sq = np.array([math.fsum(x * x for x in r) for r in self._returns])
        return ObservationStats(has_ope, ope, count, total, total_sq)

    def copy(self) -> "ObservationLog":
        out = ObservationLog(self.num_policies)
        out._ope = list(self._ope)
        out._returns = [list(r) for r in self._returns]
        return out

    # -- csv round trip ----------------------------------------------------
    # columns: policy_id, kind in {ope, return}, value

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["policy_id", "kind", "value"])
            for k, v in enumerate(self._ope):
                if v is not None:
                    w.writerow([k, "ope", repr(v)])
            for k, rs in enumerate(self._returns):
                for r in rs:
                    w.writerow([k, "return", repr(r)])

    @classmethod
    def read_csv(cls, path: str | Path, num_policies: int | None = None) -> "ObservationLog":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0] != ["policy_id", "kind", "value"]:
            raise ValueError(f"observation file {path}: expected header policy_id,kind,value")
        body = rows[1:]
        if num_policies is None:
            if not body:
                raise ValueError(f"observation file {path}: empty and no policy count given")
            num_policies = max(int(r[0]) for r in body) + 1
        log = cls(num_policies)
        for r in body:
            if len(r) != 3:
                raise ValueError(f"observation file {path}: bad row {r}")
            k, kind, value = int(r[0]), r[1], float(r[2])
            if kind == "ope":
                if log._ope[log._check_policy(k)] is not None:
                    raise ValueError(f"observation file {path}: duplicate ope row for policy {k}")
                log.set_ope(k, value)
            elif kind == "return":
                log.add_return(k, value)
            else:
                raise ValueError(f"observation file {path}: unknown kind '{kind}'")
        return log
