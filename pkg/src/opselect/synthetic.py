"""Synthetic benchmark tasks with a known ground truth.

Policies come in families: each family is a line segment in fingerprint
space (a shared center plus a progress-scaled direction, with per-policy
jitter), so within-family action distances are small and between-family
distances large.  True values are drawn from the fingerprint kernel itself,
which makes the correlated model well specified unless the misspecification
switch is on.

All randomness is split into independent child streams (geometry, values,
offline estimates, returns), so changing a noise setting never changes the
drawn true values, and return draws are keyed by (policy, visit count) so
that every method sees the same luck.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Union

import numpy as np

from .fingerprints import (
    ActionFingerprint,
    ActionKind,
    DistanceMatrix,
    KernelParams,
    distance_matrix,
    kernel_matrix,
    load_fingerprints,
    save_fingerprints,
    stabilize,
)

__all__ = [
    "GaussianReturnNoise",
    "MixtureReturnNoise",
    "ReturnNoise",
    "SyntheticTaskConfig",
    "SyntheticTask",
    "make_synthetic_task",
    "sample_return",
    "true_values",
    "subset_task",
    "CounterReturnSampler",
    "save_task",
    "load_task",
]


@dataclass(frozen=True)
class GaussianReturnNoise:
    sigma: float = 1.0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")


@dataclass(frozen=True)
class MixtureReturnNoise:
    """Zero with probability zero_prob, otherwise Gaussian around
    value / (1 - zero_prob) so the expectation stays at the true value."""

    zero_prob: float = 0.5
    sigma: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.zero_prob < 1.0:
            raise ValueError("zero_prob must be in [0, 1)")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")


ReturnNoise = Union[GaussianReturnNoise, MixtureReturnNoise]


@dataclass(frozen=True)
class SyntheticTaskConfig:
    num_policies: int = 50
    num_families: int = 3
    num_probe_states: int = 1000
    action_dim: int = 2
    action_kind: ActionKind = ActionKind.CONTINUOUS
    true_kernel: KernelParams = KernelParams(1.0, 0.25, 1.0)
    return_noise: ReturnNoise = GaussianReturnNoise(1.0)
    ope_noise_sd: float = 1.0
    ope_bias: float = 0.0
    misspecified: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.num_policies < 1:
            raise ValueError("num_policies must be >= 1")
        if not 1 <= self.num_families <= self.num_policies:
            raise ValueError("num_families must be in [1, num_policies]")
        if self.num_probe_states < 1 or self.action_dim < 1:
            raise ValueError("num_probe_states and action_dim must be >= 1")
        if self.ope_noise_sd < 0:
            raise ValueError("ope_noise_sd must be >= 0")
        object.__setattr__(self, "action_kind", ActionKind(self.action_kind))


@dataclass(frozen=True)
class SyntheticTask:
    config: SyntheticTaskConfig
    fingerprints: list[ActionFingerprint]
    distances: DistanceMatrix
    values: np.ndarray
    ope: np.ndarray
    return_key: tuple[int, int]

    @property
    def num_policies(self) -> int:
        return self.values.size


def _family_sizes(num_policies: int, num_families: int) -> list[int]:
    base, extra = divmod(num_policies, num_families)
    return [base + (1 if f < extra else 0) for f in range(num_families)]


def make_synthetic_task(cfg: SyntheticTaskConfig) -> SyntheticTask:
    """Draw one benchmark task from the generator.

    Fingerprints are built family by family in contiguous blocks; true
    values are a draw from the task's own kernel over those fingerprints;
    offline estimates are the true values plus bias and Gaussian noise.
    """
    root = np.random.SeedSequence(cfg.seed)
    ss_geom, ss_values, ss_ope, ss_ret = root.spawn(4)
    rng_geom = np.random.default_rng(ss_geom)
    s, a = cfg.num_probe_states, cfg.action_dim

    fingerprints: list[ActionFingerprint] = []
    pid = 0
    for size in _family_sizes(cfg.num_policies, cfg.num_families):
        if cfg.action_kind is ActionKind.CONTINUOUS:
            center = rng_geom.normal(0.0, 1.0, (s, a))
            direction = rng_geom.normal(0.0, 0.5, (s, a))
            for j in range(size):
                t = j / (size - 1) if size > 1 else 0.5
                jitter = rng_geom.normal(0.0, 0.1, (s, a))
                fingerprints.append(
                    ActionFingerprint(pid, center + t * direction + jitter, cfg.action_kind)
                )
                pid += 1
        else:
            center = rng_geom.integers(0, 8, (s, a))
            for j in range(size):
                t = j / (size - 1) if size > 1 else 0.5
                flip = rng_geom.random((s, a)) < 0.05 + 0.2 * t
                repl = rng_geom.integers(0, 8, (s, a))
                actions = np.where(flip, repl, center).astype(float)
                fingerprints.append(ActionFingerprint(pid, actions, cfg.action_kind))
                pid += 1

    dm = distance_matrix(fingerprints)
    cov = stabilize(kernel_matrix(dm, cfg.true_kernel))
    rng_values = np.random.default_rng(ss_values)
    values = np.linalg.cholesky(cov) @ rng_values.standard_normal(cfg.num_policies)
    if cfg.misspecified:
        scale = 0.5 * np.sqrt(cfg.true_kernel.variance + cfg.true_kernel.constant_variance)
        values = values + scale * rng_values.standard_t(3, cfg.num_policies)

    rng_ope = np.random.default_rng(ss_ope)
    ope = values + cfg.ope_bias + cfg.ope_noise_sd * rng_ope.standard_normal(cfg.num_policies)

    key = ss_ret.generate_state(2)
    return SyntheticTask(
        config=cfg,
        fingerprints=fingerprints,
        distances=dm,
        values=values,
        ope=ope,
        return_key=(int(key[0]), int(key[1])),
    )


def true_values(task: SyntheticTask) -> np.ndarray:
    return task.values.copy()


def sample_return(task: SyntheticTask, k: int, rng: np.random.Generator) -> float:
    """One noisy episodic return for policy ``k`` using the given generator."""
    if not 0 <= k < task.num_policies:
        raise ValueError(f"policy index {k} out of range [0, {task.num_policies})")
    mu = float(task.values[k])
    noise = task.config.return_noise
    if isinstance(noise, GaussianReturnNoise):
        return mu + noise.sigma * float(rng.standard_normal())
    if rng.random() < noise.zero_prob:
        return 0.0
    return mu / (1.0 - noise.zero_prob) + noise.sigma * float(rng.standard_normal())


def subset_task(task: SyntheticTask, indices: np.ndarray) -> SyntheticTask:
    """Restrict a task to a subset of its policies.

    Fingerprint policy ids (and with them the return streams) keep their
    original identity, so the same underlying policy yields the same draws
    whether or not it sits inside a subset.
    """
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1 or idx.size == 0:
        raise ValueError("subset indices must be a nonempty 1-d array")
    if len(np.unique(idx)) != idx.size:
        raise ValueError("subset indices must be distinct")
    if idx.min() < 0 or idx.max() >= task.num_policies:
        raise ValueError("subset index out of range")
    return SyntheticTask(
        config=replace(task.config, num_policies=int(idx.size)),
        fingerprints=[task.fingerprints[int(i)] for i in idx],
        distances=task.distances.submatrix(idx),
        values=task.values[idx],
        ope=task.ope[idx],
        return_key=task.return_key,
    )


class CounterReturnSampler:
    """Deterministic environment: the v-th visit to a policy draws from a
    stream keyed by (task, policy id, v), so repeated runs and competing
    methods see identical luck."""

    def __init__(self, task: SyntheticTask):
        self.task = task
        self._visits = [0] * task.num_policies

    def sample(self, k: int) -> float:
        pid = int(self.task.fingerprints[k].policy_id)
        visit = self._visits[k]
        self._visits[k] += 1
        ss = np.random.SeedSequence([*self.task.return_key, pid, visit])
        return sample_return(self.task, k, np.random.default_rng(ss))


# ---------------------------------------------------------------------------
# export: fingerprint JSON plus a companion values file


def save_task(task: SyntheticTask, fingerprint_path: str | Path, values_path: str | Path) -> None:
    save_fingerprints(fingerprint_path, task.fingerprints)
    doc = {"true_values": task.values.tolist(), "ope": task.ope.tolist()}
    Path(values_path).write_text(json.dumps(doc))


def load_task(
    fingerprint_path: str | Path,
    values_path: str | Path,
    config: SyntheticTaskConfig | None = None,
) -> SyntheticTask:
    """Rebuild a task from its exported form.

    Distances are recomputed from the fingerprints.  A config (matching the
    file contents) is needed to sample returns from the loaded task; without
    one, defaults with the right policy count are attached and only the
    stored values and estimates are meaningful.
    """
    fingerprints = load_fingerprints(fingerprint_path)
    doc = json.loads(Path(values_path).read_text())
    for key in ("true_values", "ope"):
        if key not in doc:
            raise ValueError(f"values file {values_path}: missing field '{key}'")
    values = np.asarray(doc["true_values"], dtype=float)
    ope = np.asarray(doc["ope"], dtype=float)
    if values.size != len(fingerprints) or ope.size != len(fingerprints):
        raise ValueError(
            f"values file {values_path}: lengths do not match {len(fingerprints)} fingerprints"
        )
    if config is None:
        first = fingerprints[0]
        config = SyntheticTaskConfig(
            num_policies=len(fingerprints),
            num_families=1,
            num_probe_states=first.num_probe_states,
            action_dim=first.action_dim,
            action_kind=first.kind,
        )
    key = np.random.SeedSequence(config.seed).spawn(4)[3].generate_state(2)
    return SyntheticTask(
        config=config,
        fingerprints=fingerprints,
        distances=distance_matrix(fingerprints),
        values=values,
        ope=ope,
        return_key=(int(key[0]), int(key[1])),
    )
