"""Policy fingerprints and the covariance kernel built on them.

A policy is represented by the actions it takes on a fixed set of probe
states.  Distances between those action matrices give a pseudometric on
policies, and an exponential kernel on that distance gives the covariance
used by the correlated value model.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

__all__ = [
    "ActionKind",
    "ActionFingerprint",
    "ProbeStateSet",
    "DistanceMatrix",
    "KernelParams",
    "action_distance",
    "policy_distance",
    "distance_matrix",
    "kernel_matrix",
    "stabilize",
    "subsample_probe_states",
    "normalize_fingerprints",
    "load_fingerprints",
    "save_fingerprints",
    "write_distance_csv",
    "read_distance_csv",
]


class ActionKind(str, Enum):
    CONTINUOUS = "continuous"
    DISCRETE = "discrete"


@dataclass(frozen=True)
class ActionFingerprint:
    """Actions of one policy on the shared probe states.

    ``actions`` has shape (num_probe_states, action_dim).  Discrete actions
    are stored as integer codes (action_dim columns of codes; one column in
    the common case).
    """

    policy_id: int
    actions: np.ndarray
    kind: ActionKind = ActionKind.CONTINUOUS

    def __post_init__(self):
        a = np.asarray(self.actions, dtype=float)
        if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
            raise ValueError(
                f"fingerprint for policy {self.policy_id}: actions must be a "
                f"2-d (num_probe_states, action_dim) array, got shape {a.shape}"
            )
        if not np.all(np.isfinite(a)):
            raise ValueError(f"fingerprint for policy {self.policy_id}: non-finite action values")
        object.__setattr__(self, "actions", a)
        object.__setattr__(self, "kind", ActionKind(self.kind))

    @property
    def num_probe_states(self) -> int:
        return self.actions.shape[0]

    @property
    def action_dim(self) -> int:
        return self.actions.shape[1]


@dataclass(frozen=True)
class ProbeStateSet:
    """Indices of dataset states on which fingerprints are evaluated."""

    indices: np.ndarray
    dataset_size: int

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.ndim != 1:
            raise ValueError("probe state indices must be 1-d")
        if len(np.unique(idx)) != idx.size:
            raise ValueError("probe state indices must be distinct")
        if idx.size > 0 and (idx.min() < 0 or idx.max() >= self.dataset_size):
            raise ValueError("probe state index out of range")
        object.__setattr__(self, "indices", idx)

    @property
    def count(self) -> int:
        return self.indices.size


@dataclass(frozen=True)
class DistanceMatrix:
    """Pairwise mean action distances, cached with the policy ids."""

    values: np.ndarray
    policy_ids: tuple[int, ...]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        k = len(self.policy_ids)
        if v.shape != (k, k):
            raise ValueError(f"distance matrix shape {v.shape} does not match {k} policy ids")
        object.__setattr__(self, "values", v)

    @property
    def num_policies(self) -> int:
        return len(self.policy_ids)

    def submatrix(self, rows: np.ndarray) -> "DistanceMatrix":
        rows = np.asarray(rows, dtype=np.int64)
        ids = tuple(self.policy_ids[i] for i in rows)
        return DistanceMatrix(self.values[np.ix_(rows, rows)], ids)


@dataclass(frozen=True)
class KernelParams:
    """Parameters of k(i, j) = variance * exp(-d(i, j) / length_scale) + constant_variance.

    All three are kept strictly positive; fitting happens on their logs.
    """

    variance: float = 1.0
    constant_variance: float = 0.25
    length_scale: float = 1.0

    def __post_init__(self):
        for name in ("variance", "constant_variance", "length_scale"):
            v = float(getattr(self, name))
            if not np.isfinite(v) or v <= 0.0:
                raise ValueError(f"kernel {name} must be positive and finite, got {v}")
            object.__setattr__(self, name, v)


# ---------------------------------------------------------------------------
# distances


def action_distance(a: np.ndarray, b: np.ndarray, kind: ActionKind) -> float:
    """Distance between two single-state actions.

    Euclidean norm for continuous actions, mean per-coordinate disagreement
    (Hamming fraction) for discrete ones.
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise ValueError(f"action shapes differ: {a.shape} vs {b.shape}")
    if ActionKind(kind) is ActionKind.CONTINUOUS:
        return float(np.linalg.norm(a - b))
    return float(np.mean(a != b))


def policy_distance(fa: ActionFingerprint, fb: ActionFingerprint) -> float:
    """Mean over probe states of the per-state action distance.

    Symmetric, nonnegative, and zero on identical fingerprints; it is a
    pseudometric (distinct policies may still act identically on every
    probe state).
    """
    _check_compatible(fa, fb)
    if fa.kind is ActionKind.CONTINUOUS:
        per_state = np.linalg.norm(fa.actions - fb.actions, axis=1)
        return float(per_state.mean())
    return float(np.mean(fa.actions != fb.actions))


def distance_matrix(fingerprints: list[ActionFingerprint]) -> DistanceMatrix:
    """All pairwise policy distances.

    Computed once up front; downstream model code only ever consumes this
    matrix (or a submatrix of it), never raw fingerprints.
    """
    if len(fingerprints) == 0:
        raise ValueError("need at least one fingerprint")
    first = fingerprints[0]
    for f in fingerprints[1:]:
        _check_compatible(first, f)
    k = len(fingerprints)
    out = np.zeros((k, k), dtype=float)
    stack = np.stack([f.actions for f in fingerprints])  # (k, states, dim)
    for i in range(k - 1):
        diff = stack[i + 1 :] - stack[i]
        if first.kind is ActionKind.CONTINUOUS:
            d = np.sqrt((diff * diff).sum(axis=2)).mean(axis=1)
        else:
            d = (stack[i + 1 :] != stack[i]).mean(axis=(1, 2))
        out[i, i + 1 :] = d
        out[i + 1 :, i] = d
    return DistanceMatrix(out, tuple(f.policy_id for f in fingerprints))


def _check_compatible(fa: ActionFingerprint, fb: ActionFingerprint) -> None:
    if fa.kind is not fb.kind:
        raise ValueError(f"incompatible fingerprints: kind {fa.kind.value} vs {fb.kind.value}")
    if fa.actions.shape != fb.actions.shape:
        raise ValueError(
            f"incompatible fingerprints: shapes {fa.actions.shape} vs {fb.actions.shape}"
        )


# ---------------------------------------------------------------------------
# kernel


def kernel_matrix(distances: DistanceMatrix | np.ndarray, params: KernelParams) -> np.ndarray:
    """Covariance matrix variance * exp(-d / length_scale) + constant_variance.

    The constant offset is equivalent to an unknown shared mean shift across
    all policies.  The diagonal equals variance + constant_variance exactly.
    """
    d = distances.values if isinstance(distances, DistanceMatrix) else np.asarray(distances, float)
    return params.variance * np.exp(-d / params.length_scale) + params.constant_variance


def stabilize(cov: np.ndarray) -> np.ndarray:
    """Covariance with the standard diagonal jitter added.

    Jitter is 1e-8 times the mean diagonal entry (for our kernel the diagonal
    is constant, so this is 1e-8 * (variance + constant_variance)).  Every
    factorization in the package goes through this same convention.
    """
    cov = np.asarray(cov, dtype=float)
    jitter = 1e-8 * float(np.trace(cov)) / cov.shape[0]
    return cov + jitter * np.eye(cov.shape[0])


def subsample_probe_states(dataset_size: int, count: int, rng: np.random.Generator) -> ProbeStateSet:
    """Pick ``count`` distinct state indices uniformly from the dataset."""
    if count < 1 or count > dataset_size:
        raise ValueError(f"cannot pick {count} distinct states from {dataset_size}")
    idx = rng.choice(dataset_size, size=count, replace=False)
    return ProbeStateSet(idx, dataset_size)


def normalize_fingerprints(fingerprints: list[ActionFingerprint]) -> list[ActionFingerprint]:
    """Rescale each continuous action dimension to unit variance across all
    policies and probe states.  Dimensions with zero variance are left alone.
    Discrete fingerprints are returned unchanged."""
    if not fingerprints:
        return []
    if fingerprints[0].kind is ActionKind.DISCRETE:
        return list(fingerprints)
    stack = np.stack([f.actions for f in fingerprints])
    sd = stack.reshape(-1, stack.shape[2]).std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return [
        ActionFingerprint(f.policy_id, f.actions / sd, f.kind) for f in fingerprints
    ]


# ---------------------------------------------------------------------------
# i/o


def save_fingerprints(path: str | Path, fingerprints: list[ActionFingerprint]) -> None:
    if not fingerprints:
        raise ValueError("nothing to save: empty fingerprint list")
    first = fingerprints[0]
    for f in fingerprints[1:]:
        _check_compatible(first, f)
    doc = {
        "action_kind": first.kind.value,
        "num_probe_states": first.num_probe_states,
        "action_dim": first.action_dim,
        "policies": [
            {"id": int(f.policy_id), "actions": f.actions.tolist()} for f in fingerprints
        ],
    }
    Path(path).write_text(json.dumps(doc))


def load_fingerprints(path: str | Path, normalize: bool = False) -> list[ActionFingerprint]:
    """Read fingerprints from their JSON form.

    ``normalize`` optionally applies per-dimension variance normalization on
    ingestion (off by default).
    """
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"malformed fingerprint file {path}: {e}") from e
    for key in ("action_kind", "num_probe_states", "action_dim", "policies"):
        if key not in doc:
            raise ValueError(f"fingerprint file {path}: missing field '{key}'")
    kind = ActionKind(doc["action_kind"])
    n, a = int(doc["num_probe_states"]), int(doc["action_dim"])
    out = []
    for entry in doc["policies"]:
        if "id" not in entry or "actions" not in entry:
            raise ValueError(f"fingerprint file {path}: policy entry missing 'id' or 'actions'")
        actions = np.asarray(entry["actions"], dtype=float)
        if actions.shape != (n, a):
            raise ValueError(
                f"fingerprint file {path}: policy {entry['id']} actions shape "
                f"{actions.shape} != ({n}, {a})"
            )
        out.append(ActionFingerprint(int(entry["id"]), actions, kind))
    if normalize:
        out = normalize_fingerprints(out)
    return out


def write_distance_csv(path: str | Path, dm: DistanceMatrix) -> None:
    """Row-major CSV with a header row of policy ids."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([str(i) for i in dm.policy_ids])
        for row in dm.values:
            w.writerow([repr(float(v)) for v in row])


def read_distance_csv(path: str | Path) -> DistanceMatrix:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"distance file {path} is empty")
    ids = tuple(int(x) for x in rows[0])
    values = np.asarray([[float(x) for x in r] for r in rows[1:]], dtype=float)
    return DistanceMatrix(values, ids)
