"""Active selection loop: which policy to execute next, which to recommend.

The loop alternates hyperparameter refits, posterior updates and acquisition
maximization.  Both value models plug in behind the same three calls (refit,
posterior, recommend); candidates the uncorrelated model cannot score yet are
forced to the front of the acquisition queue.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Protocol, Union

import numpy as np
from scipy.special import ndtr

from .fingerprints import ActionFingerprint, DistanceMatrix, distance_matrix, kernel_matrix
from .gp import (
    GPHyperparams,
    aggregate_observations,
    default_gp_hyperparams,
    fit_map,
    posterior,
)
from .independent import IndHyperparams, default_ind_hyperparams, ind_fit_map, ind_posterior
from .observations import AdamConfig, ObservationLog

__all__ = [
    "Ucb",
    "Uniform",
    "EpsilonGreedy",
    "ExpectedImprovement",
    "AcquisitionStrategy",
    "parse_strategy",
    "LoopConfig",
    "Trace",
    "ReturnEnv",
    "ucb_scores",
    "expected_improvement_scores",
    "acquisition_scores",
    "select_next",
    "recommend",
    "run_selection",
    "write_trace_csv",
    "read_trace_csv",
]


@dataclass(frozen=True)
class Ucb:
    beta_sqrt: float = 5.0


@dataclass(frozen=True)
class Uniform:
    pass


@dataclass(frozen=True)
class EpsilonGreedy:
    epsilon: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must be in [0, 1], got {self.epsilon}")


@dataclass(frozen=True)
class ExpectedImprovement:
    pass


AcquisitionStrategy = Union[Ucb, Uniform, EpsilonGreedy, ExpectedImprovement]


def parse_strategy(name: str, beta_sqrt: float = 5.0, epsilon: float = 0.1) -> AcquisitionStrategy:
    table = {
        "ucb": Ucb(beta_sqrt),
        "uniform": Uniform(),
        "epsilon-greedy": EpsilonGreedy(epsilon),
        "ei": ExpectedImprovement(),
    }
    if name not in table:
        raise ValueError(f"unknown acquisition strategy '{name}' (choose from {sorted(table)})")
    return table[name]


class ReturnEnv(Protocol):
    """The single capability the loop needs from an environment."""

    def sample(self, k: int) -> float: ...


@dataclass(frozen=True)
class LoopConfig:
    budget: int
    use_ope: bool
    model: Literal["gp", "ind"]
    strategy: AcquisitionStrategy
    n_init: int | None = None  # None resolves to 0 with ope, 5 without
    refit_every: int = 1
    seed: int = 0
    adam: AdamConfig = AdamConfig()

    def __post_init__(self):
        if self.budget < 0:
            raise ValueError("budget must be >= 0")
        if self.refit_every < 1:
            raise ValueError("refit_every must be >= 1")
        if self.n_init is not None and self.n_init < 0:
            raise ValueError("n_init must be >= 0")
        if self.model not in ("gp", "ind"):
            raise ValueError(f"unknown model '{self.model}'")

    @property
    def resolved_n_init(self) -> int:
        if self.n_init is not None:
            return self.n_init
        return 0 if self.use_ope else 5


@dataclass(frozen=True)
class Trace:
    """One selection run: what was executed, observed and recommended."""

    executed: np.ndarray
    returns: np.ndarray
    recommended: np.ndarray
    final_recommendation: int
    aborted: bool = False

    @property
    def num_steps(self) -> int:
        return self.executed.size


# ---------------------------------------------------------------------------
# acquisition


def ucb_scores(post, beta_sqrt: float = 5.0) -> np.ndarray:
    """Posterior mean plus beta_sqrt posterior standard deviations."""
    var = np.clip(np.asarray(post.variance, dtype=float), 0.0, None)
    return np.asarray(post.mean, dtype=float) + beta_sqrt * np.sqrt(var)


def expected_improvement_scores(post) -> np.ndarray:
    """Expected improvement over the best posterior mean; zero where the
    posterior is deterministic."""
    mean = np.asarray(post.mean, dtype=float)
    sd = np.sqrt(np.clip(np.asarray(post.variance, dtype=float), 0.0, None))
    defined = _defined_mask(post)
    incumbent = np.max(mean[defined])
    out = np.zeros_like(mean)
    pos = defined & (sd > 0)
    z = (mean[pos] - incumbent) / sd[pos]
    out[pos] = (mean[pos] - incumbent) * ndtr(z) + sd[pos] * np.exp(-0.5 * z * z) / math.sqrt(
        2.0 * math.pi
    )
    return out


def _defined_mask(post) -> np.ndarray:
    defined = getattr(post, "defined", None)
    if defined is None:
        return np.ones(np.asarray(post.mean).shape, dtype=bool)
    return np.asarray(defined, dtype=bool)


def acquisition_scores(post, strategy: AcquisitionStrategy) -> np.ndarray:
    """Score vector for the given strategy.

    Candidates without a defined posterior score +inf, so they are tried
    first (lowest index first among themselves).
    """
    defined = _defined_mask(post)
    if isinstance(strategy, Uniform):
        scores = np.zeros(defined.size)
    elif isinstance(strategy, Ucb):
        scores = ucb_scores(post, strategy.beta_sqrt)
    elif isinstance(strategy, EpsilonGreedy):
        scores = np.asarray(post.mean, dtype=float).copy()
    elif isinstance(strategy, ExpectedImprovement):
        scores = expected_improvement_scores(post)
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    scores = np.where(defined, scores, np.inf)
    return scores


def select_next(scores: np.ndarray, strategy: AcquisitionStrategy, rng: np.random.Generator) -> int:
    """Pick the next policy to execute.  Ties break to the lowest index."""
    scores = np.asarray(scores, dtype=float)
    if scores.ndim != 1 or scores.size == 0:
        raise ValueError("scores must be a nonempty vector")
    if np.isnan(scores).any():
        raise ValueError("scores contain NaN")
    if isinstance(strategy, Uniform):
        return int(rng.integers(scores.size))
    if isinstance(strategy, EpsilonGreedy) and rng.random() < strategy.epsilon:
        return int(rng.integers(scores.size))
    return int(np.argmax(scores))


def recommend(post) -> int:
    """Index of the highest posterior mean among defined policies."""
    defined = _defined_mask(post)
    if not defined.any():
        raise ValueError("cannot recommend: no policy has a defined posterior")
    mean = np.where(defined, np.asarray(post.mean, dtype=float), -np.inf)
    return int(np.argmax(mean))


# ---------------------------------------------------------------------------
# model adapters


class _GpState:
    def __init__(self, distances: DistanceMatrix, use_priors: bool, adam: AdamConfig):
        self.distances = distances
        self.hypers: GPHyperparams = default_gp_hyperparams(distances, use_priors=use_priors)
        self.adam = adam

    def refit(self, log: ObservationLog) -> None:
        self.hypers = fit_map(log, self.hypers, self.distances, self.adam)

    def posterior(self, log: ObservationLog):
        eff = aggregate_observations(log, self.hypers)
        cov = kernel_matrix(self.distances, self.hypers.kernel)
        return posterior(cov, eff, self.hypers.mean)


class _IndState:
    def __init__(self, num_policies: int, adam: AdamConfig):
        self.hypers: IndHyperparams = default_ind_hyperparams(num_policies)
        self.adam = adam

    def refit(self, log: ObservationLog) -> None:
        self.hypers = ind_fit_map(log, self.hypers, self.adam)

    def posterior(self, log: ObservationLog):
        return ind_posterior(log, self.hypers)


# ---------------------------------------------------------------------------
# the loop


def run_selection(
    env: ReturnEnv,
    fingerprints: list[ActionFingerprint] | None,
    ope_estimates: np.ndarray | None,
    cfg: LoopConfig,
    distances: DistanceMatrix | None = None,
) -> Trace:
    """Run the full selection loop and return its trace.

    The first resolved_n_init steps sample uniformly; afterwards
    hyperparameters are refit on the schedule (first active step always
    refits, then every refit_every-th), the posterior is updated, and the
    acquisition strategy picks the policy to execute.  After every observed
    return the current recommendation (highest posterior mean) is recorded,
    and one final refit produces the closing recommendation.

    ``ope_estimates`` may contain NaN for policies without an offline
    estimate; it is ignored entirely when cfg.use_ope is False.  A distance
    matrix can be passed to reuse a cached one; otherwise it is computed from
    the fingerprints.  If the environment raises while sampling, the partial
    trace is returned with ``aborted=True``.
    """
    if distances is None:
        if fingerprints is None:
            raise ValueError("need fingerprints or a distance matrix")
        distances = distance_matrix(fingerprints)
    num = distances.num_policies
    if fingerprints is not None and len(fingerprints) != num:
        raise ValueError("fingerprints and distance matrix disagree on the number of policies")

    log = ObservationLog(num)
    if cfg.use_ope:
        if ope_estimates is None:
            raise ValueError("cfg.use_ope is set but no offline estimates were given")
        ope_arr = np.asarray(ope_estimates, dtype=float)
        if ope_arr.shape != (num,):
            raise ValueError(f"offline estimates have shape {ope_arr.shape}, expected ({num},)")
        present = np.isfinite(ope_arr)
        if not present.any():
            raise ValueError("cfg.use_ope is set but every offline estimate is missing")
        for k in np.flatnonzero(present):
            log.set_ope(int(k), float(ope_arr[k]))

    if cfg.model == "gp":
        state = _GpState(distances, use_priors=not cfg.use_ope, adam=cfg.adam)
    else:
        state = _IndState(num, adam=cfg.adam)

    rng = np.random.default_rng(cfg.seed)
    n_init = cfg.resolved_n_init
    executed: list[int] = []
    returns: list[float] = []
    recommended: list[int] = []
    aborted = False

    for i in range(1, cfg.budget + 1):
        if i <= n_init:
            k = int(rng.integers(num))
        else:
            j = i - n_init
            if (j - 1) % cfg.refit_every == 0:
                state.refit(log)
            post = state.posterior(log)
            scores = acquisition_scores(post, cfg.strategy)
            k = select_next(scores, cfg.strategy, rng)
        try:
            r = float(env.sample(k))
        except Exception:
            aborted = True
            break
        log.add_return(k, r)
        executed.append(k)
        returns.append(r)
        recommended.append(recommend(state.posterior(log)))

    if aborted:
        final = recommended[-1] if recommended else -1
    else:
        state.refit(log)
        final = recommend(state.posterior(log))

    return Trace(
        executed=np.asarray(executed, dtype=np.int64),
        returns=np.asarray(returns, dtype=float),
        recommended=np.asarray(recommended, dtype=np.int64),
        final_recommendation=int(final),
        aborted=aborted,
    )


# ---------------------------------------------------------------------------
# trace i/o: columns step, executed_policy, return, recommended_policy


def write_trace_csv(path: str | Path, trace: Trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "executed_policy", "return", "recommended_policy"])
        for i in range(trace.num_steps):
            w.writerow([
                i + 1,
                int(trace.executed[i]),
                repr(float(trace.returns[i])),
                int(trace.recommended[i]),
            ])


def read_trace_csv(path: str | Path) -> Trace:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["step", "executed_policy", "return", "recommended_policy"]:
        raise ValueError(f"trace file {path}: unexpected header")
    body = rows[1:]
    executed = np.array([int(r[1]) for r in body], dtype=np.int64)
    returns = np.array([float(r[2]) for r in body], dtype=float)
    recommended = np.array([int(r[3]) for r in body], dtype=np.int64)
    final = int(recommended[-1]) if len(body) else -1
    return Trace(executed, returns, recommended, final)
