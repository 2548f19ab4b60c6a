"""Uncorrelated per-policy value model.

Each policy gets its own Gaussian value with the offline estimate as prior
mean and per-policy noise variances.  Nothing is shared across policies, so
posterior and fit both decouple completely.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _fastmath
from .observations import AdamConfig, IGPrior, ObservationLog, ObservationStats

__all__ = [
    "IndHyperparams",
    "IndPosterior",
    "default_ind_hyperparams",
    "ind_posterior",
    "ind_log_marginal",
    "ind_llh_gradient",
    "ind_fit_map",
    "save_ind_hyperparams",
    "load_ind_hyperparams",
]


@dataclass(frozen=True)
class IndHyperparams:
    """Per-policy noise variances plus the always-on variance priors."""

    ope_noise_var: np.ndarray
    return_noise_var: np.ndarray
    ope_prior: IGPrior = IGPrior(1.0, 1000.0)
    return_prior: IGPrior = IGPrior(1.0, 1000.0)

    def __post_init__(self):
        o = np.asarray(self.ope_noise_var, dtype=float)
        r = np.asarray(self.return_noise_var, dtype=float)
        if o.shape != r.shape or o.ndim != 1:
            raise ValueError("noise variance arrays must be 1-d and the same length")
        if not (np.all(o > 0) and np.all(r > 0)):
            raise ValueError("noise variances must be positive")
        object.__setattr__(self, "ope_noise_var", o)
        object.__setattr__(self, "return_noise_var", r)

    @property
    def num_policies(self) -> int:
        return self.ope_noise_var.size


@dataclass(frozen=True)
class IndPosterior:
    """Per-policy posterior; entries are NaN where ``defined`` is False."""

    mean: np.ndarray
    variance: np.ndarray
    defined: np.ndarray


def default_ind_hyperparams(num_policies: int) -> IndHyperparams:
    return IndHyperparams(
        ope_noise_var=np.full(num_policies, 1000.0),
        return_noise_var=np.full(num_policies, 1000.0),
    )


def _stats(log) -> ObservationStats:
    return log.stats() if isinstance(log, ObservationLog) else log


def _check(stats: ObservationStats, hypers: IndHyperparams) -> None:
    if stats.has_ope.size != hypers.num_policies:
        raise ValueError(
            f"log covers {stats.has_ope.size} policies, hyperparameters cover "
            f"{hypers.num_policies}"
        )
    if not stats.observed.any():
        raise ValueError("no policy has any observation")


def ind_posterior(log: ObservationLog | ObservationStats, hypers: IndHyperparams) -> IndPosterior:
    """Conjugate posterior per policy.

    With the offline estimate present the prior is N(ope, ope_noise_var);
    returns shrink it as usual.  Returns alone give the flat-prior limit
    (sample mean, return_noise_var / n).  Policies with nothing observed are
    undefined.
    """
    stats = _stats(log)
    _check(stats, hypers)
    obs = stats.observed
    p = stats.has_ope / hypers.ope_noise_var + stats.count / hypers.return_noise_var
    with np.errstate(divide="ignore", invalid="ignore"):
        var = np.where(obs, 1.0 / p, np.nan)
        mean = np.where(
            obs,
            var * (stats.has_ope * stats.ope / hypers.ope_noise_var
                   + stats.total / hypers.return_noise_var),
            np.nan,
        )
    return IndPosterior(mean=mean, variance=var, defined=obs)


def _policy_terms(stats: ObservationStats, hypers: IndHyperparams, k: int):
    return (
        math.log(hypers.ope_noise_var[k]),
        math.log(hypers.return_noise_var[k]),
        stats.has_ope[k],
        stats.ope[k],
        stats.count[k],
        stats.total[k],
        stats.total_sq[k],
        hypers.ope_prior.alpha,
        hypers.ope_prior.beta,
        hypers.return_prior.alpha,
        hypers.return_prior.beta,
    )


def ind_log_marginal(log: ObservationLog | ObservationStats, hypers: IndHyperparams) -> float:
    """Sum over observed policies of the per-policy marginal log likelihood
    plus the variance priors, up to constants.  Policies without data
    contribute nothing (their parameters are not part of the objective)."""
    stats = _stats(log)
    _check(stats, hypers)
    total = 0.0
    for k in np.flatnonzero(stats.observed):
        v, _, _ = _fastmath.ind_policy_value_grad(*_policy_terms(stats, hypers, int(k)))
        total += v
    return float(total)


def ind_llh_gradient(log: ObservationLog | ObservationStats, hypers: IndHyperparams) -> np.ndarray:
    """(num_policies, 2) gradient of ind_log_marginal in
    (log ope_noise_var, log return_noise_var); zero rows for unobserved policies."""
    stats = _stats(log)
    _check(stats, hypers)
    grad = np.zeros((hypers.num_policies, 2))
    for k in np.flatnonzero(stats.observed):
        _, g0, g1 = _fastmath.ind_policy_value_grad(*_policy_terms(stats, hypers, int(k)))
        grad[k, 0] = g0
        grad[k, 1] = g1
    return grad


def ind_fit_map(
    log: ObservationLog | ObservationStats,
    hypers: IndHyperparams,
    adam: AdamConfig = AdamConfig(),
) -> IndHyperparams:
    """Per-policy Adam ascent; unobserved policies keep their current values."""
    stats = _stats(log)
    _check(stats, hypers)
    theta0 = np.stack(
        [np.log(hypers.ope_noise_var), np.log(hypers.return_noise_var)], axis=1
    )
    fitted = _fastmath.ind_fit(
        theta0,
        stats.has_ope, stats.ope, stats.count, stats.total, stats.total_sq,
        hypers.ope_prior.alpha, hypers.ope_prior.beta,
        hypers.return_prior.alpha, hypers.return_prior.beta,
        adam.learning_rate, adam.beta1, adam.beta2, adam.epsilon, adam.steps,
    )
    return IndHyperparams(
        ope_noise_var=np.exp(fitted[:, 0]),
        return_noise_var=np.exp(fitted[:, 1]),
        ope_prior=hypers.ope_prior,
        return_prior=hypers.return_prior,
    )


def save_ind_hyperparams(path: str | Path, hypers: IndHyperparams) -> None:
    doc = {
        "ope_noise_var": hypers.ope_noise_var.tolist(),
        "return_noise_var": hypers.return_noise_var.tolist(),
        "ope_prior": {"alpha": hypers.ope_prior.alpha, "beta": hypers.ope_prior.beta},
        "return_prior": {"alpha": hypers.return_prior.alpha, "beta": hypers.return_prior.beta},
    }
    Path(path).write_text(json.dumps(doc, indent=2))


def load_ind_hyperparams(path: str | Path) -> IndHyperparams:
    doc = json.loads(Path(path).read_text())
    return IndHyperparams(
        ope_noise_var=np.asarray(doc["ope_noise_var"], dtype=float),
        return_noise_var=np.asarray(doc["return_noise_var"], dtype=float),
        ope_prior=IGPrior(**doc["ope_prior"]),
        return_prior=IGPrior(**doc["return_prior"]),
    )
