"""Correlated value model over the candidate policies.

Candidate values get a joint Gaussian prior whose covariance comes from the
fingerprint kernel.  Offline estimates and episodic returns are independent
Gaussian observations of the per-policy value; per policy they collapse into
one effective observation with an effective noise variance, which keeps the
conditioning matrix at num_policies x num_policies no matter how many returns
arrive.

Hyperparameters are fit by Adam on the log marginal likelihood, with every
variance handled on the log scale.  The gradient order everywhere is

    (mean, log ope_noise_var, log return_noise_var,
     log kernel_var, log constant_var, log length_scale)
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import _fastmath
from .fingerprints import DistanceMatrix, KernelParams, kernel_matrix
from .observations import AdamConfig, IGPrior, ObservationLog, ObservationStats

__all__ = [
    "GPPriors",
    "GPHyperparams",
    "EffectiveObservations",
    "Posterior",
    "THETA_ORDER",
    "default_gp_hyperparams",
    "aggregate_observations",
    "posterior",
    "log_marginal_likelihood",
    "llh_gradient",
    "fit_map",
    "save_gp_hyperparams",
    "load_gp_hyperparams",
]

THETA_ORDER = (
    "mean",
    "log_ope_noise_var",
    "log_return_noise_var",
    "log_kernel_var",
    "log_constant_var",
    "log_length_scale",
)

# optimizer guard rails: log-variances stay in [-25, 25], the mean stays sane
_LOG_BOUND = 25.0
_MEAN_BOUND = 1e6


@dataclass(frozen=True)
class GPPriors:
    """Inverse-gamma priors on the four variance hyperparameters."""

    ope_noise: IGPrior
    return_noise: IGPrior
    kernel_var: IGPrior
    constant_var: IGPrior

    @classmethod
    def default(cls) -> "GPPriors":
        p = IGPrior(1.0, 200.0)
        return cls(p, p, p, p)


@dataclass(frozen=True)
class GPHyperparams:
    mean: float
    ope_noise_var: float
    return_noise_var: float
    kernel: KernelParams
    priors: GPPriors | None = None

    def __post_init__(self):
        for name in ("ope_noise_var", "return_noise_var"):
            v = float(getattr(self, name))
            if not math.isfinite(v) or v <= 0:
                raise ValueError(f"{name} must be positive and finite, got {v}")
            object.__setattr__(self, name, v)
        if not math.isfinite(self.mean):
            raise ValueError("mean must be finite")


@dataclass(frozen=True)
class EffectiveObservations:
    """Per-policy collapsed observation ``y`` with noise variance ``lam``.

    Entries are NaN where ``observed`` is False; they must not be read there.
    """

    y: np.ndarray
    lam: np.ndarray
    observed: np.ndarray


@dataclass(frozen=True)
class Posterior:
    mean: np.ndarray
    cov: np.ndarray

    @property
    def variance(self) -> np.ndarray:
        return np.clip(np.diag(self.cov), 0.0, None)


def default_gp_hyperparams(
    distances: DistanceMatrix | np.ndarray | None = None,
    use_priors: bool = False,
) -> GPHyperparams:
    """Starting hyperparameters for a fresh fit.

    Noise variances start wide at 1000, the kernel at unit variance with a
    constant offset of 10.  The length scale starts at the median positive
    pairwise distance when a distance matrix is supplied (1.0 otherwise, or
    when no positive distances exist).
    """
    length = 1.0
    if distances is not None:
        d = distances.values if isinstance(distances, DistanceMatrix) else np.asarray(distances)
        pos = d[d > 0]
        if pos.size:
            length = float(np.median(pos))
    return GPHyperparams(
        mean=0.0,
        ope_noise_var=1000.0,
        return_noise_var=1000.0,
        kernel=KernelParams(1.0, 10.0, length),
        priors=GPPriors.default() if use_priors else None,
    )


def aggregate_observations(
    log: ObservationLog | ObservationStats, hypers: GPHyperparams
) -> EffectiveObservations:
    """Collapse each policy's raw observations into one Gaussian pseudo-observation.

    With precision p_k = has_ope_k / ope_noise_var + n_k / return_noise_var,
    the effective observation is y_k = (ope_k / ope_noise_var +
    sum_of_returns_k / return_noise_var) / p_k with variance lam_k = 1 / p_k.
    """
    stats = log.stats() if isinstance(log, ObservationLog) else log
    obs = stats.observed
    p = stats.has_ope / hypers.ope_noise_var + stats.count / hypers.return_noise_var
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = np.where(obs, 1.0 / p, np.nan)
        y = np.where(
            obs,
            lam * (stats.has_ope * stats.ope / hypers.ope_noise_var
                   + stats.total / hypers.return_noise_var),
            np.nan,
        )
    return EffectiveObservations(y=y, lam=lam, observed=obs)


def posterior(cov: np.ndarray, eff: EffectiveObservations, mean: float) -> Posterior:
    """Condition the joint Gaussian prior on the effective observations.

    Returns the posterior over all policies, observed or not.  Uses a
    Cholesky factorization of the observed block plus noise; the standard
    diagonal jitter is escalated tenfold on failure up to 1e-4 of the trace,
    after which a numerical error is raised.
    """
    cov = np.asarray(cov, dtype=float)
    k_total = cov.shape[0]
    obs = np.asarray(eff.observed, dtype=bool)
    if obs.sum() == 0:
        raise ValueError("cannot form a posterior: no policy has any observation")
    idx = np.flatnonzero(obs)
    y = np.asarray(eff.y, dtype=float)[idx]
    lam = np.asarray(eff.lam, dtype=float)[idx]
    if not (np.all(np.isfinite(y)) and np.all(lam > 0)):
        raise ValueError("effective observations must be finite with positive noise variance")

    c_obs = cov[np.ix_(idx, idx)] + np.diag(lam)
    jitter = 1e-8 * float(np.trace(cov)) / k_total
    cap = 1e-4 * float(np.trace(c_obs))
    factor = None
    while True:
        try:
            factor = cho_factor(c_obs + jitter * np.eye(idx.size), lower=True)
            break
        except np.linalg.LinAlgError:
            jitter *= 10.0
            if jitter > cap:
                raise np.linalg.LinAlgError(
                    "covariance factorization failed even at maximum jitter"
                )
    gain = cho_solve(factor, cov[idx, :])  # solves C z = K[obs, :]
    post_mean = mean + gain.T @ (y - mean)
    post_cov = cov - cov[:, idx] @ gain
    post_cov = 0.5 * (post_cov + post_cov.T)
    return Posterior(mean=post_mean, cov=post_cov)


def _pack_theta(hypers: GPHyperparams) -> np.ndarray:
    return np.array([
        hypers.mean,
        math.log(hypers.ope_noise_var),
        math.log(hypers.return_noise_var),
        math.log(hypers.kernel.variance),
        math.log(hypers.kernel.constant_variance),
        math.log(hypers.kernel.length_scale),
    ])


def _unpack_theta(theta: np.ndarray, priors: GPPriors | None) -> GPHyperparams:
    return GPHyperparams(
        mean=float(theta[0]),
        ope_noise_var=math.exp(theta[1]),
        return_noise_var=math.exp(theta[2]),
        kernel=KernelParams(math.exp(theta[3]), math.exp(theta[4]), math.exp(theta[5])),
        priors=priors,
    )


def _pack_priors(priors: GPPriors | None) -> tuple[np.ndarray, bool]:
    if priors is None:
        return np.zeros(8), False
    ab = np.array([
        priors.ope_noise.alpha, priors.ope_noise.beta,
        priors.return_noise.alpha, priors.return_noise.beta,
        priors.kernel_var.alpha, priors.kernel_var.beta,
        priors.constant_var.alpha, priors.constant_var.beta,
    ])
    return ab, True


def _observed_inputs(log, distances):
    stats = log.stats() if isinstance(log, ObservationLog) else log
    obs = stats.observed
    if obs.sum() == 0:
        raise ValueError("no policy has any observation")
    idx = np.flatnonzero(obs)
    d = distances.values if isinstance(distances, DistanceMatrix) else np.asarray(distances, float)
    if d.shape[0] != obs.size:
        raise ValueError(
            f"distance matrix is {d.shape[0]}x{d.shape[0]} but the log covers {obs.size} policies"
        )
    d_obs = np.ascontiguousarray(d[np.ix_(idx, idx)])
    return (
        d_obs,
        np.ascontiguousarray(stats.has_ope[idx]),
        np.ascontiguousarray(stats.ope[idx]),
        np.ascontiguousarray(stats.count[idx]),
        np.ascontiguousarray(stats.total[idx]),
        np.ascontiguousarray(stats.total_sq[idx]),
    )


def log_marginal_likelihood(
    log: ObservationLog | ObservationStats,
    hypers: GPHyperparams,
    distances: DistanceMatrix | np.ndarray,
) -> float:
    """Log marginal likelihood of everything observed, up to an additive
    constant independent of the hyperparameters.  Includes the variance
    priors when the hyperparameters carry them."""
    arrays = _observed_inputs(log, distances)
    prior_ab, use_priors = _pack_priors(hypers.priors)
    value, _ = _fastmath.gp_value_and_grad(_pack_theta(hypers), *arrays, prior_ab, use_priors)
    return float(value)


def llh_gradient(
    log: ObservationLog | ObservationStats,
    hypers: GPHyperparams,
    distances: DistanceMatrix | np.ndarray,
) -> np.ndarray:
    """Gradient of log_marginal_likelihood in THETA_ORDER."""
    arrays = _observed_inputs(log, distances)
    prior_ab, use_priors = _pack_priors(hypers.priors)
    _, grad = _fastmath.gp_value_and_grad(_pack_theta(hypers), *arrays, prior_ab, use_priors)
    return np.asarray(grad, dtype=float)


def _clamp(theta: np.ndarray) -> np.ndarray:
    out = theta.copy()
    out[0] = min(_MEAN_BOUND, max(-_MEAN_BOUND, out[0]))
    out[1:] = np.clip(out[1:], -_LOG_BOUND, _LOG_BOUND)
    return out


def fit_map(
    log: ObservationLog | ObservationStats,
    hypers: GPHyperparams,
    distances: DistanceMatrix | np.ndarray,
    adam: AdamConfig = AdamConfig(),
) -> GPHyperparams:
    """Adam ascent of the log marginal likelihood, warm-started at ``hypers``.

    Runs a fixed number of steps and returns the best iterate seen (which is
    never worse than the starting point).  A step that produces a non-finite
    objective is retried at half length and reverted if still non-finite;
    a failed factorization counts as non-finite.
    """
    arrays = _observed_inputs(log, distances)
    prior_ab, use_priors = _pack_priors(hypers.priors)

    def evaluate(theta):
        try:
            v, g = _fastmath.gp_value_and_grad(theta, *arrays, prior_ab, use_priors)
        except np.linalg.LinAlgError:
            return -np.inf, np.zeros(6)
        if not math.isfinite(v):
            return -np.inf, np.zeros(6)
        return v, np.asarray(g)

    theta = _clamp(_pack_theta(hypers))
    value, grad = evaluate(theta)
    best_value, best_theta = value, theta
    m1 = np.zeros(6)
    m2 = np.zeros(6)
    for t in range(1, adam.steps + 1):
        m1 = adam.beta1 * m1 + (1.0 - adam.beta1) * grad
        m2 = adam.beta2 * m2 + (1.0 - adam.beta2) * grad * grad
        step = adam.learning_rate * (m1 / (1.0 - adam.beta1**t)) / (
            np.sqrt(m2 / (1.0 - adam.beta2**t)) + adam.epsilon
        )
        for scale in (1.0, 0.5):
            cand = _clamp(theta + scale * step)
            v, g = evaluate(cand)
            if math.isfinite(v):
                theta, value, grad = cand, v, g
                break
        if value > best_value:
            best_value, best_theta = value, theta
    return _unpack_theta(best_theta, hypers.priors)


# ---------------------------------------------------------------------------
# snapshots


def _priors_to_dict(priors: GPPriors | None):
    if priors is None:
        return None
    return {
        name: {"alpha": p.alpha, "beta": p.beta}
        for name, p in (
            ("ope_noise", priors.ope_noise),
            ("return_noise", priors.return_noise),
            ("kernel_var", priors.kernel_var),
            ("constant_var", priors.constant_var),
        )
    }


def save_gp_hyperparams(path: str | Path, hypers: GPHyperparams) -> None:
    doc = {
        "mean": hypers.mean,
        "ope_noise_var": hypers.ope_noise_var,
        "return_noise_var": hypers.return_noise_var,
        "kernel": {
            "variance": hypers.kernel.variance,
            "constant_variance": hypers.kernel.constant_variance,
            "length_scale": hypers.kernel.length_scale,
        },
        "priors": _priors_to_dict(hypers.priors),
    }
    Path(path).write_text(json.dumps(doc, indent=2))


def load_gp_hyperparams(path: str | Path) -> GPHyperparams:
    doc = json.loads(Path(path).read_text())
    priors = None
    if doc.get("priors") is not None:
        p = doc["priors"]
        priors = GPPriors(
            IGPrior(**p["ope_noise"]),
            IGPrior(**p["return_noise"]),
            IGPrior(**p["kernel_var"]),
            IGPrior(**p["constant_var"]),
        )
    return GPHyperparams(
        mean=float(doc["mean"]),
        ope_noise_var=float(doc["ope_noise_var"]),
        return_noise_var=float(doc["return_noise_var"]),
        kernel=KernelParams(**doc["kernel"]),
        priors=priors,
    )
