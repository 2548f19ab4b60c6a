"""Selecting the best candidate policy from offline estimates plus a small
online evaluation budget."""

__version__ = "0.1.0"

from .fingerprints import (
    ActionFingerprint,
    ActionKind,
    DistanceMatrix,
    KernelParams,
    ProbeStateSet,
    action_distance,
    distance_matrix,
    kernel_matrix,
    load_fingerprints,
    normalize_fingerprints,
    policy_distance,
    save_fingerprints,
    subsample_probe_states,
)
from .gp import (
    EffectiveObservations,
    GPHyperparams,
    GPPriors,
    Posterior,
    aggregate_observations,
    default_gp_hyperparams,
    fit_map,
    llh_gradient,
    log_marginal_likelihood,
    posterior,
)
from .independent import (
    IndHyperparams,
    IndPosterior,
    default_ind_hyperparams,
    ind_fit_map,
    ind_llh_gradient,
    ind_log_marginal,
    ind_posterior,
)
from .metrics import (
    RegretCurve,
    aggregate_curves,
    cumulative_regret,
    normalize_regret,
    rank_of_selection,
    rescale_returns,
    simple_regret,
    worst_policy_frequency,
)
from .observations import AdamConfig, IGPrior, ObservationLog
from .selection import (
    EpsilonGreedy,
    ExpectedImprovement,
    LoopConfig,
    Trace,
    Ucb,
    Uniform,
    recommend,
    run_selection,
    select_next,
    ucb_scores,
)
from .synthetic import (
    CounterReturnSampler,
    GaussianReturnNoise,
    MixtureReturnNoise,
    SyntheticTask,
    SyntheticTaskConfig,
    make_synthetic_task,
    sample_return,
    subset_task,
    true_values,
)
