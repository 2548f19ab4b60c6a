import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from opselect.independent import (
    IndHyperparams,
    default_ind_hyperparams,
    ind_fit_map,
    ind_llh_gradient,
    ind_log_marginal,
    ind_posterior,
    load_ind_hyperparams,
    save_ind_hyperparams,
)
from opselect.observations import AdamConfig, ObservationLog

from oracles import central_difference, sequential_scalar_posterior


def _random_log(rng, k, p_ope=0.7, max_returns=4, ensure_observed=True):
    log = ObservationLog(k)
    for i in range(k):
        if rng.random() < p_ope:
            log.set_ope(i, float(rng.normal()))
        for _ in range(int(rng.integers(0, max_returns + 1))):
            log.add_return(i, float(rng.normal()))
    if ensure_observed and log.total_observations() == 0:
        log.set_ope(0, 0.0)
    return log


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100_000))
def test_posterior_matches_sequential_updates(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 8))
    log = _random_log(rng, k)
    ope_vars = rng.uniform(0.1, 5.0, size=k)
    ret_vars = rng.uniform(0.1, 5.0, size=k)
    h = IndHyperparams(ope_vars, ret_vars)
    post = ind_posterior(log, h)
    for i in range(k):
        want = sequential_scalar_posterior(log.ope(i), ope_vars[i], log.returns(i), ret_vars[i])
        if want[0] is None:
            assert not post.defined[i]
            assert np.isnan(post.mean[i]) and np.isnan(post.variance[i])
        else:
            assert post.defined[i]
            assert post.mean[i] == pytest.approx(want[0], abs=1e-12)
            assert post.variance[i] == pytest.approx(want[1], abs=1e-12)


def test_posterior_flat_prior_limit():
    log = ObservationLog(1)
    for r in (2.0, 4.0, 9.0):
        log.add_return(0, r)
    h = IndHyperparams(np.array([123.0]), np.array([1.5]))
    post = ind_posterior(log, h)
    assert post.mean[0] == pytest.approx(5.0)
    assert post.variance[0] == pytest.approx(0.5)


def test_posterior_requires_matching_sizes():
    log = ObservationLog(3)
    log.set_ope(0, 1.0)
    with pytest.raises(ValueError, match="policies"):
        ind_posterior(log, default_ind_hyperparams(2))
    with pytest.raises(ValueError, match="no policy"):
        ind_posterior(ObservationLog(2), default_ind_hyperparams(2))


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    for _ in range(8):
        k = int(rng.integers(1, 6))
        log = _random_log(rng, k)
        stats = log.stats()
        ope_vars = rng.uniform(0.2, 3.0, size=k)
        ret_vars = rng.uniform(0.2, 3.0, size=k)
        h = IndHyperparams(ope_vars, ret_vars)
        grad = ind_llh_gradient(log, h)
        for i in np.flatnonzero(stats.observed):
            x = np.log([ope_vars[i], ret_vars[i]])

            def value(t, i=i):
                o, r = ope_vars.copy(), ret_vars.copy()
                o[i] = np.exp(t[0])
                r[i] = np.exp(t[1])
                return ind_log_marginal(log, IndHyperparams(o, r))

            fd = central_difference(value, x, eps=1e-6)
            assert np.all(np.abs(grad[i] - fd) <= 1e-4 * np.maximum(1.0, np.abs(fd)))
        for i in np.flatnonzero(~stats.observed):
            assert np.all(grad[i] == 0.0)


def test_marginal_of_lone_estimate_is_prior_only():
    # a single offline estimate with no returns pins the value exactly; the
    # data terms cancel and only the variance priors remain
    log = ObservationLog(1)
    log.set_ope(0, 3.7)
    h = IndHyperparams(np.array([2.0]), np.array([5.0]))
    want = h.ope_prior.log_density(2.0) + h.return_prior.log_density(5.0)
    assert ind_log_marginal(log, h) == pytest.approx(want, abs=1e-12)


def test_fit_improves_and_is_deterministic():
    rng = np.random.default_rng(8)
    log = _random_log(rng, 6, max_returns=6)
    h0 = default_ind_hyperparams(6)
    before = ind_log_marginal(log, h0)
    h1 = ind_fit_map(log, h0, AdamConfig(steps=300))
    after = ind_log_marginal(log, h1)
    assert after >= before
    h2 = ind_fit_map(log, h0, AdamConfig(steps=300))
    assert np.array_equal(h1.ope_noise_var, h2.ope_noise_var)
    assert np.array_equal(h1.return_noise_var, h2.return_noise_var)


def test_fit_leaves_unobserved_policies_alone():
    log = ObservationLog(3)
    log.set_ope(1, 0.5)
    log.add_return(1, 1.0)
    h0 = IndHyperparams(np.array([7.0, 7.0, 7.0]), np.array([9.0, 9.0, 9.0]))
    h1 = ind_fit_map(log, h0, AdamConfig(steps=50))
    # untouched rows survive the log-space roundtrip, nothing more
    for k in (0, 2):
        assert h1.ope_noise_var[k] == pytest.approx(7.0, rel=1e-14)
        assert h1.return_noise_var[k] == pytest.approx(9.0, rel=1e-14)
    assert abs(h1.ope_noise_var[1] - 7.0) > 1e-6 or abs(h1.return_noise_var[1] - 9.0) > 1e-6


def test_hyperparams_validation():
    with pytest.raises(ValueError, match="same length"):
        IndHyperparams(np.ones(2), np.ones(3))
    with pytest.raises(ValueError, match="positive"):
        IndHyperparams(np.zeros(2), np.ones(2))


def test_save_load_roundtrip(tmp_path):
    h = IndHyperparams(np.array([1.0, 2.0]), np.array([3.0, 4.0]))
    path = tmp_path / "ind.json"
    save_ind_hyperparams(path, h)
    back = load_ind_hyperparams(path)
    assert np.array_equal(back.ope_noise_var, h.ope_noise_var)
    assert np.array_equal(back.return_noise_var, h.return_noise_var)
    assert back.ope_prior == h.ope_prior
