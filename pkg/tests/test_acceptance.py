"""Acceptance gate.

Ten checks, each printing one verdict line (run with -s, or trust the
assertion messages). The exact-math checks (1-5, 10) take seconds; the
benchmark checks (6-9) rerun the full experiment grids and dominate the
runtime (hours, mostly the 200-candidate cell of check 9).
"""

import json
import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import yaml

from opselect import cli
from opselect._fastmath import JITTER_REL
from opselect.fingerprints import (
    ActionFingerprint,
    ActionKind,
    KernelParams,
    distance_matrix,
    kernel_matrix,
    stabilize,
)
from opselect.gp import (
    GPHyperparams,
    GPPriors,
    aggregate_observations,
    llh_gradient,
    log_marginal_likelihood,
    posterior,
)
from opselect.harness import ExperimentConfig, _rep_task, run_experiment, vary_k_experiment
from opselect.independent import (
    IndHyperparams,
    ind_llh_gradient,
    ind_log_marginal,
    ind_posterior,
)
from opselect.metrics import worst_policy_frequency
from opselect.observations import ObservationLog
from opselect.selection import read_trace_csv
from opselect.synthetic import SyntheticTaskConfig

from oracles import (
    central_difference,
    dense_joint_posterior,
    mc_log_marginal,
    scalar_marginal_ope_only,
    sequential_scalar_posterior,
)


def _verdict(capsys, num, label, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {num:2d} ({label}): {'PASS' if ok else 'FAIL'} [{detail}]")
    assert ok, f"criterion {num} ({label}): {detail}"


# ---------------------------------------------------------------------------
# random instance helpers for the exact-math checks


def _fps(rng, k, states=6, dim=2):
    return [ActionFingerprint(i, rng.normal(size=(states, dim))) for i in range(k)]


def _hypers(rng, priors=None):
    return GPHyperparams(
        mean=float(rng.uniform(-1, 1)),
        ope_noise_var=float(rng.uniform(0.3, 3.0)),
        return_noise_var=float(rng.uniform(0.5, 4.0)),
        kernel=KernelParams(
            float(rng.uniform(0.5, 2.0)),
            float(rng.uniform(0.1, 1.0)),
            float(rng.uniform(0.3, 3.0)),
        ),
        priors=priors,
    )


def _random_log(rng, k):
    log = ObservationLog(k)
    total = 0
    for i in range(k):
        if rng.random() < 0.6:
            log.set_ope(i, float(rng.normal()))
            total += 1
        for _ in range(int(rng.poisson(1.5))):
            log.add_return(i, float(rng.normal()))
            total += 1
    if total == 0:
        log.add_return(0, float(rng.normal()))
    return log


# ---------------------------------------------------------------------------
# 1-5: exact math against independent oracles


def test_posterior_matches_dense_conditioning_oracle(capsys):
    rng = np.random.default_rng(101)
    sizes = [1, 2, 3, 5, 8] * 40
    worst = 0.0
    start = time.perf_counter()
    for k in sizes:
        d = distance_matrix(_fps(rng, k))
        h = _hypers(rng)
        log = _random_log(rng, k)
        cov = stabilize(kernel_matrix(d, h.kernel))
        post = posterior(cov, aggregate_observations(log, h), h.mean)
        mean, want_cov = dense_joint_posterior(
            h.mean,
            cov,
            [log.ope(i) for i in range(k)],
            h.ope_noise_var,
            [log.returns(i) for i in range(k)],
            h.return_noise_var,
            noise_jitter=1e-8 * np.trace(cov) / k,
        )
        worst = max(worst, np.abs(post.mean - mean).max(), np.abs(post.cov - want_cov).max())
    elapsed = time.perf_counter() - start
    ok = worst < 1e-8 and elapsed < 10.0
    _verdict(
        capsys, 1, "posterior oracle", ok,
        f"200 instances, max abs err {worst:.2e} (tol 1e-8), {elapsed:.1f}s (limit 10s)",
    )


def test_independent_posterior_matches_sequential_updates(capsys):
    rng = np.random.default_rng(202)
    worst = 0.0
    for _ in range(1000):
        k = int(rng.integers(1, 11))
        log = _random_log(rng, k)
        h = IndHyperparams(rng.uniform(0.3, 3.0, size=k), rng.uniform(0.5, 4.0, size=k))
        post = ind_posterior(log, h)
        for i in range(k):
            mean, var = sequential_scalar_posterior(
                log.ope(i), h.ope_noise_var[i], log.returns(i), h.return_noise_var[i]
            )
            if mean is None:
                assert not post.defined[i]
                continue
            assert post.defined[i]
            worst = max(worst, abs(post.mean[i] - mean), abs(post.variance[i] - var))
    ok = worst < 1e-12
    _verdict(
        capsys, 2, "independent conjugacy", ok,
        f"1000 instances, max abs err {worst:.2e} (tol 1e-12)",
    )


def test_gradients_match_central_differences(capsys):
    rng = np.random.default_rng(303)
    worst_gp = 0.0
    for trial in range(20):
        k = int(rng.integers(2, 9))
        d = distance_matrix(_fps(rng, k))
        priors = GPPriors.default() if trial % 2 == 0 else None
        h = _hypers(rng, priors)
        log = _random_log(rng, k)
        grad = llh_gradient(log, h, d)
        theta0 = np.array([
            h.mean,
            math.log(h.ope_noise_var),
            math.log(h.return_noise_var),
            math.log(h.kernel.variance),
            math.log(h.kernel.constant_variance),
            math.log(h.kernel.length_scale),
        ])

        def fn(vec):
            hh = GPHyperparams(
                mean=float(vec[0]),
                ope_noise_var=math.exp(vec[1]),
                return_noise_var=math.exp(vec[2]),
                kernel=KernelParams(math.exp(vec[3]), math.exp(vec[4]), math.exp(vec[5])),
                priors=priors,
            )
            return log_marginal_likelihood(log, hh, d)

        fd = central_difference(fn, theta0)
        worst_gp = max(worst_gp, float(np.max(np.abs(grad - fd) / np.maximum(1.0, np.abs(fd)))))

    worst_ind = 0.0
    for _ in range(20):
        k = int(rng.integers(1, 9))
        log = _random_log(rng, k)
        h = IndHyperparams(rng.uniform(0.3, 3.0, size=k), rng.uniform(0.5, 4.0, size=k))
        grad = ind_llh_gradient(log, h)
        for i in range(k):
            if not log.stats().observed[i]:
                assert grad[i, 0] == grad[i, 1] == 0.0
                continue

            def fn_i(vec):
                ov, rv = h.ope_noise_var.copy(), h.return_noise_var.copy()
                ov[i], rv[i] = math.exp(vec[0]), math.exp(vec[1])
                return ind_log_marginal(log, IndHyperparams(ov, rv, h.ope_prior, h.return_prior))

            theta_i = np.array([math.log(h.ope_noise_var[i]), math.log(h.return_noise_var[i])])
            fd = central_difference(fn_i, theta_i)
            worst_ind = max(worst_ind, float(np.max(np.abs(grad[i] - fd) / np.maximum(1.0, np.abs(fd)))))

    ok = worst_gp < 1e-4 and worst_ind < 1e-4
    _verdict(
        capsys, 3, "gradient check", ok,
        f"20+20 instances, worst rel err gp {worst_gp:.2e} ind {worst_ind:.2e} (tol 1e-4)",
    )


def test_kernel_matrices_are_positive_semidefinite(capsys):
    rng = np.random.default_rng(404)
    worst_ratio = -np.inf
    for trial in range(100):
        k = int(rng.integers(2, 65))
        states = int(rng.integers(3, 13))
        dim = int(rng.integers(1, 5))
        kind = ActionKind.CONTINUOUS if trial % 2 == 0 else ActionKind.DISCRETE
        if kind is ActionKind.CONTINUOUS:
            fps = [ActionFingerprint(i, rng.normal(size=(states, dim)), kind) for i in range(k)]
        else:
            fps = [
                ActionFingerprint(i, rng.integers(0, 5, size=(states, dim)).astype(float), kind)
                for i in range(k)
            ]
        params = KernelParams(
            float(rng.uniform(0.1, 5.0)),
            float(rng.uniform(0.01, 2.0)),
            float(rng.uniform(0.05, 20.0)),
        )
        mat = kernel_matrix(distance_matrix(fps), params)
        ratio = float(np.linalg.eigvalsh(mat).min() / np.trace(mat))
        worst_ratio = max(worst_ratio, -ratio)
    ok = worst_ratio <= 1e-8
    _verdict(
        capsys, 4, "kernel PSD", ok,
        f"100 fingerprint sets, worst -mineig/trace {worst_ratio:.2e} (tol 1e-8)",
    )


def test_log_marginal_against_scalar_and_monte_carlo_oracles(capsys):
    rng = np.random.default_rng(505)
    worst_scalar = 0.0
    for _ in range(25):
        h = _hypers(rng)
        log = ObservationLog(1)
        log.set_ope(0, float(rng.normal()))
        got = log_marginal_likelihood(log, h, np.zeros((1, 1)))
        want = scalar_marginal_ope_only(
            h.mean, log.ope(0), h.ope_noise_var,
            h.kernel.variance, h.kernel.constant_variance,
        )
        worst_scalar = max(worst_scalar, abs(got - want))

    worst_sigmas = 0.0
    for seed in (1, 2, 3):
        irng = np.random.default_rng(600 + seed)
        h = _hypers(irng)
        d = distance_matrix(_fps(irng, 2))
        log = _random_log(irng, 2)
        jit = JITTER_REL * (h.kernel.variance + h.kernel.constant_variance)
        prior_cov = kernel_matrix(d, h.kernel) + jit * np.eye(2)
        est, se = mc_log_marginal(
            h.mean, prior_cov,
            [log.ope(i) for i in range(2)], h.ope_noise_var,
            [log.returns(i) for i in range(2)], h.return_noise_var,
            n_samples=1_000_000, seed=700 + seed,
        )
        n_total = log.stats().has_ope.sum() + log.stats().count.sum()
        got = log_marginal_likelihood(log, h, d)
        full = got - 0.5 * n_total * math.log(2.0 * math.pi)
        worst_sigmas = max(worst_sigmas, abs(full - est) / se)

    ok = worst_scalar < 1e-8 and worst_sigmas < 3.0
    _verdict(
        capsys, 5, "marginal likelihood oracles", ok,
        f"scalar err {worst_scalar:.2e} (tol 1e-8); monte-carlo off by {worst_sigmas:.2f} se (limit 3)",
    )


# ---------------------------------------------------------------------------
# 6-9: benchmark orderings (heavy fixtures)

BENCH = dict(
    budget=100,
    repetitions=100,
    base_seed=1,
    beta_sqrt=5.0,
    ope_noise_scale=1.0,
    return_noise_scale=2.0,
)


@pytest.fixture(scope="module")
def bench_trio(tmp_path_factory):
    cfg = ExperimentConfig(
        task=SyntheticTaskConfig(num_policies=50),
        methods=("gp-ucb-ope", "ind-uniform-noope", "ope-only"),
        output_dir=str(tmp_path_factory.mktemp("bench_trio")),
        **BENCH,
    )
    start = time.perf_counter()
    result = run_experiment(cfg)
    return cfg, result, time.perf_counter() - start


@pytest.fixture(scope="module")
def bench_rest(tmp_path_factory):
    cfg = ExperimentConfig(
        task=SyntheticTaskConfig(num_policies=50),
        methods=(
            "gp-uniform-ope", "gp-ucb-noope", "gp-uniform-noope",
            "ind-ucb-ope", "ind-ucb-noope", "ind-uniform-ope",
        ),
        output_dir=str(tmp_path_factory.mktemp("bench_rest")),
        **BENCH,
    )
    return cfg, run_experiment(cfg)


def _margin(curves, better, worse, idx=-1):
    diff = float(curves[worse].mean[idx] - curves[better].mean[idx])
    comb = float(np.hypot(curves[better].sd_of_mean[idx], curves[worse].sd_of_mean[idx]))
    return diff, comb


def test_benchmark_beats_both_baselines(bench_trio, capsys):
    cfg, result, wall = bench_trio
    curves = result.curves
    d_ind, s_ind = _margin(curves, "gp-ucb-ope", "ind-uniform-noope")
    d_ope, s_ope = _margin(curves, "gp-ucb-ope", "ope-only")
    ok = d_ind > 2.0 * s_ind and d_ope > 2.0 * s_ope
    detail = (
        f"final regret gp {curves['gp-ucb-ope'].mean[-1]:.4f} "
        f"ind+uniform {curves['ind-uniform-noope'].mean[-1]:.4f} "
        f"ope-only {curves['ope-only'].mean[-1]:.4f}; "
        f"margins {d_ind / s_ind:.1f}x / {d_ope / s_ope:.1f}x combined sd (need 2x); "
        f"runtime {wall / 60:.1f} min (target 10, not asserted)"
    )
    _verdict(capsys, 6, "benchmark regret", ok, detail)


def test_ablation_orderings(bench_trio, bench_rest, capsys):
    curves = dict(bench_trio[1].curves)
    curves.update(bench_rest[1].curves)
    d_uni, s_uni = _margin(curves, "gp-ucb-ope", "gp-uniform-ope")
    d_ind, s_ind = _margin(curves, "gp-ucb-ope", "ind-ucb-ope")
    pairs = {}
    for stem in ("gp-ucb", "gp-uniform", "ind-ucb", "ind-uniform"):
        diff, _ = _margin(curves, f"{stem}-ope", f"{stem}-noope", idx=49)
        pairs[stem] = diff
    ok = d_uni > s_uni and d_ind > s_ind and all(v > 0 for v in pairs.values())
    detail = (
        f"vs gp-uniform-ope {d_uni / s_uni:.1f}x, vs ind-ucb-ope {d_ind / s_ind:.1f}x "
        f"combined sd (need 1x); step-50 warm-start gains "
        + " ".join(f"{k} {v:+.3f}" for k, v in pairs.items())
    )
    _verdict(capsys, 7, "ablation ordering", ok, detail)


def test_worst_policy_avoidance(bench_trio, capsys):
    cfg, result, _ = bench_trio
    rates = {}
    for name in ("gp-ucb-ope", "ind-uniform-noope"):
        per_rep = []
        for rep in range(cfg.repetitions):
            task, _, _ = _rep_task(cfg, rep)
            trace = read_trace_csv(
                Path(cfg.output_dir) / "traces" / name / f"rep{rep:04d}.csv"
            )
            per_rep.append(worst_policy_frequency(task.values, trace.executed, quantile=0.1))
        rates[name] = float(np.mean(per_rep))
    gp, ind = rates["gp-ucb-ope"], rates["ind-uniform-noope"]
    ok = gp < 0.5 * ind
    _verdict(
        capsys, 8, "worst-policy rate", ok,
        f"bottom-10% execution rate gp {gp:.4f} vs ind+uniform {ind:.4f} (need < half)",
    )


@pytest.fixture(scope="module")
def vary_k(tmp_path_factory):
    cfg = ExperimentConfig(
        task=SyntheticTaskConfig(num_policies=200),
        methods=("gp-ucb-ope", "ind-uniform-noope"),
        output_dir=str(tmp_path_factory.mktemp("vary_k")),
        **BENCH,
    )
    return vary_k_experiment(cfg, [25, 200])


def test_scaling_with_candidate_count(vary_k, capsys):
    deg = {}
    for name in ("gp-ucb-ope", "ind-uniform-noope"):
        deg[name] = float(vary_k[200].curves[name].mean[-1] - vary_k[25].curves[name].mean[-1])
    ok = deg["gp-ucb-ope"] < deg["ind-uniform-noope"]
    _verdict(
        capsys, 9, "candidate-count scaling", ok,
        f"25->200 regret change gp {deg['gp-ucb-ope']:+.4f} vs "
        f"ind+uniform {deg['ind-uniform-noope']:+.4f} (need strictly smaller)",
    )


# ---------------------------------------------------------------------------
# 10: byte-identical reruns


def test_manifest_rerun_is_byte_identical(tmp_path, capsys):
    doc = {
        "task": {"num_policies": 8, "num_families": 2, "num_probe_states": 50},
        "experiment": {
            "methods": ["gp-ucb-ope", "ind-uniform-noope", "ope-only"],
            "output_dir": str(tmp_path / "a"),
            "budget": 5,
            "repetitions": 2,
            "ope_noise_scale": 1.0,
            "return_noise_scale": 2.0,
        },
    }
    cfg_path = tmp_path / "cfg.yaml"
    cfg_path.write_text(yaml.safe_dump(doc))
    assert cli.main(["run", "--config", str(cfg_path)]) == 0
    assert cli.main([
        "run", "--manifest", str(tmp_path / "a" / "manifest.json"),
        "--out", str(tmp_path / "b"),
    ]) == 0
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").glob("**/*.csv"))
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").glob("**/*.csv"))
    same_layout = files_a == files_b and len(files_a) > 0
    identical = same_layout and all(
        (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files_a
    )
    _verdict(
        capsys, 10, "byte-identical rerun", identical,
        f"{len(files_a)} csv files compared",
    )
