"""Experiment harness: grids of selection methods over synthetic tasks.

Every repetition derives its task, subset and loop seeds from
(base_seed, repetition, purpose) so that runs are exactly reproducible and
all methods within a repetition face the same task and the same return
draws.  Results land in an output directory as per-trace CSVs, per-method
aggregated curve CSVs and a manifest that is sufficient to reproduce the
run byte for byte.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .fingerprints import ActionKind, KernelParams
from .metrics import (
    RegretCurve,
    aggregate_curves,
    normalize_regret,
    simple_regret,
    write_curve_csv,
)
from .observations import AdamConfig
from .selection import LoopConfig, Trace, parse_strategy, run_selection, write_trace_csv
from .synthetic import (
    CounterReturnSampler,
    GaussianReturnNoise,
    MixtureReturnNoise,
    SyntheticTask,
    SyntheticTaskConfig,
    make_synthetic_task,
    subset_task,
)

__all__ = [
    "MethodSpec",
    "parse_method",
    "ExperimentConfig",
    "ExperimentResult",
    "run_experiment",
    "run_ope_only",
    "vary_k_experiment",
    "vary_ope_experiment",
    "report",
    "config_to_dict",
    "config_from_dict",
    "write_manifest",
    "read_manifest",
    "WORKERS_ENV_VAR",
]

WORKERS_ENV_VAR = "OPSELECT_WORKERS"

# purpose tags for deriving per-repetition seeds
_TASK_DOMAIN = 11
_SUBSET_DOMAIN = 22
_COVERAGE_DOMAIN = 33
_LOOP_DOMAIN = 44

_MODELS = ("gp", "ind")
_STRATEGIES = ("ucb", "uniform", "epsilon-greedy", "ei")


def _derive_seed(*entropy: int) -> int:
    return int(np.random.SeedSequence(list(entropy)).generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class MethodSpec:
    """One cell of the method grid, e.g. 'gp-ucb-ope' or 'ind-uniform-noope'."""

    name: str
    model: str = ""
    strategy: str = ""
    use_ope: bool = False

    @property
    def is_ope_only(self) -> bool:
        return self.name == "ope-only"


def parse_method(name: str) -> MethodSpec:
    if name == "ope-only":
        return MethodSpec(name=name)
    parts = name.split("-")
    if len(parts) >= 3:
        model, ope_tag = parts[0], parts[-1]
        strategy = "-".join(parts[1:-1])
        if model in _MODELS and strategy in _STRATEGIES and ope_tag in ("ope", "noope"):
            return MethodSpec(name=name, model=model, strategy=strategy, use_ope=ope_tag == "ope")
    raise ValueError(
        f"unknown method '{name}': expected 'ope-only' or "
        f"model-strategy-ope|noope with model in {_MODELS} and strategy in {_STRATEGIES}"
    )


@dataclass(frozen=True)
class ExperimentConfig:
    task: SyntheticTaskConfig
    methods: tuple[str, ...]
    output_dir: str
    budget: int = 100
    repetitions: int = 100
    base_seed: int = 1
    refit_every: int = 1
    beta_sqrt: float = 5.0
    epsilon: float = 0.1
    n_init: int | None = None
    subsample_k: int | None = None
    ope_subset: int | None = None
    ope_noise_scale: float | None = None
    return_noise_scale: float | None = None
    adam: AdamConfig = AdamConfig()
    workers: int | None = None

    def __post_init__(self):
        if not self.methods:
            raise ValueError("methods must not be empty")
        if len(set(self.methods)) != len(self.methods):
            raise ValueError("duplicate method names")
        for m in self.methods:
            parse_method(m)
        if self.budget < 1:
            raise ValueError("budget must be >= 1")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.refit_every < 1:
            raise ValueError("refit_every must be >= 1")
        if self.subsample_k is not None and not 1 <= self.subsample_k <= self.task.num_policies:
            raise ValueError("subsample_k must be in [1, task.num_policies]")
        if self.ope_subset is not None:
            limit = self.subsample_k if self.subsample_k is not None else self.task.num_policies
            if not 1 <= self.ope_subset <= limit:
                raise ValueError("ope_subset must be in [1, number of candidate policies]")
        for name in ("ope_noise_scale", "return_noise_scale"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass(frozen=True)
class ExperimentResult:
    output_dir: Path
    curves: dict[str, RegretCurve]


def run_ope_only(task: SyntheticTask, coverage: np.ndarray | None = None) -> int:
    """Recommendation from the offline estimates alone (no execution budget).

    ``coverage`` optionally restricts which policies have an estimate.
    Ties break to the lowest index.
    """
    ope = np.asarray(task.ope, dtype=float)
    mask = np.ones(ope.size, dtype=bool) if coverage is None else np.asarray(coverage, dtype=bool)
    mask = mask & np.isfinite(ope)
    if not mask.any():
        raise ValueError("ope-only selection needs at least one offline estimate")
    return int(np.argmax(np.where(mask, ope, -np.inf)))


def _rep_task(cfg: ExperimentConfig, rep: int):
    """Build the repetition's task (and optional subset / coverage mask).

    Relative noise scales are resolved in two passes: draw the task, measure
    the spread of its true values, then redraw with the same seed and the
    resolved absolute noise levels.  The value draw itself only depends on
    the seed and geometry, so it is unchanged by the second pass.
    """
    task_cfg = replace(cfg.task, seed=_derive_seed(cfg.base_seed, rep, _TASK_DOMAIN))
    task = make_synthetic_task(task_cfg)
    if cfg.ope_noise_scale is not None or cfg.return_noise_scale is not None:
        sd = float(task.values.std())
        if cfg.ope_noise_scale is not None:
            task_cfg = replace(task_cfg, ope_noise_sd=cfg.ope_noise_scale * sd)
        if cfg.return_noise_scale is not None:
            task_cfg = replace(
                task_cfg, return_noise=replace(task_cfg.return_noise, sigma=cfg.return_noise_scale * sd)
            )
        task = make_synthetic_task(task_cfg)

    pool_values = task.values.copy()
    if cfg.subsample_k is not None:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.base_seed, rep, _SUBSET_DOMAIN]))
        idx = np.sort(rng.choice(task.num_policies, size=cfg.subsample_k, replace=False))
        task = subset_task(task, idx)

    coverage = None
    if cfg.ope_subset is not None:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.base_seed, rep, _COVERAGE_DOMAIN]))
        chosen = rng.choice(task.num_policies, size=cfg.ope_subset, replace=False)
        coverage = np.zeros(task.num_policies, dtype=bool)
        coverage[chosen] = True
    return task, pool_values, coverage


def _run_repetition(cfg: ExperimentConfig, rep: int, out: Path) -> dict[str, np.ndarray]:
    """All methods on one repetition; returns per-method normalized regret
    per step and writes the trace CSVs."""
    task, pool_values, coverage = _rep_task(cfg, rep)
    loop_seed = _derive_seed(cfg.base_seed, rep, _LOOP_DOMAIN)
    ope_vec = task.ope.copy()
    if coverage is not None:
        ope_vec = np.where(coverage, ope_vec, np.nan)

    out_regrets: dict[str, np.ndarray] = {}
    for name in cfg.methods:
        spec = parse_method(name)
        if spec.is_ope_only:
            rec = run_ope_only(task, coverage)
            regret = normalize_regret(simple_regret(task.values, rec), pool_values)
            out_regrets[name] = np.full(cfg.budget, regret)
            continue
        env = CounterReturnSampler(task)
        loop_cfg = LoopConfig(
            budget=cfg.budget,
            use_ope=spec.use_ope,
            model=spec.model,
            strategy=parse_strategy(spec.strategy, cfg.beta_sqrt, cfg.epsilon),
            n_init=cfg.n_init,
            refit_every=cfg.refit_every,
            seed=loop_seed,
            adam=cfg.adam,
        )
        trace = run_selection(
            env, task.fingerprints, ope_vec if spec.use_ope else None, loop_cfg,
            distances=task.distances,
        )
        if trace.aborted:
            raise RuntimeError(f"environment sampling failed in rep {rep}, method {name}")
        write_trace_csv(out / "traces" / name / f"rep{rep:04d}.csv", trace)
        out_regrets[name] = np.array([
            normalize_regret(simple_regret(task.values, int(r)), pool_values)
            for r in trace.recommended
        ])
    return out_regrets


def _worker(args) -> dict[str, np.ndarray]:
    cfg, rep, out = args
    return _run_repetition(cfg, rep, Path(out))


def _resolve_workers(cfg: ExperimentConfig) -> int:
    if cfg.workers is not None:
        return max(1, cfg.workers)
    env = os.environ.get(WORKERS_ENV_VAR)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValueError(f"{WORKERS_ENV_VAR} must be an integer, got '{env}'")
    return 1


def _prepare_output_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    try:
        (out / "curves").mkdir(parents=True, exist_ok=True)
        for name in cfg.methods:
            if not parse_method(name).is_ope_only:
                (out / "traces" / name).mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        raise ValueError(f"output_dir '{cfg.output_dir}' is not writable: {e}") from e
    return out


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """Run the whole grid and write traces, curves and the manifest."""
    out = _prepare_output_dir(cfg)
    write_manifest(out / "manifest.json", cfg)

    workers = _resolve_workers(cfg)
    jobs = [(cfg, rep, str(out)) for rep in range(cfg.repetitions)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_rep = list(pool.map(_worker, jobs))
    else:
        per_rep = [_worker(j) for j in jobs]

    curves: dict[str, RegretCurve] = {}
    for name in cfg.methods:
        curve = aggregate_curves([r[name] for r in per_rep])
        write_curve_csv(out / "curves" / f"{name}.csv", curve)
        curves[name] = curve
    return ExperimentResult(output_dir=out, curves=curves)


def vary_k_experiment(cfg: ExperimentConfig, k_values: list[int]) -> dict[int, ExperimentResult]:
    """Repeat the experiment with different candidate-set sizes subsampled
    from the same policy pool, then write a combined summary CSV."""
    if cfg.subsample_k is not None:
        raise ValueError("set subsample sizes via k_values, not cfg.subsample_k")
    if not k_values:
        raise ValueError("k_values must not be empty")
    for k in k_values:
        if not 1 <= k <= cfg.task.num_policies:
            raise ValueError(f"k={k} outside [1, pool size {cfg.task.num_policies}]")
    root = Path(cfg.output_dir)
    results: dict[int, ExperimentResult] = {}
    for k in k_values:
        sub = replace(cfg, subsample_k=k, output_dir=str(root / f"k{k}"))
        results[k] = run_experiment(sub)
    _write_sweep_summary(root / "vary_k.csv", "k", {k: r.curves for k, r in results.items()})
    return results


def vary_ope_experiment(
    cfg: ExperimentConfig, coverage_counts: list[int]
) -> dict[int, ExperimentResult]:
    """Repeat the experiment with offline estimates available only for a
    random subset of policies of each given size."""
    if cfg.ope_subset is not None:
        raise ValueError("set coverage sizes via coverage_counts, not cfg.ope_subset")
    if not coverage_counts:
        raise ValueError("coverage_counts must not be empty")
    limit = cfg.subsample_k if cfg.subsample_k is not None else cfg.task.num_policies
    for c in coverage_counts:
        if not 1 <= c <= limit:
            raise ValueError(f"coverage {c} outside [1, {limit}]")
    root = Path(cfg.output_dir)
    results: dict[int, ExperimentResult] = {}
    for c in coverage_counts:
        sub = replace(cfg, ope_subset=c, output_dir=str(root / f"ope{c}"))
        results[c] = run_experiment(sub)
    _write_sweep_summary(
        root / "vary_ope.csv", "num_ope", {c: r.curves for c, r in results.items()}
    )
    return results


def _write_sweep_summary(path: Path, key_name: str, per_cell: dict[int, dict[str, RegretCurve]]):
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([key_name, "method", "step", "mean_regret", "sd_of_mean", "n_reps"])
        for key in sorted(per_cell):
            for method in sorted(per_cell[key]):
                curve = per_cell[key][method]
                for i in range(curve.num_steps):
                    w.writerow([
                        key, method, i + 1,
                        repr(float(curve.mean[i])), repr(float(curve.sd_of_mean[i])),
                        curve.n_reps,
                    ])


def report(root_dir: str | Path, out_path: str | Path | None = None) -> Path:
    """Collate every curve CSV under ``root_dir`` into one long table."""
    import csv

    from .metrics import read_curve_csv

    root = Path(root_dir)
    curve_files = sorted(root.glob("**/curves/*.csv"))
    if not curve_files:
        raise ValueError(f"no curve files found under {root}")
    out_path = Path(out_path) if out_path is not None else root / "report.csv"
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["experiment", "method", "step", "mean_regret", "sd_of_mean", "n_reps"])
        for f in curve_files:
            cell = str(f.parent.parent.relative_to(root))
            curve = read_curve_csv(f)
            for i in range(curve.num_steps):
                w.writerow([
                    cell, f.stem, i + 1,
                    repr(float(curve.mean[i])), repr(float(curve.sd_of_mean[i])),
                    curve.n_reps,
                ])
    return out_path


# ---------------------------------------------------------------------------
# config serialization (manifest + yaml config share this schema)


def _noise_to_dict(noise) -> dict:
    if isinstance(noise, GaussianReturnNoise):
        return {"kind": "gaussian", "sigma": noise.sigma}
    return {"kind": "mixture", "zero_prob": noise.zero_prob, "sigma": noise.sigma}


def _noise_from_dict(d: dict):
    if not isinstance(d, dict) or "kind" not in d:
        raise ValueError("return_noise must be a mapping with a 'kind' field")
    kind = d["kind"]
    extra = set(d) - {"kind", "sigma", "zero_prob"}
    if extra:
        raise ValueError(f"unknown return_noise fields: {sorted(extra)}")
    if kind == "gaussian":
        return GaussianReturnNoise(sigma=float(d.get("sigma", 1.0)))
    if kind == "mixture":
        return MixtureReturnNoise(
            zero_prob=float(d.get("zero_prob", 0.5)), sigma=float(d.get("sigma", 1.0))
        )
    raise ValueError(f"unknown return_noise kind '{kind}'")


def _task_to_dict(t: SyntheticTaskConfig) -> dict:
    return {
        "num_policies": t.num_policies,
        "num_families": t.num_families,
        "num_probe_states": t.num_probe_states,
        "action_dim": t.action_dim,
        "action_kind": t.action_kind.value,
        "true_kernel": {
            "variance": t.true_kernel.variance,
            "constant_variance": t.true_kernel.constant_variance,
            "length_scale": t.true_kernel.length_scale,
        },
        "return_noise": _noise_to_dict(t.return_noise),
        "ope_noise_sd": t.ope_noise_sd,
        "ope_bias": t.ope_bias,
        "misspecified": t.misspecified,
        "seed": t.seed,
    }


def _task_from_dict(d: dict) -> SyntheticTaskConfig:
    if not isinstance(d, dict):
        raise ValueError("task config must be a mapping")
    defaults = SyntheticTaskConfig()
    known = set(_task_to_dict(defaults))
    extra = set(d) - known
    if extra:
        raise ValueError(f"unknown task config fields: {sorted(extra)}")
    kernel = d.get("true_kernel", {})
    if not isinstance(kernel, dict):
        raise ValueError("true_kernel must be a mapping")
    bad = set(kernel) - {"variance", "constant_variance", "length_scale"}
    if bad:
        raise ValueError(f"unknown true_kernel fields: {sorted(bad)}")
    return SyntheticTaskConfig(
        num_policies=int(d.get("num_policies", defaults.num_policies)),
        num_families=int(d.get("num_families", defaults.num_families)),
        num_probe_states=int(d.get("num_probe_states", defaults.num_probe_states)),
        action_dim=int(d.get("action_dim", defaults.action_dim)),
        action_kind=ActionKind(d.get("action_kind", defaults.action_kind.value)),
        true_kernel=KernelParams(
            variance=float(kernel.get("variance", defaults.true_kernel.variance)),
            constant_variance=float(
                kernel.get("constant_variance", defaults.true_kernel.constant_variance)
            ),
            length_scale=float(kernel.get("length_scale", defaults.true_kernel.length_scale)),
        ),
        return_noise=(
            _noise_from_dict(d["return_noise"])
            if "return_noise" in d
            else defaults.return_noise
        ),
        ope_noise_sd=float(d.get("ope_noise_sd", defaults.ope_noise_sd)),
        ope_bias=float(d.get("ope_bias", defaults.ope_bias)),
        misspecified=bool(d.get("misspecified", defaults.misspecified)),
        seed=int(d.get("seed", defaults.seed)),
    )


def config_to_dict(cfg: ExperimentConfig) -> dict:
    # workers is a runtime knob (like the env var), deliberately not recorded
    return {
        "task": _task_to_dict(cfg.task),
        "experiment": {
            "methods": list(cfg.methods),
            "output_dir": cfg.output_dir,
            "budget": cfg.budget,
            "repetitions": cfg.repetitions,
            "base_seed": cfg.base_seed,
            "refit_every": cfg.refit_every,
            "beta_sqrt": cfg.beta_sqrt,
            "epsilon": cfg.epsilon,
            "n_init": cfg.n_init,
            "subsample_k": cfg.subsample_k,
            "ope_subset": cfg.ope_subset,
            "ope_noise_scale": cfg.ope_noise_scale,
            "return_noise_scale": cfg.return_noise_scale,
            "adam": {
                "learning_rate": cfg.adam.learning_rate,
                "beta1": cfg.adam.beta1,
                "beta2": cfg.adam.beta2,
                "steps": cfg.adam.steps,
                "epsilon": cfg.adam.epsilon,
            },
        },
    }


def config_from_dict(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ValueError("config must be a mapping with 'task' and 'experiment' sections")
    extra = set(doc) - {"task", "experiment"}
    if extra:
        raise ValueError(f"unknown top-level config sections: {sorted(extra)}")
    exp = doc.get("experiment")
    if not isinstance(exp, dict):
        raise ValueError("config is missing the 'experiment' section")
    known = {
        "methods", "output_dir", "budget", "repetitions", "base_seed", "refit_every",
        "beta_sqrt", "epsilon", "n_init", "subsample_k", "ope_subset",
        "ope_noise_scale", "return_noise_scale", "adam", "workers",
    }
    bad = set(exp) - known
    if bad:
        raise ValueError(f"unknown experiment config fields: {sorted(bad)}")
    if "methods" not in exp:
        raise ValueError("experiment config is missing 'methods'")
    if "output_dir" not in exp:
        raise ValueError("experiment config is missing 'output_dir'")
    adam_doc = exp.get("adam", {})
    if not isinstance(adam_doc, dict):
        raise ValueError("experiment.adam must be a mapping")
    bad = set(adam_doc) - {"learning_rate", "beta1", "beta2", "steps", "epsilon"}
    if bad:
        raise ValueError(f"unknown adam config fields: {sorted(bad)}")
    defaults_adam = AdamConfig()
    adam = AdamConfig(
        learning_rate=float(adam_doc.get("learning_rate", defaults_adam.learning_rate)),
        beta1=float(adam_doc.get("beta1", defaults_adam.beta1)),
        beta2=float(adam_doc.get("beta2", defaults_adam.beta2)),
        steps=int(adam_doc.get("steps", defaults_adam.steps)),
        epsilon=float(adam_doc.get("epsilon", defaults_adam.epsilon)),
    )

    def opt_int(name):
        v = exp.get(name)
        return None if v is None else int(v)

    def opt_float(name):
        v = exp.get(name)
        return None if v is None else float(v)

    return ExperimentConfig(
        task=_task_from_dict(doc.get("task", {})),
        methods=tuple(exp["methods"]),
        output_dir=str(exp["output_dir"]),
        budget=int(exp.get("budget", 100)),
        repetitions=int(exp.get("repetitions", 100)),
        base_seed=int(exp.get("base_seed", 1)),
        refit_every=int(exp.get("refit_every", 1)),
        beta_sqrt=float(exp.get("beta_sqrt", 5.0)),
        epsilon=float(exp.get("epsilon", 0.1)),
        n_init=opt_int("n_init"),
        subsample_k=opt_int("subsample_k"),
        ope_subset=opt_int("ope_subset"),
        ope_noise_scale=opt_float("ope_noise_scale"),
        return_noise_scale=opt_float("return_noise_scale"),
        adam=adam,
        workers=opt_int("workers"),
    )


def write_manifest(path: str | Path, cfg: ExperimentConfig) -> None:
    doc = {
        "package": "opselect",
        "version": __version__,
        "numpy": np.__version__,
        "config": config_to_dict(cfg),
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))


def read_manifest(path: str | Path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"malformed manifest {path}: {e}") from e
    if "config" not in doc:
        raise ValueError(f"manifest {path}: missing field 'config'")
    return config_from_dict(doc["config"])
