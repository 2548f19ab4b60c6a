"""Command line front end.

Subcommands: generate-task, run, vary-k, vary-ope, report.  Experiments are
configured by a YAML file with 'task' and 'experiment' sections (the same
schema the manifest embeds); command line flags override file values.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import yaml

from .harness import (
    config_from_dict,
    read_manifest,
    report,
    run_experiment,
    vary_k_experiment,
    vary_ope_experiment,
)
from .synthetic import make_synthetic_task, save_task


def _load_yaml(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise ValueError(f"config file '{path}' does not exist")
    try:
        doc = yaml.safe_load(p.read_text())
    except yaml.YAMLError as e:
        raise ValueError(f"malformed config file '{path}': {e}") from e
    if not isinstance(doc, dict):
        raise ValueError(f"config file '{path}' must contain a mapping")
    return doc


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip() != ""]
    except ValueError as e:
        raise ValueError(f"expected a comma-separated list of integers, got '{text}'") from e


def _experiment_config(args) -> "ExperimentConfig":
    if getattr(args, "manifest", None):
        cfg = read_manifest(args.manifest)
    else:
        if not args.config:
            raise ValueError("provide --config or --manifest")
        doc = _load_yaml(args.config)
        exp = doc.get("experiment")
        if args.out is not None and isinstance(exp, dict):
            exp.setdefault("output_dir", args.out)
        cfg = config_from_dict(doc)
    overrides = {}
    if args.out is not None:
        overrides["output_dir"] = args.out
    if args.budget is not None:
        overrides["budget"] = args.budget
    if args.reps is not None:
        overrides["repetitions"] = args.reps
    if args.seed is not None:
        overrides["base_seed"] = args.seed
    if args.methods is not None:
        overrides["methods"] = tuple(m.strip() for m in args.methods.split(","))
    if args.workers is not None:
        overrides["workers"] = args.workers
    if getattr(args, "refit_every", None) is not None:
        overrides["refit_every"] = args.refit_every
    return replace(cfg, **overrides) if overrides else cfg


def _add_experiment_flags(p: argparse.ArgumentParser, with_manifest: bool = False):
    p.add_argument("--config", help="YAML config with task/experiment sections")
    if with_manifest:
        p.add_argument("--manifest", help="re-run from a manifest.json instead of a config")
    p.add_argument("--out", help="output directory (overrides config)")
    p.add_argument("--budget", type=int)
    p.add_argument("--reps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--methods", help="comma-separated method names")
    p.add_argument("--workers", type=int)
    p.add_argument("--refit-every", dest="refit_every", type=int)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="opselect")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("generate-task", help="draw a synthetic task and export it")
    p_gen.add_argument("--config", required=True, help="YAML config; only the task section is used")
    p_gen.add_argument("--out", required=True, help="directory for fingerprints.json / values.json")
    p_gen.add_argument("--seed", type=int, help="override the task seed")

    p_run = sub.add_parser("run", help="run a method grid experiment")
    _add_experiment_flags(p_run, with_manifest=True)

    p_k = sub.add_parser("vary-k", help="sweep the number of candidate policies")
    _add_experiment_flags(p_k)
    p_k.add_argument("--k", required=True, help="comma-separated candidate-set sizes")

    p_ope = sub.add_parser("vary-ope", help="sweep offline-estimate coverage")
    _add_experiment_flags(p_ope)
    p_ope.add_argument("--coverage", required=True, help="comma-separated coverage counts")

    p_rep = sub.add_parser("report", help="collate curve CSVs into one table")
    p_rep.add_argument("--dir", required=True, help="experiment output directory")
    p_rep.add_argument("--out", help="path of the combined CSV")

    args = parser.parse_args(argv)
    try:
        if args.command == "generate-task":
            doc = _load_yaml(args.config)
            from .harness import _task_from_dict

            task_cfg = _task_from_dict(doc.get("task", {}))
            if args.seed is not None:
                task_cfg = replace(task_cfg, seed=args.seed)
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            task = make_synthetic_task(task_cfg)
            save_task(task, out / "fingerprints.json", out / "values.json")
            print(f"wrote {out / 'fingerprints.json'} and {out / 'values.json'}")
        elif args.command == "run":
            result = run_experiment(_experiment_config(args))
            print(f"wrote results under {result.output_dir}")
        elif args.command == "vary-k":
            cfg = _experiment_config(args)
            vary_k_experiment(cfg, _int_list(args.k))
            print(f"wrote results under {cfg.output_dir}")
        elif args.command == "vary-ope":
            cfg = _experiment_config(args)
            vary_ope_experiment(cfg, _int_list(args.coverage))
            print(f"wrote results under {cfg.output_dir}")
        elif args.command == "report":
            out = report(args.dir, args.out)
            print(f"wrote {out}")
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
