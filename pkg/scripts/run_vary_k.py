"""Sweep the candidate-set size by subsampling from one policy pool."""

import argparse

from opselect.harness import ExperimentConfig, vary_k_experiment
from opselect.synthetic import SyntheticTaskConfig


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="results/vary_k")
    parser.add_argument("--pool", type=int, default=200, help="size of the policy pool")
    parser.add_argument("--k", default="25,50,100,200", help="comma-separated subset sizes")
    parser.add_argument("--methods", default="gp-ucb-ope,ind-uniform-noope,ope-only")
    parser.add_argument("--budget", type=int, default=100)
    parser.add_argument("--reps", type=int, default=100)
    parser.add_argument("--seed", type=int, default=1)
    parser.add_argument("--workers", type=int, default=None)
    args = parser.parse_args()

    cfg = ExperimentConfig(
        task=SyntheticTaskConfig(num_policies=args.pool),
        methods=tuple(m.strip() for m in args.methods.split(",")),
        output_dir=args.out,
        budget=args.budget,
        repetitions=args.reps,
        base_seed=args.seed,
        ope_noise_scale=1.0,
        return_noise_scale=2.0,
        workers=args.workers,
    )
    k_values = [int(x) for x in args.k.split(",")]
    results = vary_k_experiment(cfg, k_values)
    for k in k_values:
        for name, curve in sorted(results[k].curves.items()):
            print(f"k={k:<4d} {name:20s} final regret {curve.mean[-1]:.4f} +- {curve.sd_of_mean[-1]:.4f}")


if __name__ == "__main__":
    main()
