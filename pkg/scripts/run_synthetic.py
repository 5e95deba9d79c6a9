"""Compare FLoRAL against the baselines on the synthetic tasks over several seeds.

    python scripts/run_synthetic.py --family linear --keep 1.0 0.05 --seeds 0 1 2
    python scripts/run_synthetic.py --family mlp --rounds 1000 --methods fedavg floral

Each run writes its metrics file and config under ``--out`` (plus a merged
``summary.csv``); the script then prints the final test MSE per run and the
median over seeds for each method and data regime.
"""
import argparse
import statistics
from collections import defaultdict

from floral import cli

METHODS = ["fedavg", "floral", "ensemble", "local_adaptor", "floral_opt_router",
           "ensemble_opt_router"]


def main():
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("--family", choices=["linear", "mlp"], default="linear")
    p.add_argument("--methods", nargs="+", default=METHODS[:4], choices=METHODS)
    p.add_argument("--keep", nargs="+", type=float, default=[1.0, 0.05])
    p.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    p.add_argument("--rounds", type=int, default=500)
    p.add_argument("--out", default="runs/synthetic")
    p.add_argument("overrides", nargs="*", metavar="key=value")
    args = p.parse_args()

    finals = defaultdict(list)
    for keep in args.keep:
        for seed in args.seeds:
            for method in args.methods:
                cfg = cli.config_from_dict(
                    {"schema_version": cli.SCHEMA_VERSION,
                     "task": {"family": args.family, "seed": seed, "keep_fraction": keep},
                     "method": {"name": method}, "train": {"rounds": args.rounds},
                     "seed": seed}, args.overrides)
                _, row = cli.run_config(cfg, args.out)
                finals[(keep, method)].append(row["final_test_loss"])
                print(f"{row['run']:<40} final test MSE {row['final_test_loss']:.4e}",
                      flush=True)

    print(f"\nmedian final test MSE over seeds {args.seeds}")
    for (keep, method), values in sorted(finals.items()):
        data = "full" if keep == 1 else f"keep={keep:g}"
        print(f"  {data:<10} {method:<22} {statistics.median(values):.4e}")


if __name__ == "__main__":
    main()
