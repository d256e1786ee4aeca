"""Desk-scale comparison of all six variants on the synthetic cohort.

    python scripts/desk_experiment.py --out runs/desk --seeds 0 1 2

Each (seed, variant) is cached under ``<out>/seed<s>/<variant>``; rerunning
resumes from what is already there. Expect roughly 40 min per variant and seed
on one CPU core.
"""

import argparse
import logging

from mprotonet import cli


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=None, help="start from this config JSON")
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--variants", nargs="+", default=list(cli.VARIANTS))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")

    if args.config:
        cfg = cli.ExperimentConfig.load(args.config)
        cfg.out_dir, cfg.seeds, cfg.variants = args.out, args.seeds, args.variants
    else:
        cfg = cli.ExperimentConfig(out_dir=args.out, variants=args.variants, seeds=args.seeds, preset="desk")
    cfg.save(f"{args.out}/config.json")
    report = cli.run_experiment(cfg)
    for run in report["runs"]:
        for name, s in run["models"].items():
            cells = "  ".join(f"{m} {cli.format_cell(s.get(m)) or 'n/a'}" for m in cli.METRICS)
            print(f"seed {run['seed']}  {name:12s} {cells}")
        for name, p in run.get("p_values", {}).items():
            print(f"seed {run['seed']}  {name} vs {run['reference']}: " + "  ".join(f"p_{m} {v:.3g}" for m, v in p.items()))


if __name__ == "__main__":
    main()
