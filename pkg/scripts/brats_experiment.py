"""Full-size run on BraTS 2020 with the paper backbone and schedule.

    python scripts/brats_experiment.py --raw MICCAI_BraTS2020_TrainingData \
        --grades name_mapping.csv --out runs/brats --seeds 0

Preprocesses once (``<out>/data``), then trains all six variants with 5-fold
cross-validation. Needs a GPU-sized budget: 100 epochs at batch 32 per fold.
"""

import argparse
import logging
from pathlib import Path

from mprotonet import cli


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--raw", required=True)
    ap.add_argument("--grades", default=None)
    ap.add_argument("--out", default="runs/brats")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--variants", nargs="+", default=list(cli.VARIANTS))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")

    data = Path(args.out) / "data"
    if not (data / "manifest.json").exists():
        grades = cli.read_grade_table(args.grades) if args.grades else None
        cli.prepare_brats(args.raw, data, grades)
    cfg = cli.ExperimentConfig(
        out_dir=args.out, variants=args.variants, seeds=args.seeds, preset="paper", backbone="paper",
        dataset=cli.DataSource(kind="manifest", manifest=str(data / "manifest.json")),
    )
    cfg.save(Path(args.out) / "config.json")
    cli.run_experiment(cfg)


if __name__ == "__main__":
    main()
