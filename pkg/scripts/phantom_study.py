"""Repeat the desk-scale phantom studies over several seeds and tabulate Dice.

    python -m scripts.phantom_study --seeds 0 1 2 --out runs/study
"""

import argparse
from pathlib import Path

import pandas as pd

from quicknat.core.logging import configure_logging, get_logger
from quicknat.db.storage import atomic_write_text
from quicknat.services.experiment_service import StudyConfig, compare_training_strategies, compare_view_aggregation

logger = get_logger("quicknat.scripts.phantom_study")


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--grid", type=int, default=32)
    parser.add_argument("--classes", type=int, default=6)
    parser.add_argument("--skip-views", action="store_true", help="only compare training strategies")
    parser.add_argument("--out", type=Path, default=Path("runs/study"))
    args = parser.parse_args()
    configure_logging()

    rows = []
    for seed in args.seeds:
        config = StudyConfig(seed=seed, grid_size=args.grid, num_classes=args.classes)
        strategies = compare_training_strategies(config, out_dir=args.out / f"strategies_seed{seed}")
        rows += [{"study": "strategies", "seed": seed, "model": k, "dice": v} for k, v in strategies.dice.items()]
        if not args.skip_views:
            views = compare_view_aggregation(config)
            rows += [{"study": "views", "seed": seed, "model": k, "dice": v} for k, v in views.dice.items()]

    frame = pd.DataFrame(rows)
    args.out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(args.out / "dice.csv", frame.to_csv(index=False))
    table = frame.groupby(["study", "model"])["dice"].agg(["mean", "std", "count"]).reset_index()
    print(table.to_string(index=False))
    logger.info("[study] wrote %s", args.out / "dice.csv")


if __name__ == "__main__":
    main()
