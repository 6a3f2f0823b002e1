#!/usr/bin/env python3
"""End-to-end desk-scale experiment.

Synthesises a small rainy dataset, searches the micro and macro
architecture, trains the derived branches, fine-tunes the fusion attention,
and prints before/after fidelity.  Takes a few minutes on a laptop CPU.
"""

import argparse
import sys
import time
from pathlib import Path

from tmics import config, trainer
from tmics.cli import main as tmics_main
from tmics.data import load_paired_root
from tmics.evaluate import evaluate_pairs, report_table


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--workdir", default="runs/toy", help="where data and checkpoints go")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--skip-search", action="store_true",
                        help="train the shipped light genotype instead of searching")
    args = parser.parse_args()

    work = Path(args.workdir)
    data_root = work / "data"
    started = time.time()

    print("== synthesising toy dataset ==")
    if tmics_main(["synth", "--out", str(data_root), "--seed", str(args.seed),
                   "--preset", "toy"]) != 0:
        return 1

    cfg = config.toy_config()
    pairs = load_paired_root(data_root)

    if args.skip_search:
        spec_args = []
    else:
        print("== searching architecture (20 toy epochs) ==")
        if tmics_main(["search", "--data", str(data_root), "--out", str(work / "search"),
                       "--preset", "toy", "--seed", str(args.seed)]) != 0:
            return 1
        if tmics_main(["export-arch", "--ckpt", str(work / "search"),
                       "--out", str(work / "genotype.txt")]) != 0:
            return 1
        spec_args = ["--ckpt", str(work / "search")]

    print("== training derived branches (300 toy steps) ==")
    train_cmd = ["train", "--data", str(data_root), "--out", str(work / "stage1"),
                 "--preset", "toy", "--seed", str(args.seed)] + spec_args
    if tmics_main(train_cmd) != 0:
        return 1

    print("== fine-tuning the fusion attention ==")
    if tmics_main(["finetune", "--data", str(data_root), "--ckpt", str(work / "stage1"),
                   "--out", str(work / "stage2"), "--preset", "toy"]) != 0:
        return 1

    print("== evaluating ==")
    model, mcfg, _ = trainer.load_model(work / "stage2")
    report = evaluate_pairs(model, pairs, mcfg.data.frames)
    print(report_table(report))
    print(f"\ntotal wall time: {time.time() - started:.0f}s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
