#!/usr/bin/env python3
"""Generate the desk-scale paired rainy/clean dataset used by the toy runs."""

import argparse
import sys

from tmics.cli import main as tmics_main


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="data/toy", help="dataset root to create")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    return tmics_main(["synth", "--out", args.out, "--seed", str(args.seed),
                       "--preset", "toy"])


if __name__ == "__main__":
    sys.exit(main())
