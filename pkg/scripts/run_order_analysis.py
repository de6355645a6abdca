"""Decode a validation set and profile which token classes get inserted when.

Prints the direction counts and per-class mean relative insertion index, and
writes the class/bin histogram CSV next to the decodes.

Usage:
    python3 scripts/run_order_analysis.py --ckpt runs/seed0/default \
        --data runs/seed0/data --out runs/seed0/order
"""

import argparse
import sys
from pathlib import Path

from insertgen.cli import main as cli


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--ckpt", required=True)
    ap.add_argument("--data", required=True, help="directory from gen-data")
    ap.add_argument("--split", default="val.tsv")
    ap.add_argument("--beam", type=int, default=1)
    ap.add_argument("--out", required=True)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = Path(args.data)
    decodes = out / "decodes.tsv"
    for step in (
        ["decode", "--ckpt", args.ckpt, "--data", str(data / args.split),
         "--beam", str(args.beam), "--out", str(decodes)],
        ["analyze", "--decodes", str(decodes),
         "--vocab", str(data / "vocab.tsv"), "--out", str(out / "profile.csv")],
    ):
        code = cli(step)
        if code != 0:
            sys.exit(f"step failed ({code}): {' '.join(step)}")


if __name__ == "__main__":
    main()
