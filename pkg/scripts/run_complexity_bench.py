"""Time forced-length decoding against output length for both model shapes.

Weights do not affect the work done per step (lengths are forced), so the
checkpoints are randomly initialized at a configurable width. Writes the
timing CSV and prints the fitted log-log slopes.

Usage:
    python3 scripts/run_complexity_bench.py --out runs/bench \
        --lengths 4,8,16,32 --model-dim 128
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from insertgen.cli import main as cli
from insertgen.model import ModelConfig, init_params, save_model


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--lengths", default="4,8,16,32")
    ap.add_argument("--n-per-length", type=int, default=8)
    ap.add_argument("--model-dim", type=int, default=128)
    ap.add_argument("--num-heads", type=int, default=4)
    ap.add_argument("--layers", type=int, default=2, help="encoder and decoder depth")
    ap.add_argument("--beam", type=int, default=1)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    max_len = max(int(x) for x in args.lengths.split(",")) + 8
    cfg = ModelConfig(vocab_size=20 + 4, model_dim=args.model_dim,
                      num_heads=args.num_heads,
                      num_encoder_layers=args.layers,
                      num_decoder_layers=args.layers,
                      ffn_dim=2 * args.model_dim, max_len=max_len)
    out = Path(args.out)
    rng = np.random.default_rng(args.seed)
    for kind in ("insertion", "baseline"):
        save_model(out / kind, cfg, init_params(cfg, rng, kind=kind), kind)

    step = ["bench", "--ckpt-insertion", str(out / "insertion"),
            "--ckpt-baseline", str(out / "baseline"),
            "--lengths", args.lengths, "--n-per-length", str(args.n_per_length),
            "--beam", str(args.beam), "--seed", str(args.seed),
            "--out", str(out / "bench.csv")]
    code = cli(step)
    if code != 0:
        sys.exit(f"bench failed ({code})")


if __name__ == "__main__":
    main()
