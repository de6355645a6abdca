"""Train several objective modes on one task across seeds and compare BLEU.

For each seed the same generated dataset is shared by every mode, so the
comparison isolates the training objective. Writes one summary JSON with
per-run scores and per-mode means.

Usage:
    python3 scripts/run_ablation.py --out runs/ablation --task branching \
        --modes default,only_pretrain_uniform,baseline_l2r --seeds 0,1,2 \
        --config configs/small.json
"""

import argparse
import json
import sys
from pathlib import Path

from insertgen.cli import main as cli


def run(argv) -> None:
    code = cli(argv)
    if code != 0:
        sys.exit(f"step failed ({code}): {' '.join(argv)}")


def capture_eval(hyp: str, ref: str) -> dict:
    import contextlib
    import io

    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        run(["eval", "--hyp", hyp, "--ref", ref])
    return json.loads(buf.getvalue().strip().splitlines()[-1])


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--task", default="branching")
    ap.add_argument("--modes", default="default,only_pretrain_uniform,baseline_l2r")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--n", type=int, default=2048)
    ap.add_argument("--n-val", type=int, default=128)
    ap.add_argument("--vocab-size", type=int, default=12)
    ap.add_argument("--min-len", type=int, default=2)
    ap.add_argument("--max-len", type=int, default=8)
    ap.add_argument("--preset", default="desk")
    ap.add_argument("--config", help="JSON overrides applied to every run")
    ap.add_argument("--beam", type=int, default=4)
    args = ap.parse_args()

    out = Path(args.out)
    modes = args.modes.split(",")
    seeds = [int(s) for s in args.seeds.split(",")]
    runs = []
    for seed in seeds:
        data = out / f"seed{seed}" / "data"
        run(["gen-data", "--task", args.task, "--n", str(args.n),
             "--n-val", str(args.n_val), "--vocab-size", str(args.vocab_size),
             "--min-len", str(args.min_len), "--max-len", str(args.max_len),
             "--seed", str(seed), "--out", str(data)])
        for mode in modes:
            mdir = out / f"seed{seed}" / mode
            train_args = ["train", "--data", str(data), "--mode", mode,
                          "--preset", args.preset, "--seed", str(seed),
                          "--out", str(mdir)]
            if args.config:
                train_args += ["--config", args.config]
            run(train_args)
            hyp = mdir / "val_decodes.tsv"
            run(["decode", "--ckpt", str(mdir), "--data", str(data / "val.tsv"),
                 "--beam", str(args.beam), "--out", str(hyp)])
            scores = capture_eval(str(hyp), str(data / "val.tsv"))
            runs.append({"seed": seed, "mode": mode, **scores})
            print(f"seed {seed} {mode}: bleu {scores['bleu']:.2f} "
                  f"acc {scores['sequence_accuracy']:.3f}")

    means = {m: sum(r["bleu"] for r in runs if r["mode"] == m) / len(seeds)
             for m in modes}
    report = {"runs": runs, "mean_bleu": means}
    out.mkdir(parents=True, exist_ok=True)
    with (out / "summary.json").open("w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    print(json.dumps(means, sort_keys=True))


if __name__ == "__main__":
    main()
