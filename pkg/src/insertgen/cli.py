"""Command line entry point.

Subcommands cover the full experiment loop: gen-data, train, decode, eval,
analyze, bench, verify. Configuration resolves in three layers: built-in
preset, then JSON config file (flat keys mirroring flag names), then explicit
flags; the effective configuration is echoed to the output directory as
config.json. Exit codes: 0 success, 1 usage or input error, 2 property or
verification failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import multiprocessing
import sys
from pathlib import Path

from .analysis import profile_trajectories, write_profile_csv
from .checkpoint import CheckpointError
from .inference import (
    baseline_beam_decode,
    beam_decode,
    bench_decode,
    fitted_loglog_slope,
    greedy_decode,
    mean_slowdown,
    read_decodes,
    write_decodes,
)
from .model import ModelConfig, ModelError, load_model
from .tasks import (
    TASK_KINDS,
    DataError,
    TaskSpec,
    build_vocab,
    corpus_bleu,
    generate_example,
    read_tsv,
    read_vocab,
    sequence_accuracy,
    write_tsv,
    write_vocab,
)
from .trajectories import TrajectoryError
from .training import MODES, TrainConfig, TrainingError, train
from .verification import run_oracle_suite

# Model and optimizer settings per preset. "desk" fits the test suite and a
# laptop; "transformer-base" matches the usual full-scale setup (peak lr
# 1.4e-3 at 16k warmup steps, 4k-token batches, 1e5 pretraining steps).
# base_lr is the schedule scale: peak lr = base_lr / sqrt(warmup_steps).
PRESETS = {
    "desk": {
        "model_dim": 64, "num_heads": 2, "num_encoder_layers": 2,
        "num_decoder_layers": 2, "ffn_dim": 128, "max_len": 32,
        "dropout_rate": 0.0,
        "total_steps": 20000, "pretrain_steps": 2000, "base_lr": 0.06,
        "warmup_steps": 400, "batch_tokens": 160, "clip_norm": 5.0,
        "beam_for_argmax": 4, "eval_every": 250, "checkpoint_every": 0,
        "stop_at_val_accuracy": 0.995, "val_beam": 1, "val_max_examples": 128,
    },
    "transformer-base": {
        "model_dim": 512, "num_heads": 8, "num_encoder_layers": 6,
        "num_decoder_layers": 6, "ffn_dim": 2048, "max_len": 512,
        "dropout_rate": 0.1,
        "total_steps": 200_000, "pretrain_steps": 100_000,
        "base_lr": 1.4e-3 * 16000 ** 0.5, "warmup_steps": 16000,
        "batch_tokens": 4000, "clip_norm": 5.0, "beam_for_argmax": 4,
        "eval_every": 1000, "checkpoint_every": 10_000,
        "stop_at_val_accuracy": 0.0, "val_beam": 4, "val_max_examples": 256,
    },
}

MODEL_KEYS = tuple(f.name for f in dataclasses.fields(ModelConfig) if f.name != "vocab_size")
TRAIN_KEYS = tuple(f.name for f in dataclasses.fields(TrainConfig) if f.name not in ("mode", "seed"))


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; we use 1
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> _Parser:
    p = _Parser(prog="insertgen", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write train/val TSVs and a vocab file")
    g.add_argument("--task", required=True, choices=TASK_KINDS)
    g.add_argument("--n", type=int, default=512, help="training examples")
    g.add_argument("--n-val", type=int, default=128)
    g.add_argument("--vocab-size", type=int, default=20, help="content tokens")
    g.add_argument("--min-len", type=int, default=1)
    g.add_argument("--max-len", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--workers", type=int, default=1)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--data", required=True, help="directory from gen-data")
    t.add_argument("--mode", default="default", choices=MODES)
    t.add_argument("--preset", default="desk", choices=sorted(PRESETS))
    t.add_argument("--config", help="JSON file with flat config keys")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    for key in MODEL_KEYS + TRAIN_KEYS:
        flag = "--" + key.replace("_", "-")
        t.add_argument(flag, type=float, default=None, dest=key)
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("decode", help="decode a TSV's sources with a checkpoint")
    d.add_argument("--ckpt", required=True, help="model directory")
    d.add_argument("--data", required=True, help="TSV with sources")
    d.add_argument("--vocab", help="vocab file; default: vocab.tsv beside --data")
    d.add_argument("--beam", type=int, default=1)
    d.add_argument("--length-norm", default="steps", choices=["steps", "none"])
    d.add_argument("--max-steps", type=int, default=None)
    d.add_argument("--workers", type=int, default=1)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_decode)

    e = sub.add_parser("eval", help="sequence accuracy and BLEU of a decode file")
    e.add_argument("--hyp", required=True, help="file written by decode")
    e.add_argument("--ref", required=True, help="TSV with reference targets")
    e.add_argument("--vocab", help="default: vocab.tsv beside --ref")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="insertion-order profile of a decode file")
    a.add_argument("--decodes", required=True)
    a.add_argument("--vocab", required=True)
    a.add_argument("--out", required=True, help="CSV path for the class/bin histogram")
    a.set_defaults(func=cmd_analyze)

    b = sub.add_parser("bench", help="decode wall-clock vs output length, both models")
    b.add_argument("--ckpt-insertion", required=True)
    b.add_argument("--ckpt-baseline", required=True)
    b.add_argument("--data", help="optional TSV; its target lengths become the bins")
    b.add_argument("--lengths", default="4,8,12,16", help="comma-separated bins")
    b.add_argument("--n-per-length", type=int, default=8)
    b.add_argument("--beam", type=int, default=1)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", help="timing CSV path: length_bin, model, mean_ms, n")
    b.set_defaults(func=cmd_bench)

    v = sub.add_parser("verify", help="run the oracle self-checks")
    v.add_argument("--suite", default="oracles", choices=["oracles"])
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_verify)
    return p


def _write_config(out_dir: Path, cfg: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with (out_dir / "config.json").open("w") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)
        f.write("\n")


# --- gen-data -----------------------------------------------------------------

_GEN = None


def _init_gen(spec: TaskSpec) -> None:
    global _GEN
    _GEN = (spec, build_vocab(spec))


def _gen_one(index: int):
    spec, vocab = _GEN
    return generate_example(spec, vocab, index)


def cmd_gen_data(args) -> int:
    spec = TaskSpec(kind=args.task, vocab_size=args.vocab_size,
                    min_len=args.min_len, max_len=args.max_len, seed=args.seed)
    vocab = build_vocab(spec)
    indices = range(args.n + args.n_val)
    if args.workers > 1:
        with multiprocessing.Pool(args.workers, _init_gen, (spec,)) as pool:
            pairs = pool.map(_gen_one, indices)
    else:
        pairs = [generate_example(spec, vocab, i) for i in indices]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_vocab(out / "vocab.tsv", vocab)
    write_tsv(out / "train.tsv", pairs[: args.n], vocab)
    write_tsv(out / "val.tsv", pairs[args.n:], vocab)
    _write_config(out, {
        "task": args.task, "n": args.n, "n_val": args.n_val,
        "vocab_size": args.vocab_size, "min_len": args.min_len,
        "max_len": args.max_len, "seed": args.seed,
    })
    print(f"wrote {args.n} train / {args.n_val} val examples to {out}")
    return 0


# --- train ----------------------------------------------------------------------

def _resolve_config(args) -> dict:
    cfg = dict(PRESETS[args.preset])
    if args.config:
        with open(args.config) as f:
            overrides = json.load(f)
        unknown = set(overrides) - set(cfg)
        if unknown:
            raise TrainingError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(overrides)
    for key in MODEL_KEYS + TRAIN_KEYS:
        val = getattr(args, key)
        if val is not None:
            cfg[key] = val
    # flags arrive as floats; restore ints where the dataclasses want them
    for key, field in _FIELD_TYPES.items():
        if key in cfg and field is int:
            cfg[key] = int(cfg[key])
    return cfg


_FIELD_TYPES = {f.name: f.type if isinstance(f.type, type) else (int if "int" in str(f.type) else float)
                for f in dataclasses.fields(ModelConfig) + dataclasses.fields(TrainConfig)}


def cmd_train(args) -> int:
    data = Path(args.data)
    vocab = read_vocab(data / "vocab.tsv")
    train_pairs = read_tsv(data / "train.tsv", vocab)
    val_path = data / "val.tsv"
    val_pairs = read_tsv(val_path, vocab) if val_path.exists() else None
    cfg = _resolve_config(args)
    model_cfg = ModelConfig(vocab_size=vocab.size, **{k: cfg[k] for k in MODEL_KEYS})
    train_cfg = TrainConfig(mode=args.mode, seed=args.seed,
                            **{k: cfg[k] for k in TRAIN_KEYS})
    out = Path(args.out)
    _write_config(out, {**cfg, "mode": args.mode, "seed": args.seed,
                        "data": str(data), "preset": args.preset,
                        "vocab_size": vocab.size})
    _, metrics = train(model_cfg, train_cfg, train_pairs, val_pairs, out_dir=out)
    vals = [m for m in metrics if m.get("phase") == "val"]
    summary = {"steps": sum(1 for m in metrics if "loss" in m),
               "final_loss": next(m["loss"] for m in reversed(metrics) if "loss" in m)}
    if vals:
        summary["val_seq_acc"] = vals[-1]["val_seq_acc"]
        summary["val_bleu"] = vals[-1]["val_bleu"]
    print(json.dumps(summary, sort_keys=True))
    return 0


# --- decode ---------------------------------------------------------------------

_DECODER = None


def _init_decode(ckpt: str, beam: int, length_norm: str, max_steps):
    global _DECODER
    cfg, params, kind = load_model(ckpt)
    _DECODER = (cfg, params, kind, beam, length_norm, max_steps)


def _decode_one(src):
    cfg, params, kind, beam, length_norm, max_steps = _DECODER
    if kind == "baseline":
        return baseline_beam_decode(cfg, params, src, beam=beam,
                                    max_steps=max_steps, length_norm=length_norm)
    if beam == 1:
        return greedy_decode(cfg, params, src, max_steps=max_steps,
                             length_norm=length_norm)
    return beam_decode(cfg, params, src, beam=beam, max_steps=max_steps,
                       length_norm=length_norm)


def cmd_decode(args) -> int:
    vocab_path = Path(args.vocab) if args.vocab else Path(args.data).parent / "vocab.tsv"
    vocab = read_vocab(vocab_path)
    pairs = read_tsv(args.data, vocab)
    srcs = [s for s, _ in pairs]
    if args.workers > 1:
        with multiprocessing.Pool(
            args.workers, _init_decode,
            (args.ckpt, args.beam, args.length_norm, args.max_steps),
        ) as pool:
            results = pool.map(_decode_one, srcs)
    else:
        _init_decode(args.ckpt, args.beam, args.length_norm, args.max_steps)
        results = [_decode_one(s) for s in srcs]
    write_decodes(args.out, results, vocab)
    print(f"decoded {len(results)} sequences to {args.out}")
    return 0


def cmd_eval(args) -> int:
    vocab_path = Path(args.vocab) if args.vocab else Path(args.ref).parent / "vocab.tsv"
    vocab = read_vocab(vocab_path)
    hyp_rows = read_decodes(args.hyp, vocab)
    refs = [y for _, y in read_tsv(args.ref, vocab)]
    if len(hyp_rows) != len(refs):
        raise DataError(f"{len(hyp_rows)} hypotheses vs {len(refs)} references")
    hyps = [h for h, _, _ in hyp_rows]
    print(json.dumps({
        "sequence_accuracy": sequence_accuracy(hyps, refs),
        "bleu": corpus_bleu(hyps, refs),
    }, sort_keys=True))
    return 0


def cmd_analyze(args) -> int:
    vocab = read_vocab(args.vocab)
    rows = read_decodes(args.decodes, vocab)
    prof = profile_trajectories([traj for _, traj, _ in rows], vocab)
    write_profile_csv(args.out, prof)
    print(json.dumps({
        "n_trajectories": prof.n_trajectories,
        "directions": dict(sorted(prof.directions.items())),
        "mean_rel_index": {c: prof.mean_rel_index(c) for c in prof.classes()},
    }, sort_keys=True))
    return 0


def cmd_bench(args) -> int:
    ins = load_model(args.ckpt_insertion)
    base = load_model(args.ckpt_baseline)
    if ins[2] != "insertion" or base[2] != "baseline":
        raise ModelError("bench expects an insertion checkpoint and a baseline checkpoint")
    if args.data:
        vocab_path = Path(args.data).parent / "vocab.tsv"
        pairs = read_tsv(args.data, read_vocab(vocab_path))
        lengths = sorted({len(y) for _, y in pairs if y})
    else:
        lengths = [int(x) for x in args.lengths.split(",")]
    rows = bench_decode((ins[0], ins[1]), (base[0], base[1]), lengths,
                        n_per_length=args.n_per_length, beam=args.beam, seed=args.seed)
    if args.out:
        with open(args.out, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["length_bin", "model", "mean_ms", "n"])
            for r in rows:
                w.writerow([r["length_bin"], r["model"], f"{r['mean_ms']:.6f}", r["n"]])
    print(json.dumps({
        "slope_insertion": fitted_loglog_slope(rows, "insertion"),
        "slope_baseline": fitted_loglog_slope(rows, "baseline_l2r"),
        "mean_slowdown": mean_slowdown(rows),
    }, sort_keys=True))
    return 0


def cmd_verify(args) -> int:
    return 0 if run_oracle_suite(args.seed) else 2


USER_ERRORS = (DataError, CheckpointError, ModelError, TrainingError,
               TrajectoryError, OSError, ValueError, json.JSONDecodeError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except USER_ERRORS as e:
        print(f"insertgen: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
