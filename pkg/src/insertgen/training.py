"""Training loop, trajectory sources, and the Adam optimizer.

A training step samples a batch of (source, target) pairs by target-token
budget, picks one trajectory per pair according to the mode's current
phase, and minimizes the summed per-step loss

    -log sum of p(event) over every event that keeps the partial a
    subsequence of the target (Eos alone once the partial equals it),

averaged over the batch. The trajectory only chooses which partials get
visited; the loss at each partial always covers the full correct set.

Trajectory sources:
  uniform   order drawn uniformly from the |y|! valid orders
  l2r       left to right
  model     sampled stepwise from the model's own renormalized correct-event
            distribution; each sampling forward also serves as that step's
            loss term, so rollout and loss share one pass
  argmax    best trajectory found by beam search over correct insertions
  baseline  no trajectory; left-to-right causal factorization loss

Modes map (phase, step) to a source; pretraining covers steps 1 through
pretrain_steps, the main phase the rest.

Every trajectory for y has exactly len(y)+1 events, so a batch sorted by
target length keeps the still-live examples a prefix whose partials all
share one length at every round. The step loss exploits that: one batched
decoder forward per round instead of one per example per round. The
per-example functions below are the reference the batched path is tested
against.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .inference import baseline_beam_decode, beam_decode, greedy_decode
from .model import (
    InsertionScorer,
    ModelConfig,
    baseline_log_prob,
    encode,
    encode_batch,
    event_flat_index,
    init_params,
    insertion_log_grid,
    insertion_log_grid_batch,
    leaves,
    save_model,
)
from .tasks import corpus_bleu, sequence_accuracy
from .trajectories import (
    EOS,
    DegenerateModelError,
    TokenSeq,
    Trajectory,
    apply_insertion,
    correct_insertions,
    event_key,
    left_to_right_trajectory,
    sample_trajectory_uniform,
)

MODES = (
    "default",
    "argmax",
    "pretrain_l2r_then_default",
    "no_pretrain",
    "only_pretrain_uniform",
    "only_pretrain_l2r",
    "baseline_l2r",
)

SOURCES = ("uniform", "l2r", "model", "argmax", "baseline")


class TrainingError(Exception):
    pass


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "default"
    total_steps: int = 2000
    pretrain_steps: int = 500
    base_lr: float = 0.02
    warmup_steps: int = 400
    batch_tokens: int = 80  # target tokens (incl. the Eos step) per batch
    clip_norm: float = 5.0
    beam_for_argmax: int = 4
    seed: int = 0
    eval_every: int = 0  # 0 disables periodic validation
    checkpoint_every: int = 0  # 0 keeps only the final checkpoint
    stop_at_val_accuracy: float = 0.0  # 0 disables early stopping
    val_beam: int = 1
    val_max_examples: int = 64

    def __post_init__(self):
        if self.mode not in MODES:
            raise TrainingError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.total_steps < 1 or self.pretrain_steps < 0:
            raise TrainingError("step counts must be positive")
        if self.base_lr <= 0 or self.warmup_steps < 1:
            raise TrainingError("base_lr must be > 0 and warmup_steps >= 1")
        if self.batch_tokens < 1:
            raise TrainingError("batch_tokens must be >= 1")


def phase_and_source(cfg: TrainConfig, step: int) -> tuple[str, str]:
    """Which phase a 1-based step belongs to and where its trajectories come from."""
    pre = step <= cfg.pretrain_steps
    if cfg.mode == "baseline_l2r":
        return "main", "baseline"
    if cfg.mode == "only_pretrain_uniform":
        return "pretrain", "uniform"
    if cfg.mode == "only_pretrain_l2r":
        return "pretrain", "l2r"
    if cfg.mode == "no_pretrain":
        return "main", "model"
    if cfg.mode == "default":
        return ("pretrain", "uniform") if pre else ("main", "model")
    if cfg.mode == "argmax":
        return ("pretrain", "uniform") if pre else ("main", "argmax")
    if cfg.mode == "pretrain_l2r_then_default":
        return ("pretrain", "l2r") if pre else ("main", "model")
    raise TrainingError(f"unhandled mode {cfg.mode!r}")


def schedule_lr(base_lr: float, warmup_steps: int, step: int) -> float:
    """Inverse-sqrt schedule with linear warmup; step is 1-based."""
    if step < 1:
        raise TrainingError("lr schedule is defined for steps >= 1")
    return base_lr * min(step ** -0.5, step * warmup_steps ** -1.5)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(a) for k, a in params.items()},
            v={k: np.zeros_like(a) for k, a in params.items()},
        )


def adam_update(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                state: AdamState, lr: float) -> None:
    """One bias-corrected Adam step, in place."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        mhat = state.m[name] / c1
        vhat = state.v[name] / c2
        params[name] = p - lr * mhat / (np.sqrt(vhat) + state.eps)


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads.values()))


def clip_gradients(grads: dict[str, np.ndarray], clip_norm: float) -> float:
    """Scale all gradients so the global norm is at most clip_norm; in place."""
    norm = global_grad_norm(grads)
    if clip_norm > 0 and norm > clip_norm:
        s = clip_norm / norm
        for name in grads:
            grads[name] = grads[name] * s
    return norm


# --- per-example losses -------------------------------------------------------

def _step_term(p, cfg: ModelConfig, memory, y: TokenSeq, partial: TokenSeq):
    """Tape'd -free loss term for one partial: (term, grid values, events).

    term = logsumexp of the correct events' log-probabilities; grid values
    and the event list (event-key order, matching the gather indices) come
    back so callers can sample the next event without a second forward.
    """
    grid = insertion_log_grid(p, cfg, memory, partial)
    flat = ad.reshape(grid, (-1,))
    events = sorted(correct_insertions(y, partial), key=event_key)
    idx = np.array([event_flat_index(ev, len(partial), cfg.vocab_size) for ev in events],
                   dtype=np.intp)
    picked = ad.take(flat, idx)
    return ad.logsumexp_all(picked), flat.data[idx], events


def trajectory_loss(p, cfg: ModelConfig, src: TokenSeq, y: TokenSeq,
                    trajectory: Trajectory) -> Tensor:
    """Loss along a fixed trajectory's partial sequence (Eos step included)."""
    memory = encode(p, cfg, src)
    total = None
    partial: TokenSeq = ()
    for ev in trajectory:
        term, _, _ = _step_term(p, cfg, memory, y, partial)
        total = term if total is None else total + term
        partial = apply_insertion(partial, ev)
    if partial != tuple(y):
        raise TrainingError("trajectory does not produce the target")
    return -total


def sampled_trajectory_loss(p, cfg: ModelConfig, src: TokenSeq, y: TokenSeq,
                            rng: np.random.Generator) -> tuple[Tensor, Trajectory]:
    """Rollout under the model's renormalized correct-event distribution.

    Each step's forward is used twice: its logsumexp term joins the loss and
    its raw grid values drive the sampling of the next event.
    """
    memory = encode(p, cfg, src)
    total = None
    partial: TokenSeq = ()
    events = []
    while True:
        term, vals, correct = _step_term(p, cfg, memory, y, partial)
        total = term if total is None else total + term
        probs = np.exp(vals)
        mass = probs.sum()
        if not (mass > 0.0) or not np.isfinite(mass):
            raise DegenerateModelError(src, partial)
        ev = correct[int(rng.choice(len(correct), p=probs / mass))]
        events.append(ev)
        if ev == EOS:
            return -total, tuple(events)
        partial = apply_insertion(partial, ev)


def argmax_trajectory(cfg: ModelConfig, params: dict[str, np.ndarray],
                      src: TokenSeq, y: TokenSeq, beam: int = 4) -> Trajectory:
    """Approximate highest-probability trajectory, by beam search restricted
    to correct insertions. Every complete trajectory has |y|+1 events, so raw
    log-probabilities compare directly. Hypotheses reaching the same partial
    merge, keeping the better path."""
    if beam < 1:
        raise TrainingError("beam must be >= 1")
    scorer = InsertionScorer(cfg, params, src)
    y = tuple(y)
    hyps: dict[TokenSeq, tuple[float, tuple]] = {(): (0.0, ())}
    for _ in range(len(y)):
        expanded: dict[TokenSeq, tuple[float, tuple]] = {}
        for partial, (logp, events) in hyps.items():
            grid = scorer.log_grid(partial).reshape(-1)
            for ev in sorted(correct_insertions(y, partial), key=event_key):
                if ev == EOS:
                    continue
                cand_logp = logp + float(grid[event_flat_index(ev, len(partial), cfg.vocab_size)])
                nxt = apply_insertion(partial, ev)
                cand = (cand_logp, events + (ev,))
                old = expanded.get(nxt)
                if old is None or _better(cand, old):
                    expanded[nxt] = cand
        ranked = sorted(expanded.items(), key=lambda kv: _rank(kv[1]))
        hyps = dict(ranked[:beam])
    _, events = hyps[y]  # after |y| rounds every surviving partial equals y
    return events + (EOS,)


def _rank(cand: tuple[float, tuple]):
    logp, events = cand
    return (-logp, tuple(event_key(e) for e in events))


def _better(a: tuple[float, tuple], b: tuple[float, tuple]) -> bool:
    return _rank(a) < _rank(b)


def example_loss(p, cfg: ModelConfig, params: dict[str, np.ndarray],
                 src: TokenSeq, y: TokenSeq, source: str,
                 rng: np.random.Generator, beam: int = 4) -> tuple[Tensor, Trajectory | None]:
    """Loss Tensor for one pair under the given trajectory source.

    p must hold leaves of a recording tape over params. Returns the
    trajectory that defined the partial sequence (None for the baseline).
    """
    y = tuple(y)
    if source == "uniform":
        traj = sample_trajectory_uniform(y, rng)
        return trajectory_loss(p, cfg, src, y, traj), traj
    if source == "l2r":
        traj = left_to_right_trajectory(y)
        return trajectory_loss(p, cfg, src, y, traj), traj
    if source == "model":
        return sampled_trajectory_loss(p, cfg, src, y, rng)
    if source == "argmax":
        traj = argmax_trajectory(cfg, params, src, y, beam=beam)
        return trajectory_loss(p, cfg, src, y, traj), traj
    if source == "baseline":
        return -baseline_log_prob(p, cfg, src, y), None
    raise TrainingError(f"unknown trajectory source {source!r}")


# --- batched loss ---------------------------------------------------------------

def _prefix_rows(x: Tensor, k: int) -> Tensor:
    """First k rows of a (b, m, d) tensor, gathered tape-side."""
    b, m, d = x.shape
    if k == b:
        return x
    rows = ad.take(ad.reshape(x, (b * m * d,)), np.arange(k * m * d, dtype=np.intp))
    return ad.reshape(rows, (k, m, d))


def batch_loss(p, cfg: ModelConfig, params: dict[str, np.ndarray], batch,
               source: str, rng: np.random.Generator, beam: int = 4) -> Tensor:
    """Mean loss over a batch on one tape, forwarded round by round.

    Matches the mean of example_loss over the batch (same trajectories, same
    rng draws in sorted order) while batching each round's decoder forwards.
    The baseline source has no rounds and keeps its per-example forwards.
    """
    if not batch:
        raise TrainingError("empty batch")
    if source == "baseline":
        total = None
        for src, y in batch:
            loss = -baseline_log_prob(p, cfg, src, tuple(y))
            total = loss if total is None else total + loss
        return ad.scale(total, 1.0 / len(batch))
    if source not in SOURCES:
        raise TrainingError(f"unknown trajectory source {source!r}")
    ordered = sorted(((src, tuple(y)) for src, y in batch), key=lambda sy: -len(sy[1]))
    fixed = None
    if source == "uniform":
        fixed = [sample_trajectory_uniform(y, rng) for _, y in ordered]
    elif source == "l2r":
        fixed = [left_to_right_trajectory(y) for _, y in ordered]
    elif source == "argmax":
        fixed = [argmax_trajectory(cfg, params, src, y, beam=beam) for src, y in ordered]
    memory, bias = encode_batch(p, cfg, [src for src, _ in ordered])
    partials: list[TokenSeq] = [() for _ in ordered]
    total = None
    live = len(ordered)
    plen = 0
    while live:
        grids = insertion_log_grid_batch(
            p, cfg, _prefix_rows(memory, live), bias[:live], partials[:live]
        )
        flat = ad.reshape(grids, (grids.size,))
        stride = (plen + 1) * cfg.vocab_size
        for b in range(live):
            y = ordered[b][1]
            events = sorted(correct_insertions(y, partials[b]), key=event_key)
            idx = np.array(
                [b * stride + event_flat_index(ev, plen, cfg.vocab_size) for ev in events],
                dtype=np.intp,
            )
            picked = ad.take(flat, idx)
            term = ad.logsumexp_all(picked)
            total = term if total is None else total + term
            if fixed is not None:
                ev = fixed[b][plen]
            else:
                probs = np.exp(picked.data)
                mass = probs.sum()
                if not (mass > 0.0) or not np.isfinite(mass):
                    raise DegenerateModelError(ordered[b][0], partials[b])
                ev = events[int(rng.choice(len(events), p=probs / mass))]
            if ev != EOS:
                partials[b] = apply_insertion(partials[b], ev)
        plen += 1
        while live and len(ordered[live - 1][1]) < plen:
            live -= 1
    return ad.scale(total, -1.0 / len(ordered))


# --- the loop ------------------------------------------------------------------

def _draw_batch(pairs, rng: np.random.Generator, batch_tokens: int):
    batch = []
    budget = 0
    while budget < batch_tokens:
        src, y = pairs[int(rng.integers(0, len(pairs)))]
        batch.append((src, y))
        budget += len(y) + 1
    return batch


def _validate(model_cfg, params, kind, pairs, beam, limit):
    pairs = pairs[:limit]
    outs = []
    for src, _ in pairs:
        if kind == "baseline":
            r = baseline_beam_decode(model_cfg, params, src, beam=beam)
        elif beam == 1:
            r = greedy_decode(model_cfg, params, src)
        else:
            r = beam_decode(model_cfg, params, src, beam=beam)
        outs.append(r.output)
    refs = [y for _, y in pairs]
    return sequence_accuracy(outs, refs), corpus_bleu(outs, refs)


def train(
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    train_pairs: list[tuple[TokenSeq, TokenSeq]],
    val_pairs: list[tuple[TokenSeq, TokenSeq]] | None = None,
    out_dir=None,
    params: dict[str, np.ndarray] | None = None,
) -> tuple[dict[str, np.ndarray], list[dict]]:
    """Run one training job; returns (params, metrics rows).

    Deterministic in (configs, data, seed): all randomness flows from three
    generators spawned off cfg.seed, and metrics contain no wall-clock. When
    out_dir is given, metrics.jsonl and the final model land there.
    """
    if not train_pairs:
        raise TrainingError("no training pairs")
    kind = "baseline" if cfg.mode == "baseline_l2r" else "insertion"
    init_ss, order_ss, sample_ss = np.random.SeedSequence(cfg.seed).spawn(3)
    if params is None:
        params = init_params(model_cfg, np.random.default_rng(init_ss), kind=kind)
    order_rng = np.random.default_rng(order_ss)
    sample_rng = np.random.default_rng(sample_ss)
    adam = AdamState.for_params(params)
    metrics: list[dict] = []
    out = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        metrics_file = (out / "metrics.jsonl").open("w")

    def emit(row: dict):
        metrics.append(row)
        if out is not None:
            metrics_file.write(json.dumps(row) + "\n")

    stopped = False
    for step in range(1, cfg.total_steps + 1):
        phase, source = phase_and_source(cfg, step)
        batch = _draw_batch(train_pairs, order_rng, cfg.batch_tokens)
        tape = Tape()
        p = leaves(tape, params)
        mean_loss = batch_loss(p, model_cfg, params, batch, source,
                               sample_rng, beam=cfg.beam_for_argmax)
        ad.backward(mean_loss)
        grads = {name: leaf.grad_or_zeros() for name, leaf in p.items()}
        norm = clip_gradients(grads, cfg.clip_norm)
        lr = schedule_lr(cfg.base_lr, cfg.warmup_steps, step)
        adam_update(params, grads, adam, lr)
        emit({
            "step": step,
            "phase": phase,
            "source": source,
            "loss": float(mean_loss.data),
            "lr": lr,
            "grad_norm": norm,
            "examples": len(batch),
        })
        if cfg.eval_every and val_pairs and step % cfg.eval_every == 0:
            acc, bleu = _validate(model_cfg, params, kind, val_pairs,
                                  cfg.val_beam, cfg.val_max_examples)
            emit({"step": step, "phase": "val", "val_seq_acc": acc, "val_bleu": bleu})
            if cfg.stop_at_val_accuracy and acc >= cfg.stop_at_val_accuracy:
                stopped = True
        if out is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            save_model(out / f"step_{step}", model_cfg, params, kind)
        if stopped:
            break
    if out is not None:
        save_model(out, model_cfg, params, kind)
        metrics_file.close()
    return params, metrics
