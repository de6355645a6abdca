"""Decoding: insertion beam search, greedy, baseline decode, and timing.

Beam search explores insertion events. Every round, each active hypothesis
proposes its top candidates (all events, Eos included); the global top-k
candidates are kept, and Eos-candidates retire to the finished pool,
consuming beam width. With k=1 this reduces exactly to greedy decoding.

Scores: a finished hypothesis is ranked by its log-probability divided by
its number of insertion steps (Eos excluded) when length_norm="steps", or
raw log-probability when "none". Empty outputs divide by 1. Ties break by
fewer steps (earlier finish), then by lexicographically smaller serialized
trajectory; the same total order is used for in-beam selection, so results
are deterministic and greedy == beam(k=1) by construction rather than by
accident of float noise.

The search stops early when no active hypothesis could still beat the best
finished score under an optimistic bound (future events cost nothing, and
normalization uses the largest step count still reachable).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .model import (
    BaselineStepper,
    InsertionScorer,
    ModelConfig,
    ModelError,
)
from .tasks import FIRST_DATA_ID, STOP_ID
from .trajectories import (
    EOS,
    Insert,
    InsertionEvent,
    TokenSeq,
    Trajectory,
    apply_insertion,
    event_key,
)

MASKED_CUTOFF = -1e8  # grid cells at the -1e9 mask bias are not candidates


@dataclass(frozen=True)
class Finished:
    output: TokenSeq
    trajectory: Trajectory
    logp: float
    steps: int
    score: float

    def rank_key(self):
        return (-self.score, self.steps, tuple(event_key(e) for e in self.trajectory))


@dataclass
class DecodeResult:
    output: TokenSeq
    trajectory: Trajectory
    logp: float
    score: float
    steps: int
    truncated: bool
    finished: list[Finished] = field(default_factory=list)


def _norm(logp: float, steps: int, length_norm: str) -> float:
    if length_norm == "steps":
        return logp / max(steps, 1)
    if length_norm == "none":
        return logp
    raise ValueError(f"unknown length_norm {length_norm!r}")


@dataclass
class _Hyp:
    partial: TokenSeq
    logp: float
    events: tuple
    key: tuple  # event_key of each event so far, for deterministic ties


def beam_decode(
    cfg: ModelConfig,
    params: dict[str, np.ndarray],
    src: TokenSeq,
    beam: int = 4,
    max_steps: int | None = None,
    length_norm: str = "steps",
    forced_len: int | None = None,
) -> DecodeResult:
    """Insertion-model beam search over trajectories.

    forced_len turns the search into a fixed-output-length probe (Eos is
    masked until the partial reaches that length, then forced); used by the
    timing benchmark so every step's compute matches real decoding at an
    exact length.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    if max_steps is None:
        max_steps = 2 * cfg.max_len
    cap = min(max_steps, cfg.max_len - 1)
    if forced_len is not None and forced_len > cap:
        raise ModelError(f"forced_len {forced_len} exceeds decodable cap {cap}")
    scorer = InsertionScorer(cfg, params, src)
    vocab = cfg.vocab_size
    active = [_Hyp((), 0.0, (), ())]
    finished: list[Finished] = []
    best: Finished | None = None
    while active:
        candidates = []
        for hyp in active:
            grid = scorer.log_grid(hyp.partial).reshape(-1)
            last = len(hyp.partial)
            eos_flat = last * vocab + STOP_ID
            valid = np.flatnonzero(grid > MASKED_CUTOFF)
            if forced_len is not None:
                if last < forced_len:
                    valid = valid[valid != eos_flat]
                else:
                    valid = valid[valid == eos_flat]
            elif last >= cap:
                valid = valid[valid == eos_flat]
            scores = hyp.logp + grid[valid]
            # Tie order must match the global comparator: inserts by
            # (pos, token) = flat index, Eos after every insert.
            tie = np.where(valid == eos_flat, grid.size, valid)
            order = np.lexsort((tie, -scores))[: min(beam, len(valid))]
            for i in order:
                fi = int(valid[i])
                pos, tok = divmod(fi, vocab)
                ev = EOS if fi == eos_flat else Insert(pos, tok)
                candidates.append((float(scores[i]), hyp, ev))
        candidates.sort(key=lambda c: (-c[0], c[1].key + (event_key(c[2]),)))
        next_active = []
        for logp, hyp, ev in candidates[:beam]:
            if ev == EOS:
                steps = len(hyp.events)
                fin = Finished(
                    output=hyp.partial,
                    trajectory=hyp.events + (EOS,),
                    logp=logp,
                    steps=steps,
                    score=_norm(logp, steps, length_norm),
                )
                finished.append(fin)
                if best is None or fin.rank_key() < best.rank_key():
                    best = fin
            else:
                next_active.append(
                    _Hyp(apply_insertion(hyp.partial, ev), logp,
                         hyp.events + (ev,), hyp.key + (event_key(ev),))
                )
        active = next_active
        if best is not None and active:
            # Optimistic: future events are free, normalization denominator
            # can grow to the cap. No active hypothesis above this bound can
            # beat the incumbent, and later finishes lose step-count ties.
            if length_norm == "steps":
                reachable = max(cap, 1)
                best_case = max(h.logp / reachable if h.logp < 0 else h.logp for h in active)
            else:
                best_case = max(h.logp for h in active)
            if best_case <= best.score:
                active = []
    finished.sort(key=Finished.rank_key)
    if not finished:
        return DecodeResult((), (EOS,), 0.0, 0.0, 0, truncated=True)
    top = finished[0]
    return DecodeResult(
        output=top.output,
        trajectory=top.trajectory,
        logp=top.logp,
        score=top.score,
        steps=top.steps,
        truncated=False,
        finished=finished[: max(beam, 1)],
    )


def greedy_decode(
    cfg: ModelConfig,
    params: dict[str, np.ndarray],
    src: TokenSeq,
    max_steps: int | None = None,
    length_norm: str = "steps",
    forced_len: int | None = None,
    scorer: InsertionScorer | None = None,
) -> DecodeResult:
    """Take the single most probable event each step; stop at Eos."""
    if max_steps is None:
        max_steps = 2 * cfg.max_len
    cap = min(max_steps, cfg.max_len - 1)
    if forced_len is not None and forced_len > cap:
        raise ModelError(f"forced_len {forced_len} exceeds decodable cap {cap}")
    if scorer is None:
        scorer = InsertionScorer(cfg, params, src, cache=False)
    vocab = cfg.vocab_size
    partial: TokenSeq = ()
    events: list[InsertionEvent] = []
    logp = 0.0
    while True:
        grid = scorer.log_grid(partial).reshape(-1)
        eos_flat = len(partial) * vocab + STOP_ID
        if forced_len is not None:
            if len(partial) < forced_len:
                masked = grid.copy()
                masked[eos_flat] = -np.inf
                fi = _greedy_pick(masked, eos_flat)
            else:
                fi = eos_flat
        elif len(partial) >= cap:
            fi = eos_flat
        else:
            fi = _greedy_pick(grid, eos_flat)
        logp += float(grid[fi])
        if fi == eos_flat:
            events.append(EOS)
            steps = len(events) - 1
            return DecodeResult(
                output=partial,
                trajectory=tuple(events),
                logp=logp,
                score=_norm(logp, steps, length_norm),
                steps=steps,
                truncated=False,
            )
        pos, tok = divmod(fi, vocab)
        events.append(Insert(pos, tok))
        partial = apply_insertion(partial, Insert(pos, tok))


def _greedy_pick(grid_flat: np.ndarray, eos_flat: int) -> int:
    """Argmax with beam-compatible ties: smallest insert first, Eos last."""
    valid = np.flatnonzero(grid_flat > MASKED_CUTOFF)
    scores = grid_flat[valid]
    ties = valid[scores == scores.max()]
    inserts = ties[ties != eos_flat]
    return int(inserts[0]) if len(inserts) else int(eos_flat)


def has_duplicate_outputs(finished: list[Finished]) -> bool:
    """True when several finished hypotheses share one output sequence."""
    seen = set()
    for f in finished:
        if f.output in seen:
            return True
        seen.add(f.output)
    return False


# --- baseline decode ---------------------------------------------------------

@dataclass
class _BaseHyp:
    tokens: TokenSeq
    logp: float
    state: tuple
    logrow: np.ndarray


def baseline_beam_decode(
    cfg: ModelConfig,
    params: dict[str, np.ndarray],
    src: TokenSeq,
    beam: int = 4,
    max_steps: int | None = None,
    length_norm: str = "steps",
    forced_len: int | None = None,
) -> DecodeResult:
    """Left-to-right beam search with incremental per-hypothesis state."""
    if max_steps is None:
        max_steps = 2 * cfg.max_len
    cap = min(max_steps, cfg.max_len - 1)
    if forced_len is not None and forced_len > cap:
        raise ModelError(f"forced_len {forced_len} exceeds decodable cap {cap}")
    stepper = BaselineStepper(cfg, params, src)
    state0, row0 = stepper.start()
    active = [_BaseHyp((), 0.0, state0, row0)]
    finished: list[Finished] = []
    best: Finished | None = None
    while active:
        candidates = []
        for hyp in active:
            row = hyp.logrow
            valid = np.flatnonzero(row > MASKED_CUTOFF)
            t = len(hyp.tokens)
            if forced_len is not None:
                valid = valid[valid != STOP_ID] if t < forced_len else valid[valid == STOP_ID]
            elif t >= cap:
                valid = valid[valid == STOP_ID]
            scores = hyp.logp + row[valid]
            order = np.argsort(-scores, kind="stable")[: min(beam, len(valid))]
            for i in order:
                candidates.append((float(scores[i]), hyp, int(valid[i])))
        candidates.sort(key=lambda c: (-c[0], c[1].tokens + (c[2],)))
        next_active = []
        for logp, hyp, tok in candidates[:beam]:
            if tok == STOP_ID:
                steps = len(hyp.tokens)
                traj = tuple(Insert(i, t) for i, t in enumerate(hyp.tokens)) + (EOS,)
                fin = Finished(hyp.tokens, traj, logp, steps, _norm(logp, steps, length_norm))
                finished.append(fin)
                if best is None or fin.rank_key() < best.rank_key():
                    best = fin
            else:
                state, row = stepper.advance(hyp.state, tok, len(hyp.tokens))
                next_active.append(_BaseHyp(hyp.tokens + (tok,), logp, state, row))
        active = next_active
        if best is not None and active:
            if length_norm == "steps":
                reachable = max(cap, 1)
                best_case = max(h.logp / reachable if h.logp < 0 else h.logp for h in active)
            else:
                best_case = max(h.logp for h in active)
            if best_case <= best.score:
                active = []
    finished.sort(key=Finished.rank_key)
    if not finished:
        return DecodeResult((), (EOS,), 0.0, 0.0, 0, truncated=True)
    top = finished[0]
    return DecodeResult(top.output, top.trajectory, top.logp, top.score, top.steps,
                        truncated=False, finished=finished[: max(beam, 1)])


def baseline_greedy_decode(cfg, params, src, max_steps=None, length_norm="steps", forced_len=None) -> DecodeResult:
    return baseline_beam_decode(cfg, params, src, beam=1, max_steps=max_steps,
                                length_norm=length_norm, forced_len=forced_len)


# --- timing ------------------------------------------------------------------

def bench_decode(
    insertion: tuple[ModelConfig, dict[str, np.ndarray]],
    baseline: tuple[ModelConfig, dict[str, np.ndarray]],
    lengths: list[int],
    n_per_length: int = 8,
    beam: int = 1,
    seed: int = 0,
) -> list[dict]:
    """Wall-clock decode time per output-length bin for both models.

    Decodes are length-forced so a bin measures exactly that output length
    regardless of what the checkpoints have learned. Returns rows of
    {length_bin, model, mean_ms, n}.
    """
    rows = []
    for name, (cfg, params) in (("insertion", insertion), ("baseline_l2r", baseline)):
        rng = np.random.default_rng(seed)
        for length in lengths:
            srcs = [
                tuple(int(t) for t in rng.integers(FIRST_DATA_ID, cfg.vocab_size, size=length))
                for _ in range(n_per_length)
            ]
            t0 = time.perf_counter()
            for s in srcs:
                if name == "insertion":
                    if beam == 1:
                        greedy_decode(cfg, params, s, forced_len=length)
                    else:
                        beam_decode(cfg, params, s, beam=beam, forced_len=length)
                else:
                    baseline_beam_decode(cfg, params, s, beam=beam, forced_len=length)
            dt = time.perf_counter() - t0
            rows.append({
                "length_bin": length,
                "model": name,
                "mean_ms": dt / n_per_length * 1000.0,
                "n": n_per_length,
            })
    return rows


def fitted_loglog_slope(rows: list[dict], model: str) -> float:
    pts = [(r["length_bin"], r["mean_ms"]) for r in rows if r["model"] == model]
    if len(pts) < 2:
        raise ValueError(f"need at least two length bins for {model}")
    x = np.log([p[0] for p in pts])
    y = np.log([p[1] for p in pts])
    return float(np.polyfit(x, y, 1)[0])


def mean_slowdown(rows: list[dict]) -> float:
    """insertion total time over baseline total time, minus 1."""
    ins = sum(r["mean_ms"] * r["n"] for r in rows if r["model"] == "insertion")
    base = sum(r["mean_ms"] * r["n"] for r in rows if r["model"] == "baseline_l2r")
    return ins / base - 1.0


def write_decodes(path, results: list[DecodeResult], vocab) -> None:
    """One line per decode: tokens TAB trajectory TAB score (repr float)."""
    from .trajectories import format_trajectory

    with open(path, "w") as f:
        for r in results:
            toks = " ".join(vocab.token(t) for t in r.output)
            f.write(f"{toks}\t{format_trajectory(r.trajectory)}\t{r.score!r}\n")


def read_decodes(path, vocab) -> list[tuple[TokenSeq, Trajectory, float]]:
    from .trajectories import parse_trajectory

    rows = []
    with open(path) as f:
        for ln, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{ln}: expected 3 tab-separated fields")
            toks = tuple(vocab.id_of(t) for t in parts[0].split()) if parts[0] else ()
            rows.append((toks, parse_trajectory(parts[1]), float(parts[2])))
    return rows
