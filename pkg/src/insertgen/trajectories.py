"""Combinatorics of building a sequence by repeated token insertion.

A partial output is a tuple of token ids. One generation step either
inserts a token immediately before position pos (pos == len(partial) means
append) or emits Eos to finish. A trajectory is the full event record of
one generation: zero or more Insert events followed by exactly one Eos.

Because insertion never reorders or removes tokens, every intermediate
partial of a trajectory that ends at y is a subsequence of y. "Correct"
events at a partial are exactly those that keep y reachable; at partial ==
y the only correct event is Eos. A length-n target is reachable by one
trajectory per permutation of its positions, n! in total, even when tokens
repeat.

Everything here is pure and model-free except the functions that take a
step-probability callable: (source, partial) -> mapping from every event
(all (pos, token) pairs plus Eos) to probability, summing to 1. Those
power the exact oracles that the neural model is verified against.
"""

from __future__ import annotations

import math
from bisect import bisect_left, insort
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

TokenSeq = tuple[int, ...]


class TrajectoryError(Exception):
    pass


class SubsequenceError(TrajectoryError):
    """The partial cannot be extended into the target by insertions."""


class DegenerateModelError(TrajectoryError):
    """The model puts (numerically) zero mass on every correct event."""

    def __init__(self, src: TokenSeq, partial: TokenSeq):
        super().__init__(
            f"model assigns zero probability to all correct insertions at "
            f"partial={partial!r} for source={src!r}"
        )
        self.src = src
        self.partial = partial


@dataclass(frozen=True)
class Insert:
    pos: int
    token: int


@dataclass(frozen=True)
class Eos:
    pass


InsertionEvent = Insert | Eos
Trajectory = tuple[InsertionEvent, ...]
StepProbFn = Callable[[TokenSeq, TokenSeq], Mapping[InsertionEvent, float]]

EOS = Eos()


def event_key(ev: InsertionEvent) -> tuple[int, int, int]:
    """Total order on events: Insert by (pos, token), Eos after all Inserts."""
    if isinstance(ev, Eos):
        return (1, 0, 0)
    return (0, ev.pos, ev.token)


def trajectory_key(traj: Trajectory) -> tuple[tuple[int, int, int], ...]:
    return tuple(event_key(ev) for ev in traj)


def apply_insertion(partial: TokenSeq, ev: InsertionEvent) -> TokenSeq:
    """Insert ev.token before position ev.pos; Eos leaves the partial as is."""
    if isinstance(ev, Eos):
        return partial
    if not 0 <= ev.pos <= len(partial):
        raise TrajectoryError(
            f"insertion position {ev.pos} outside [0, {len(partial)}]"
        )
    return partial[: ev.pos] + (ev.token,) + partial[ev.pos :]


def apply_trajectory(traj: Trajectory) -> TokenSeq:
    """Run a trajectory from the empty partial; Eos must come last if at all."""
    partial: TokenSeq = ()
    for i, ev in enumerate(traj):
        if isinstance(ev, Eos):
            if i != len(traj) - 1:
                raise TrajectoryError("Eos before the end of the trajectory")
            break
        partial = apply_insertion(partial, ev)
    return partial


def is_subsequence(a: TokenSeq, b: TokenSeq) -> bool:
    it = iter(b)
    return all(any(x == y for y in it) for x in a)


def correct_insertions(y: TokenSeq, partial: TokenSeq) -> set[InsertionEvent]:
    """Every event that keeps the target y reachable from partial.

    Defined as: Insert(pos, t) is correct iff applying it yields a
    subsequence of y; Eos is correct iff partial == y. This implementation
    avoids the per-candidate subsequence scan with two match tables:
    earliest[p] = length of the shortest y-prefix covering partial[:p], and
    latest[p] = largest j such that partial[p:] embeds into y[j:]. Insert(p,
    t) is then correct iff t occurs in y[earliest[p]:latest[p]].
    """
    if partial == y:
        return {EOS}
    m, n = len(partial), len(y)
    earliest = [0] * (m + 1)
    j = 0
    for p in range(1, m + 1):
        while j < n and y[j] != partial[p - 1]:
            j += 1
        if j == n:
            raise SubsequenceError(f"{partial!r} is not a subsequence of {y!r}")
        j += 1
        earliest[p] = j
    latest = [0] * (m + 1)
    latest[m] = n
    j = n - 1
    for p in range(m - 1, -1, -1):
        while y[j] != partial[p]:
            j -= 1
        latest[p] = j
        j -= 1
    events: set[InsertionEvent] = set()
    for p in range(m + 1):
        for k in range(earliest[p], latest[p]):
            events.add(Insert(p, y[k]))
    return events


def sample_trajectory_uniform(y: TokenSeq, rng: np.random.Generator) -> Trajectory:
    """Uniform over the n! insertion orders of y's positions.

    A uniformly random permutation of target positions is replayed as
    insertion events: when position j of y is inserted, the event position
    is the number of already-inserted target positions left of j.
    """
    order = rng.permutation(len(y))
    inserted: list[int] = []
    events: list[InsertionEvent] = []
    for j in order:
        j = int(j)
        pos = bisect_left(inserted, j)
        events.append(Insert(pos, y[j]))
        insort(inserted, j)
    events.append(EOS)
    return tuple(events)


def left_to_right_trajectory(y: TokenSeq) -> Trajectory:
    return tuple(Insert(i, t) for i, t in enumerate(y)) + (EOS,)


def sample_trajectory_from_model(
    y: TokenSeq,
    src: TokenSeq,
    model: StepProbFn,
    rng: np.random.Generator,
) -> Trajectory:
    """Sample stepwise from the model restricted to correct events.

    At each step the model's distribution is restricted to the correct
    events and renormalized before sampling, so every draw is a valid
    trajectory for y (exactly len(y) insertions plus Eos). Raises
    DegenerateModelError when the correct events carry zero mass.
    """
    partial: TokenSeq = ()
    events: list[InsertionEvent] = []
    while True:
        dist = model(src, partial)
        correct = sorted(correct_insertions(y, partial), key=event_key)
        probs = np.array([dist.get(ev, 0.0) for ev in correct], dtype=np.float64)
        total = probs.sum()
        if not total > 0.0:
            raise DegenerateModelError(src, partial)
        ev = correct[rng.choice(len(correct), p=probs / total)]
        events.append(ev)
        if isinstance(ev, Eos):
            return tuple(events)
        partial = apply_insertion(partial, ev)


def enumerate_trajectories(y: TokenSeq, max_len: int = 8) -> list[Trajectory]:
    """All trajectories that produce y; |result| == len(y)!.

    Guarded by max_len because of the factorial growth.
    """
    if len(y) > max_len:
        raise TrajectoryError(
            f"refusing to enumerate {len(y)}! trajectories (limit {max_len})"
        )
    out: list[Trajectory] = []
    stack: list[InsertionEvent] = []

    def walk(partial: TokenSeq) -> None:
        if partial == y:
            out.append(tuple(stack) + (EOS,))
            return
        for ev in sorted(correct_insertions(y, partial), key=event_key):
            stack.append(ev)
            walk(apply_insertion(partial, ev))
            stack.pop()

    walk(())
    return out


def _check_distribution(dist: Mapping[InsertionEvent, float]) -> None:
    total = math.fsum(dist.values())
    if abs(total - 1.0) > 1e-8 or any(p < 0 for p in dist.values()):
        raise TrajectoryError(
            f"step distribution is not normalized (total={total!r})"
        )


def exact_marginal(
    y: TokenSeq,
    src: TokenSeq,
    model: StepProbFn,
    max_len: int = 16,
) -> float:
    """p(y | src): the sum of the probabilities of every trajectory for y.

    Dynamic program over distinct partials (dedup by token content): process
    subsequence states of y in order of length, push mass along every
    correct Insert edge, finish with the Eos probability at y itself.
    Distinct events from a state may reach the same next state (duplicate
    tokens); each event is its own edge, which is exactly what merging
    trajectories by shared partials requires.
    """
    if len(y) > max_len:
        raise TrajectoryError(
            f"refusing exact marginalization for len {len(y)} (limit {max_len})"
        )
    mass: dict[TokenSeq, float] = {(): 1.0}
    for _ in range(len(y)):
        nxt: dict[TokenSeq, float] = {}
        for partial, m in mass.items():
            if m == 0.0:
                continue
            dist = model(src, partial)
            _check_distribution(dist)
            for ev in correct_insertions(y, partial):
                if isinstance(ev, Eos):
                    continue
                s = apply_insertion(partial, ev)
                nxt[s] = nxt.get(s, 0.0) + m * dist.get(ev, 0.0)
        mass = nxt
    final = model(src, y)
    _check_distribution(final)
    return mass.get(y, 1.0 if y == () else 0.0) * final.get(EOS, 0.0)


def _logsumexp(vals: list[float]) -> float:
    m = max(vals)
    if m == -math.inf:
        return -math.inf
    return m + math.log(math.fsum(math.exp(v - m) for v in vals))


def exact_bounds(
    y: TokenSeq,
    src: TokenSeq,
    model: StepProbFn,
    max_len: int = 6,
) -> tuple[float, float, float]:
    """(marginal_logp, max_traj_logp, expected_logp) by full enumeration.

    expected_logp is the mean trajectory log-probability under the
    stepwise-renormalized sampling distribution (each step restricted to
    correct events and renormalized), i.e. the quantity the sampled
    training objective estimates. Both bounds never exceed the marginal:
    expected <= max <= marginal.
    """
    if len(y) > max_len:
        raise TrajectoryError(
            f"refusing exact bounds for len {len(y)} (limit {max_len})"
        )
    dists: dict[TokenSeq, Mapping[InsertionEvent, float]] = {}
    masses: dict[TokenSeq, float] = {}

    def dist_at(partial: TokenSeq) -> Mapping[InsertionEvent, float]:
        if partial not in dists:
            d = model(src, partial)
            _check_distribution(d)
            dists[partial] = d
            masses[partial] = math.fsum(
                d.get(ev, 0.0) for ev in correct_insertions(y, partial)
            )
        return dists[partial]

    logps: list[float] = []
    qs: list[float] = []
    for traj in enumerate_trajectories(y, max_len=max_len):
        partial: TokenSeq = ()
        logp = 0.0
        q = 1.0
        for ev in traj:
            d = dist_at(partial)
            p = d.get(ev, 0.0)
            logp += math.log(p) if p > 0.0 else -math.inf
            q = q * (p / masses[partial]) if masses[partial] > 0.0 else 0.0
            partial = apply_insertion(partial, ev)
        logps.append(logp)
        qs.append(q)
    marginal = _logsumexp(logps)
    best = max(logps)
    expected = math.fsum(q * lp for q, lp in zip(qs, logps) if q > 0.0)
    return marginal, best, expected


def format_trajectory(traj: Trajectory) -> str:
    """Serialize as space-separated pos:token pairs followed by EOS."""
    parts = []
    for ev in traj:
        if isinstance(ev, Eos):
            parts.append("EOS")
        else:
            parts.append(f"{ev.pos}:{ev.token}")
    return " ".join(parts)


def parse_trajectory(line: str) -> Trajectory:
    events: list[InsertionEvent] = []
    fields = line.split()
    if not fields:
        raise TrajectoryError("empty trajectory line")
    for i, field in enumerate(fields):
        if field == "EOS":
            if i != len(fields) - 1:
                raise TrajectoryError(f"EOS not final in {line!r}")
            events.append(EOS)
            continue
        pos_s, sep, tok_s = field.partition(":")
        if not sep or not pos_s.isdigit() or not tok_s.isdigit():
            raise TrajectoryError(f"bad trajectory field {field!r} in {line!r}")
        events.append(Insert(int(pos_s), int(tok_s)))
    if not isinstance(events[-1], Eos):
        raise TrajectoryError(f"trajectory does not end in EOS: {line!r}")
    return tuple(events)
