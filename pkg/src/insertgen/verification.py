"""Independent checks: finite differences, stub models, exhaustive decode.

Everything here exists to test the rest of the package from the outside.
The gradient checker never touches the tape's vjp machinery beyond calling
backward once; stub models define step distributions straight from seeded
draws with no network in sight; the exhaustive decoder ranks every
trajectory up to a length cap with the same comparator beam search uses.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .inference import MASKED_CUTOFF, DecodeResult, Finished, _norm
from .model import InsertionScorer, ModelConfig, leaves
from .tasks import STOP_ID
from .trajectories import (
    EOS,
    Insert,
    InsertionEvent,
    StepProbFn,
    TokenSeq,
    Trajectory,
    apply_insertion,
    event_key,
)


def finite_diff(value: Callable[[], float], arr: np.ndarray, flat_index: int,
                h: float = 1e-5) -> float:
    """Central difference of value() along one coordinate of arr, in place."""
    orig = arr.flat[flat_index]
    arr.flat[flat_index] = orig + h
    fp = value()
    arr.flat[flat_index] = orig - h
    fm = value()
    arr.flat[flat_index] = orig
    return (fp - fm) / (2.0 * h)


def gradient_check(
    make_loss: Callable[[dict[str, Tensor]], Tensor],
    params: dict[str, np.ndarray],
    rng: np.random.Generator,
    coords_per_tensor: int = 4,
    h: float = 1e-5,
    dead_zone: float = 1e-7,
) -> float:
    """Worst per-tensor relative error between backprop and finite differences.

    Per tensor, coords_per_tensor coordinates are sampled and compared as
    vectors: ||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-8).
    Coordinates where both sides sit below dead_zone are structural zeros
    (masked grid cells; key biases, which cancel in softmax) and are skipped,
    since there only central-difference roundoff would be measured. A wrong
    zero on either side still registers: the other side clears dead_zone.
    """
    tape = Tape()
    p = leaves(tape, params)
    ad.backward(make_loss(p))

    def value() -> float:
        frozen = leaves(Tape(recording=False), params)
        return float(make_loss(frozen).data)

    worst = 0.0
    for name in sorted(params):
        arr = params[name]
        g = p[name].grad_or_zeros()
        n = min(coords_per_tensor, arr.size)
        idxs = rng.choice(arr.size, size=n, replace=False)
        ana = np.array([float(g.flat[int(i)]) for i in idxs])
        num = np.array([finite_diff(value, arr, int(i), h) for i in idxs])
        live = np.maximum(np.abs(ana), np.abs(num)) >= dead_zone
        if not live.any():
            continue
        ana, num = ana[live], num[live]
        rel = np.linalg.norm(ana - num) / max(np.linalg.norm(ana), np.linalg.norm(num), 1e-8)
        worst = max(worst, rel)
    return worst


# --- stub step models ---------------------------------------------------------

def stub_step_prob_fn(tokens: tuple[int, ...], seed: int = 0) -> StepProbFn:
    """A network-free step model: the distribution over events at a partial is
    a normalized seeded gamma draw, pure in (seed, partial). Source is ignored.
    Support: every Insert(pos, token) over the given alphabet, plus Eos."""
    if not tokens:
        raise ValueError("stub needs a nonempty token alphabet")

    def fn(src: TokenSeq, partial: TokenSeq):
        rng = np.random.default_rng((seed, len(partial), *partial))
        events: list[InsertionEvent] = [
            Insert(pos, tok) for pos in range(len(partial) + 1) for tok in tokens
        ]
        events.append(EOS)
        w = rng.gamma(1.0, size=len(events))
        w /= w.sum()
        return dict(zip(events, w))

    return fn


def concentrated_stub(y: TokenSeq, trajectory: Trajectory, tokens: tuple[int, ...],
                      eps: float = 1e-3) -> StepProbFn:
    """Puts mass 1-eps on the given trajectory's event at each of its partials
    (eps spread uniformly over the rest), and a uniform distribution anywhere
    off the trajectory. Near eps=0 a single trajectory carries the whole
    marginal, so expected, max, and marginal log-probabilities converge."""
    next_event: dict[TokenSeq, InsertionEvent] = {}
    partial: TokenSeq = ()
    for ev in trajectory:
        next_event[partial] = ev
        partial = apply_insertion(partial, ev)
    if partial != tuple(y):
        raise ValueError("trajectory does not produce y")

    def fn(src: TokenSeq, partial: TokenSeq):
        events: list[InsertionEvent] = [
            Insert(pos, tok) for pos in range(len(partial) + 1) for tok in tokens
        ]
        events.append(EOS)
        target = next_event.get(partial)
        if target is None:
            u = 1.0 / len(events)
            return {ev: u for ev in events}
        rest = eps / (len(events) - 1)
        return {ev: (1.0 - eps) if ev == target else rest for ev in events}

    return fn


# --- exhaustive decode oracle ---------------------------------------------------

def exhaustive_best_decode(
    cfg: ModelConfig,
    params: dict[str, np.ndarray],
    src: TokenSeq,
    max_tokens: int,
    length_norm: str = "steps",
) -> DecodeResult:
    """Enumerate every trajectory whose output has at most max_tokens tokens
    and return the best finished hypothesis under the beam comparator. The
    number of trajectories grows as sum over L of V^L L!, so keep max_tokens
    tiny. Grids are shared between trajectories through the scorer cache."""
    scorer = InsertionScorer(cfg, params, src)
    vocab = cfg.vocab_size
    best: list[Finished | None] = [None]

    def visit(partial: TokenSeq, logp: float, events: tuple) -> None:
        grid = scorer.log_grid(partial).reshape(-1)
        eos_flat = len(partial) * vocab + STOP_ID
        for fi in np.flatnonzero(grid > MASKED_CUTOFF):
            fi = int(fi)
            lp = logp + float(grid[fi])
            if fi == eos_flat:
                steps = len(events)
                fin = Finished(partial, events + (EOS,), lp, steps,
                               _norm(lp, steps, length_norm))
                if best[0] is None or fin.rank_key() < best[0].rank_key():
                    best[0] = fin
            elif len(partial) < max_tokens:
                pos, tok = divmod(fi, vocab)
                ev = Insert(pos, tok)
                visit(apply_insertion(partial, ev), lp, events + (ev,))

    visit((), 0.0, ())
    if best[0] is None:
        raise RuntimeError("no finished trajectory found")
    top = best[0]
    return DecodeResult(top.output, top.trajectory, top.logp, top.score,
                        top.steps, truncated=False, finished=[top])


def trajectory_count(vocab_data_tokens: int, max_tokens: int) -> int:
    """How many trajectories exhaustive decode visits: sum of V^L * L!."""
    return sum(vocab_data_tokens ** L * math.factorial(L) for L in range(max_tokens + 1))


def run_oracle_suite(seed: int = 0, emit=print) -> bool:
    """Quick self-contained battery: marginals, bounds, normalization, grads.

    Prints one line per check and returns True when everything holds. This is
    the `verify` CLI entry point; the full suite lives in the tests.
    """
    from .model import init_params, step_prob_fn, trajectory_log_prob, trajectory_log_prob_value
    from .trajectories import (
        enumerate_trajectories,
        exact_bounds,
        exact_marginal,
        left_to_right_trajectory,
    )

    ok = True

    def check(name: str, passed: bool, detail: str = "") -> None:
        nonlocal ok
        ok = ok and passed
        emit(f"[verify] {name}: {'PASS' if passed else 'FAIL'}"
             + (f" ({detail})" if detail else ""))

    rng = np.random.default_rng(seed)
    tokens = (4, 5, 6)
    fn = stub_step_prob_fn(tokens, seed=seed)
    worst = 0.0
    for _ in range(20):
        y = tuple(int(t) for t in rng.choice(tokens, size=int(rng.integers(0, 5))))
        dp = exact_marginal(y, (), fn)
        brute = math.fsum(
            math.exp(_traj_logp(fn, (), t)) for t in enumerate_trajectories(y)
        )
        worst = max(worst, abs(dp - brute) / max(brute, 1e-300))
    check("marginal DP equals enumeration", worst < 1e-10, f"worst rel {worst:.2e}")

    ordered = True
    for _ in range(10):
        y = tuple(int(t) for t in rng.choice(tokens, size=int(rng.integers(1, 5))))
        marg, mx, exp_ = exact_bounds(y, (), fn)
        ordered = ordered and exp_ <= mx + 1e-12 and mx <= marg + 1e-12
    check("expected <= max <= marginal", ordered)

    cfg = ModelConfig(vocab_size=8, model_dim=16, num_heads=2, num_encoder_layers=1,
                      num_decoder_layers=1, ffn_dim=32, max_len=12)
    params = init_params(cfg, np.random.default_rng(seed))
    sfn = step_prob_fn(cfg, params, (4, 5))
    norm_ok = True
    for ln in range(5):
        y = tuple(int(t) for t in rng.integers(4, 8, size=ln))
        total = math.fsum(sfn((4, 5), y).values())
        norm_ok = norm_ok and abs(total - 1.0) < 1e-9
    check("grid normalizes to 1", norm_ok)

    y = (5, 6, 4)
    dp = exact_marginal(y, (4, 5), sfn)
    brute = math.fsum(
        math.exp(trajectory_log_prob_value(cfg, params, (4, 5), t))
        for t in enumerate_trajectories(y)
    )
    check("model marginal equals enumeration", abs(dp - brute) / brute < 1e-10,
          f"rel {abs(dp - brute) / brute:.2e}")

    def loss(p):
        return -trajectory_log_prob(p, cfg, (4, 5), left_to_right_trajectory(y))

    err = gradient_check(loss, params, np.random.default_rng(seed + 1),
                         coords_per_tensor=2)
    check("gradients match finite differences", err < 1e-4, f"worst rel {err:.2e}")
    return ok


def _traj_logp(fn: StepProbFn, src: TokenSeq, traj: Trajectory) -> float:
    logp = 0.0
    partial: TokenSeq = ()
    for ev in traj:
        logp += math.log(fn(src, partial)[ev])
        partial = apply_insertion(partial, ev)
    return logp
