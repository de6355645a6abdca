"""Insertion transformer and a left-to-right baseline over the same tape ops.

The insertion decoder reads the current partial plus one trailing <slot>
sentinel, attends with NO causal mask, and produces one state per slot: a
length-L partial exposes L+1 slots, where slot i means "insert immediately
before position i" and the last slot doubles as append / end-of-generation.
The joint event distribution factors as p(pos) * p(token | pos):

    p(pos)        = softmax(H w_loc)           H: (slots, d)
    p(token|pos)  = softmax(h_pos W_tok)

which normalizes over the whole (slots x vocab) grid by construction. Eos
is realized as the <stop> token at the last slot; <stop> logits everywhere
else (and reserved tokens everywhere) get a -1e9 bias, whose probability
underflows to an exact 0.

Absolute sinusoidal positions are recomputed from the current partial on
every step: an insertion shifts the positions of everything to its right,
so decoder states are never cached or reused across steps. The baseline
decoder is the ordinary causal-mask transformer over the same blocks; its
incremental decode path (BaselineStepper) caches per-layer keys/values,
which is valid there precisely because appending never moves old tokens.
"""

from __future__ import annotations

import ast
import dataclasses
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .checkpoint import load_checkpoint, load_manifest, save_checkpoint, save_manifest
from .tasks import BOS_ID, FIRST_DATA_ID, PAD_ID, SLOT_ID, STOP_ID
from .trajectories import (
    EOS,
    Eos,
    Insert,
    InsertionEvent,
    StepProbFn,
    TokenSeq,
    Trajectory,
    apply_insertion,
)

MASK_BIAS = -1e9


class ModelError(Exception):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    model_dim: int = 64
    num_heads: int = 2
    num_encoder_layers: int = 2
    num_decoder_layers: int = 2
    ffn_dim: int = 128
    max_len: int = 32
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.model_dim % self.num_heads != 0:
            raise ModelError("model_dim must be divisible by num_heads")
        if self.vocab_size <= FIRST_DATA_ID:
            raise ModelError("vocab must contain at least one data token")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ModelError("dropout_rate must be in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


@lru_cache(maxsize=8)
def sinusoidal_table(max_len: int, dim: int) -> np.ndarray:
    """pe[p, 2i] = sin(p / 10000^(2i/dim)), pe[p, 2i+1] = cos(same angle)."""
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    idx = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * np.floor(idx / 2.0) / dim)
    table = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
    table.setflags(write=False)
    return table


def _glorot(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, size=(n_in, n_out))


def _attn_params(p, prefix: str, rng, d: int) -> None:
    for name in ("wq", "wk", "wv", "wo"):
        p[f"{prefix}_{name}"] = _glorot(rng, d, d)
    for name in ("bq", "bk", "bv", "bo"):
        p[f"{prefix}_{name}"] = np.zeros(d)


def _ln_params(p, prefix: str, d: int) -> None:
    p[f"{prefix}_g"] = np.ones(d)
    p[f"{prefix}_b"] = np.zeros(d)


def _ffn_params(p, prefix: str, rng, d: int, f: int) -> None:
    p[f"{prefix}_w1"] = _glorot(rng, d, f)
    p[f"{prefix}_b1"] = np.zeros(f)
    p[f"{prefix}_w2"] = _glorot(rng, f, d)
    p[f"{prefix}_b2"] = np.zeros(d)


def init_params(cfg: ModelConfig, rng: np.random.Generator, kind: str = "insertion") -> dict[str, np.ndarray]:
    if kind not in ("insertion", "baseline"):
        raise ModelError(f"unknown model kind {kind!r}")
    d, f, v = cfg.model_dim, cfg.ffn_dim, cfg.vocab_size
    p: dict[str, np.ndarray] = {}
    p["enc_embed"] = rng.normal(0.0, d**-0.5, size=(v, d))
    for i in range(cfg.num_encoder_layers):
        _attn_params(p, f"enc{i}_self", rng, d)
        _ln_params(p, f"enc{i}_ln1", d)
        _ffn_params(p, f"enc{i}_ffn", rng, d, f)
        _ln_params(p, f"enc{i}_ln2", d)
    p["dec_embed"] = rng.normal(0.0, d**-0.5, size=(v, d))
    for i in range(cfg.num_decoder_layers):
        _attn_params(p, f"dec{i}_self", rng, d)
        _ln_params(p, f"dec{i}_ln1", d)
        _attn_params(p, f"dec{i}_cross", rng, d)
        _ln_params(p, f"dec{i}_ln2", d)
        _ffn_params(p, f"dec{i}_ffn", rng, d, f)
        _ln_params(p, f"dec{i}_ln3", d)
    if kind == "insertion":
        p["w_loc"] = rng.normal(0.0, d**-0.5, size=(d,))
        p["w_tok"] = _glorot(rng, d, v)
    else:
        p["out_proj"] = _glorot(rng, d, v)
    return p


def leaves(tape: Tape, params: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {name: tape.leaf(arr, name=name) for name, arr in params.items()}


def _split_heads(x: Tensor, heads: int) -> Tensor:
    if x.ndim == 2:
        t, d = x.shape
        return ad.transpose(ad.reshape(x, (t, heads, d // heads)), (1, 0, 2))
    b, t, d = x.shape
    return ad.transpose(ad.reshape(x, (b, t, heads, d // heads)), (0, 2, 1, 3))


def _join_heads(x: Tensor) -> Tensor:
    if x.ndim == 3:
        h, t, dh = x.shape
        return ad.reshape(ad.transpose(x, (1, 0, 2)), (t, h * dh))
    b, h, t, dh = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


def _affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, w), b)


def _attention(p, prefix: str, q_in: Tensor, kv_in: Tensor, cfg: ModelConfig, mask: np.ndarray | None = None) -> Tensor:
    h = cfg.num_heads
    q = _split_heads(_affine(q_in, p[f"{prefix}_wq"], p[f"{prefix}_bq"]), h)
    k = _split_heads(_affine(kv_in, p[f"{prefix}_wk"], p[f"{prefix}_bk"]), h)
    v = _split_heads(_affine(kv_in, p[f"{prefix}_wv"], p[f"{prefix}_bv"]), h)
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), cfg.head_dim**-0.5)
    if mask is not None:
        scores = ad.add(scores, ad.constant(mask))
    ctx = _join_heads(ad.matmul(ad.softmax(scores, axis=-1), v))
    return _affine(ctx, p[f"{prefix}_wo"], p[f"{prefix}_bo"])


def _residual_ln(p, prefix: str, x: Tensor, sub: Tensor) -> Tensor:
    return ad.layer_norm(ad.add(x, sub), p[f"{prefix}_g"], p[f"{prefix}_b"])


def _ffn(p, prefix: str, x: Tensor) -> Tensor:
    hidden = ad.relu(_affine(x, p[f"{prefix}_w1"], p[f"{prefix}_b1"]))
    return _affine(hidden, p[f"{prefix}_w2"], p[f"{prefix}_b2"])


def _maybe_dropout(x: Tensor, cfg: ModelConfig, rng) -> Tensor:
    if rng is None or cfg.dropout_rate == 0.0:
        return x
    return ad.dropout(x, cfg.dropout_rate, rng)


def _embed(p, table: str, ids, cfg: ModelConfig, rng) -> Tensor:
    """ids is one token tuple or a (batch, length) id array; output gains
    the same leading axes."""
    idx = np.asarray(ids, dtype=np.intp)
    if idx.shape[-1] > cfg.max_len:
        raise ModelError(f"sequence of length {idx.shape[-1]} exceeds max_len={cfg.max_len}")
    x = ad.scale(ad.embedding_lookup(p[table], idx), math.sqrt(cfg.model_dim))
    pe = sinusoidal_table(cfg.max_len, cfg.model_dim)[: idx.shape[-1]]
    return _maybe_dropout(ad.add(x, ad.constant(pe)), cfg, rng)


def encode(p, cfg: ModelConfig, src: TokenSeq, rng=None) -> Tensor:
    """Encoder memory, shape (len(src), d); empty sources get one <bos> row."""
    ids = src if src else (BOS_ID,)
    x = _embed(p, "enc_embed", ids, cfg, rng)
    for i in range(cfg.num_encoder_layers):
        attn = _maybe_dropout(_attention(p, f"enc{i}_self", x, x, cfg), cfg, rng)
        x = _residual_ln(p, f"enc{i}_ln1", x, attn)
        ff = _maybe_dropout(_ffn(p, f"enc{i}_ffn", x), cfg, rng)
        x = _residual_ln(p, f"enc{i}_ln2", x, ff)
    return x


def encode_batch(p, cfg: ModelConfig, srcs, rng=None) -> tuple[Tensor, np.ndarray]:
    """Encode sources together: (memory (batch, max_len, d), key bias).

    Sources are right-padded to the longest; the bias is MASK_BIAS over pad
    key positions, shaped (batch, 1, 1, max_len) for adding onto attention
    scores here and in decoder cross-attention. Memory rows at pad positions
    hold garbage and are only ever safe behind that bias.
    """
    ids_list = [tuple(s) if s else (BOS_ID,) for s in srcs]
    width = max(len(s) for s in ids_list)
    ids = np.full((len(ids_list), width), PAD_ID, dtype=np.intp)
    bias = np.zeros((len(ids_list), 1, 1, width))
    for b, s in enumerate(ids_list):
        ids[b, : len(s)] = s
        bias[b, :, :, len(s):] = MASK_BIAS
    x = _embed(p, "enc_embed", ids, cfg, rng)
    for i in range(cfg.num_encoder_layers):
        attn = _maybe_dropout(_attention(p, f"enc{i}_self", x, x, cfg, mask=bias), cfg, rng)
        x = _residual_ln(p, f"enc{i}_ln1", x, attn)
        ff = _maybe_dropout(_ffn(p, f"enc{i}_ffn", x), cfg, rng)
        x = _residual_ln(p, f"enc{i}_ln2", x, ff)
    return x, bias


def factored_log_grid(pos_logits: Tensor, tok_logits: Tensor) -> Tensor:
    """Joint log-probability grid log p(pos) + log p(token | pos).

    Accepts (slots,)/(slots, vocab) logits or the same with a leading batch
    axis."""
    lp_pos = ad.log_softmax(pos_logits, axis=-1)
    lp_tok = ad.log_softmax(tok_logits, axis=-1)
    return ad.add(lp_tok, ad.reshape(lp_pos, lp_pos.shape + (1,)))


def insertion_logit_mask(n_slots: int, vocab_size: int) -> np.ndarray:
    """Bias grid: reserved tokens never, <stop> only at the last slot."""
    mask = np.zeros((n_slots, vocab_size))
    mask[:, [PAD_ID, BOS_ID, SLOT_ID]] = MASK_BIAS
    mask[:-1, STOP_ID] = MASK_BIAS
    return mask


def decoder_input(p, cfg: ModelConfig, partial: TokenSeq, rng=None) -> Tensor:
    """Embedded partial plus the trailing slot sentinel, positions recomputed."""
    if len(partial) >= cfg.max_len:
        raise ModelError(
            f"partial of length {len(partial)} leaves no room for the slot "
            f"sentinel at max_len={cfg.max_len}"
        )
    return _embed(p, "dec_embed", tuple(partial) + (SLOT_ID,), cfg, rng)


def insertion_log_grid(p, cfg: ModelConfig, memory: Tensor, partial: TokenSeq, rng=None) -> Tensor:
    """Log-probabilities of every event at this partial: (slots, vocab).

    Cell (pos, token) is log p(Insert(pos, token)); cell (last, <stop>) is
    log p(Eos). exp() of the grid sums to 1.
    """
    x = decoder_input(p, cfg, partial, rng)
    for i in range(cfg.num_decoder_layers):
        attn = _maybe_dropout(_attention(p, f"dec{i}_self", x, x, cfg), cfg, rng)
        x = _residual_ln(p, f"dec{i}_ln1", x, attn)
        cross = _maybe_dropout(_attention(p, f"dec{i}_cross", x, memory, cfg), cfg, rng)
        x = _residual_ln(p, f"dec{i}_ln2", x, cross)
        ff = _maybe_dropout(_ffn(p, f"dec{i}_ffn", x), cfg, rng)
        x = _residual_ln(p, f"dec{i}_ln3", x, ff)
    n_slots = len(partial) + 1
    pos_logits = ad.reshape(ad.matmul(x, ad.reshape(p["w_loc"], (cfg.model_dim, 1))), (n_slots,))
    tok_logits = ad.add(
        ad.matmul(x, p["w_tok"]),
        ad.constant(insertion_logit_mask(n_slots, cfg.vocab_size)),
    )
    return factored_log_grid(pos_logits, tok_logits)


def insertion_log_grid_batch(p, cfg: ModelConfig, memory: Tensor, mem_bias: np.ndarray,
                             partials, rng=None) -> Tensor:
    """Event grids for equal-length partials at once: (batch, slots, vocab).

    Training grows every live example by exactly one token per round, so a
    round's partials always share one length and the decoder side needs no
    padding; memory and mem_bias come from encode_batch, sliced to the same
    batch rows.
    """
    plen = len(partials[0])
    if any(len(q) != plen for q in partials):
        raise ModelError("batched partials must share one length")
    if plen >= cfg.max_len:
        raise ModelError(
            f"partial of length {plen} leaves no room for the slot "
            f"sentinel at max_len={cfg.max_len}"
        )
    ids = np.array([tuple(q) + (SLOT_ID,) for q in partials], dtype=np.intp)
    x = _embed(p, "dec_embed", ids, cfg, rng)
    for i in range(cfg.num_decoder_layers):
        attn = _maybe_dropout(_attention(p, f"dec{i}_self", x, x, cfg), cfg, rng)
        x = _residual_ln(p, f"dec{i}_ln1", x, attn)
        cross = _maybe_dropout(_attention(p, f"dec{i}_cross", x, memory, cfg, mask=mem_bias), cfg, rng)
        x = _residual_ln(p, f"dec{i}_ln2", x, cross)
        ff = _maybe_dropout(_ffn(p, f"dec{i}_ffn", x), cfg, rng)
        x = _residual_ln(p, f"dec{i}_ln3", x, ff)
    n_slots = plen + 1
    pos_logits = ad.reshape(
        ad.matmul(x, ad.reshape(p["w_loc"], (cfg.model_dim, 1))),
        (len(partials), n_slots),
    )
    tok_logits = ad.add(
        ad.matmul(x, p["w_tok"]),
        ad.constant(insertion_logit_mask(n_slots, cfg.vocab_size)),
    )
    return factored_log_grid(pos_logits, tok_logits)


def event_flat_index(ev: InsertionEvent, partial_len: int, vocab_size: int) -> int:
    if isinstance(ev, Eos):
        return partial_len * vocab_size + STOP_ID
    if not 0 <= ev.pos <= partial_len:
        raise ModelError(f"event position {ev.pos} outside partial of length {partial_len}")
    if not 0 <= ev.token < vocab_size:
        raise ModelError(f"event token {ev.token} outside vocab of size {vocab_size}")
    return ev.pos * vocab_size + ev.token


def validate_trajectory(traj: Trajectory) -> None:
    if not traj or not isinstance(traj[-1], Eos):
        raise ModelError("trajectory must end with Eos")
    if any(isinstance(ev, Eos) for ev in traj[:-1]):
        raise ModelError("Eos may appear only as the final event")


def trajectory_log_prob(p, cfg: ModelConfig, src: TokenSeq, traj: Trajectory, rng=None) -> Tensor:
    """log p(trajectory | src): sum of per-step event log-probabilities."""
    validate_trajectory(traj)
    memory = encode(p, cfg, src, rng)
    partial: TokenSeq = ()
    terms = []
    for ev in traj:
        grid = insertion_log_grid(p, cfg, memory, partial, rng)
        idx = event_flat_index(ev, len(partial), cfg.vocab_size)
        terms.append(ad.take(grid, [idx]))
        partial = apply_insertion(partial, ev)
    return ad.sum_all(ad.concat(terms))


def trajectory_log_prob_value(cfg: ModelConfig, params: dict[str, np.ndarray], src: TokenSeq, traj: Trajectory) -> float:
    p = leaves(Tape(recording=False), params)
    return trajectory_log_prob(p, cfg, src, traj).item()


class InsertionScorer:
    """Eval-mode insertion model: encodes src once, serves numpy log grids.

    Grids are optionally memoized by partial; distinct search hypotheses
    frequently share partials, and a grid depends on nothing else.
    """

    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray], src: TokenSeq, cache: bool = True):
        self.cfg = cfg
        self.src = tuple(src)
        self.p = leaves(Tape(recording=False), params)
        self.memory = encode(self.p, cfg, self.src)
        self._cache: dict[TokenSeq, np.ndarray] | None = {} if cache else None

    def log_grid(self, partial: TokenSeq) -> np.ndarray:
        partial = tuple(partial)
        if self._cache is not None and partial in self._cache:
            return self._cache[partial]
        grid = insertion_log_grid(self.p, self.cfg, self.memory, partial).data
        if self._cache is not None:
            self._cache[partial] = grid
        return grid

    def event_log_prob(self, partial: TokenSeq, ev: InsertionEvent) -> float:
        grid = self.log_grid(partial)
        return float(grid.reshape(-1)[event_flat_index(ev, len(partial), self.cfg.vocab_size)])


def step_prob_fn(cfg: ModelConfig, params: dict[str, np.ndarray], src: TokenSeq) -> StepProbFn:
    """Adapter to the oracle-facing contract: full event->probability maps."""
    scorer = InsertionScorer(cfg, params, src)

    def fn(src_arg: TokenSeq, partial: TokenSeq):
        if tuple(src_arg) != scorer.src:
            raise ModelError("step_prob_fn is bound to one source sequence")
        grid = np.exp(scorer.log_grid(partial))
        dist: dict[InsertionEvent, float] = {}
        last = len(partial)
        for pos in range(last + 1):
            for tok in range(cfg.vocab_size):
                if pos == last and tok == STOP_ID:
                    dist[EOS] = float(grid[pos, tok])
                else:
                    dist[Insert(pos, tok)] = float(grid[pos, tok])
        return dist

    return fn


# --- left-to-right baseline ------------------------------------------------

def _baseline_row_mask(vocab_size: int) -> np.ndarray:
    mask = np.zeros(vocab_size)
    mask[[PAD_ID, BOS_ID, SLOT_ID]] = MASK_BIAS
    return mask


def baseline_log_rows(p, cfg: ModelConfig, src: TokenSeq, y: TokenSeq, rng=None) -> Tensor:
    """Teacher-forced next-token log-probabilities, shape (len(y)+1, vocab).

    Row t conditions on <bos> + y[:t]; the final row predicts <stop>.
    """
    memory = encode(p, cfg, src, rng)
    ids = (BOS_ID,) + tuple(y)
    x = _embed(p, "dec_embed", ids, cfg, rng)
    t = len(ids)
    causal = np.triu(np.full((t, t), MASK_BIAS), k=1)
    for i in range(cfg.num_decoder_layers):
        attn = _maybe_dropout(_attention(p, f"dec{i}_self", x, x, cfg, mask=causal), cfg, rng)
        x = _residual_ln(p, f"dec{i}_ln1", x, attn)
        cross = _maybe_dropout(_attention(p, f"dec{i}_cross", x, memory, cfg), cfg, rng)
        x = _residual_ln(p, f"dec{i}_ln2", x, cross)
        ff = _maybe_dropout(_ffn(p, f"dec{i}_ffn", x), cfg, rng)
        x = _residual_ln(p, f"dec{i}_ln3", x, ff)
    logits = ad.add(ad.matmul(x, p["out_proj"]), ad.constant(_baseline_row_mask(cfg.vocab_size)))
    return ad.log_softmax(logits, axis=-1)


def baseline_log_prob(p, cfg: ModelConfig, src: TokenSeq, y: TokenSeq, rng=None) -> Tensor:
    """log p(y, <stop> | src) under the causal baseline."""
    rows = baseline_log_rows(p, cfg, src, y, rng)
    targets = np.array(list(y) + [STOP_ID], dtype=np.intp)
    flat = np.arange(len(targets)) * cfg.vocab_size + targets
    return ad.sum_all(ad.take(rows, flat))


def _ln_vec(x: np.ndarray, g: np.ndarray, b: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean()
    var = x.var()
    return (x - mu) / math.sqrt(var + eps) * g + b


class BaselineStepper:
    """Incremental baseline decoding with per-layer key/value caches.

    Appending never shifts existing positions, so cached keys/values stay
    valid; each step costs O(current length). States are immutable: advance
    returns a new state, which makes beam search trivially safe.
    """

    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray], src: TokenSeq):
        self.cfg = cfg
        self.params = params
        eval_p = leaves(Tape(recording=False), params)
        memory = encode(eval_p, cfg, tuple(src)).data
        h, dh = cfg.num_heads, cfg.head_dim
        self.mem_kv = []
        for i in range(cfg.num_decoder_layers):
            k = (memory @ params[f"dec{i}_cross_wk"] + params[f"dec{i}_cross_bk"])
            v = (memory @ params[f"dec{i}_cross_wv"] + params[f"dec{i}_cross_bv"])
            self.mem_kv.append((
                k.reshape(-1, h, dh).transpose(1, 0, 2),
                v.reshape(-1, h, dh).transpose(1, 0, 2),
            ))
        self.row_mask = _baseline_row_mask(cfg.vocab_size)
        self.pe = sinusoidal_table(cfg.max_len, cfg.model_dim)

    def start(self) -> tuple[tuple, np.ndarray]:
        """Feed <bos>; returns (state, log-probabilities of the first token)."""
        empty = tuple((np.zeros((self.cfg.num_heads, 0, self.cfg.head_dim)),) * 2
                      for _ in range(self.cfg.num_decoder_layers))
        return self._feed(empty, BOS_ID, 0)

    def advance(self, state: tuple, token: int, position: int) -> tuple[tuple, np.ndarray]:
        """Feed the token just emitted at 0-based output position `position`."""
        return self._feed(state, token, position + 1)

    def _feed(self, state: tuple, token: int, position: int) -> tuple[tuple, np.ndarray]:
        cfg, p = self.cfg, self.params
        if position >= cfg.max_len:
            raise ModelError(f"baseline position {position} exceeds max_len={cfg.max_len}")
        h, dh = cfg.num_heads, cfg.head_dim
        x = p["dec_embed"][token] * math.sqrt(cfg.model_dim) + self.pe[position]
        new_state = []
        for i in range(cfg.num_decoder_layers):
            k_cache, v_cache = state[i]
            q = (x @ p[f"dec{i}_self_wq"] + p[f"dec{i}_self_bq"]).reshape(h, 1, dh)
            k_new = (x @ p[f"dec{i}_self_wk"] + p[f"dec{i}_self_bk"]).reshape(h, 1, dh)
            v_new = (x @ p[f"dec{i}_self_wv"] + p[f"dec{i}_self_bv"]).reshape(h, 1, dh)
            k = np.concatenate([k_cache, k_new], axis=1)
            v = np.concatenate([v_cache, v_new], axis=1)
            new_state.append((k, v))
            attn = _np_attend(q, k, v, dh)
            x = _ln_vec(x + attn @ p[f"dec{i}_self_wo"] + p[f"dec{i}_self_bo"],
                        p[f"dec{i}_ln1_g"], p[f"dec{i}_ln1_b"])
            qc = (x @ p[f"dec{i}_cross_wq"] + p[f"dec{i}_cross_bq"]).reshape(h, 1, dh)
            mk, mv = self.mem_kv[i]
            cross = _np_attend(qc, mk, mv, dh)
            x = _ln_vec(x + cross @ p[f"dec{i}_cross_wo"] + p[f"dec{i}_cross_bo"],
                        p[f"dec{i}_ln2_g"], p[f"dec{i}_ln2_b"])
            ff = np.maximum(x @ p[f"dec{i}_ffn_w1"] + p[f"dec{i}_ffn_b1"], 0.0) @ p[f"dec{i}_ffn_w2"] + p[f"dec{i}_ffn_b2"]
            x = _ln_vec(x + ff, p[f"dec{i}_ln3_g"], p[f"dec{i}_ln3_b"])
        logits = x @ p["out_proj"] + self.row_mask
        logits = logits - logits.max()
        logp = logits - math.log(np.exp(logits).sum())
        return tuple(new_state), logp


def _np_attend(q: np.ndarray, k: np.ndarray, v: np.ndarray, dh: int) -> np.ndarray:
    """(h,1,dh) query against (h,t,dh) keys/values; returns a flat (d,) row."""
    scores = (q @ k.transpose(0, 2, 1)) * dh**-0.5
    scores = scores - scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    w = w / w.sum(axis=-1, keepdims=True)
    out = w @ v  # (h, 1, dh)
    return out.transpose(1, 0, 2).reshape(-1)


def save_model(dir_path, cfg: ModelConfig, params: dict[str, np.ndarray], kind: str) -> None:
    """Write weights plus a manifest describing how to rebuild the config."""
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    save_checkpoint(d / "model.ckpt", params)
    fields = {"kind": kind}
    for f in dataclasses.fields(ModelConfig):
        fields[f.name] = repr(getattr(cfg, f.name))
    save_manifest(d / "model.txt", fields)


def load_model(dir_path) -> tuple[ModelConfig, dict[str, np.ndarray], str]:
    d = Path(dir_path)
    fields = load_manifest(d / "model.txt")
    kind = fields.pop("kind", "insertion")
    kwargs = {}
    for f in dataclasses.fields(ModelConfig):
        if f.name not in fields:
            raise ModelError(f"manifest missing field {f.name!r}")
        kwargs[f.name] = ast.literal_eval(fields[f.name])
    return ModelConfig(**kwargs), load_checkpoint(d / "model.ckpt"), kind
