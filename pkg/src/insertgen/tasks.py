"""Synthetic sequence tasks, vocabularies, TSV datasets, and metrics.

Ids 0..3 are reserved in every vocabulary:

    0 <pad>    unused filler (kept for format stability)
    1 <bos>    begin sentinel (baseline decoder start, empty-source marker)
    2 <slot>   trailing slot sentinel of the insertion decoder
    3 <stop>   end-of-generation token

Data tokens start at FIRST_DATA_ID. Generators are pure in (task spec,
index): example i of a task is the same on every run and platform.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

PAD_ID = 0
BOS_ID = 1
SLOT_ID = 2
STOP_ID = 3
FIRST_DATA_ID = 4
RESERVED = ("<pad>", "<bos>", "<slot>", "<stop>")

TASK_KINDS = ("copy", "reverse", "sort", "map_shuffle", "branching")


class DataError(Exception):
    pass


@dataclass(frozen=True)
class Vocab:
    """Token table; id = position. Each token carries a class label."""

    tokens: tuple[str, ...]
    classes: tuple[str, ...]

    def __post_init__(self):
        if len(self.tokens) != len(self.classes):
            raise DataError("tokens and classes must align")
        if self.tokens[: len(RESERVED)] != RESERVED:
            raise DataError(f"vocab must start with the reserved tokens {RESERVED}")
        if len(set(self.tokens)) != len(self.tokens):
            raise DataError("duplicate token strings in vocab")

    @property
    def size(self) -> int:
        return len(self.tokens)

    def data_ids(self) -> range:
        return range(FIRST_DATA_ID, self.size)

    def id_of(self, token: str) -> int:
        try:
            return self.tokens.index(token)
        except ValueError:
            raise DataError(f"unknown token {token!r}") from None

    def token(self, i: int) -> str:
        return self.tokens[i]

    def class_of(self, i: int) -> str:
        return self.classes[i]

    def encode(self, text: str) -> tuple[int, ...]:
        return tuple(self.id_of(t) for t in text.split())

    def decode(self, ids) -> str:
        return " ".join(self.tokens[i] for i in ids)


def write_vocab(path, vocab: Vocab) -> None:
    """One token per line (id = line number); class appended after a tab."""
    with open(path, "w") as f:
        for tok, cls in zip(vocab.tokens, vocab.classes):
            f.write(f"{tok}\t{cls}\n")


def read_vocab(path) -> Vocab:
    tokens: list[str] = []
    classes: list[str] = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                raise DataError(f"{path}:{lineno}: empty vocab line")
            tok, _, cls = line.partition("\t")
            tokens.append(tok)
            classes.append(cls or "content")
    return Vocab(tuple(tokens), tuple(classes))


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    vocab_size: int = 20  # number of data tokens, reserved ids excluded
    min_len: int = 1
    max_len: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise DataError(f"unknown task {self.kind!r}; choose from {TASK_KINDS}")
        if not 1 <= self.min_len <= self.max_len:
            raise DataError("need 1 <= min_len <= max_len")
        if self.vocab_size < 1:
            raise DataError("need at least one data token")


# Function tokens of the branching task: a bracket pair plus a separator.
BRANCH_FUNCTION_TOKENS = ("bra", "ket", "sep")


def build_vocab(spec: TaskSpec) -> Vocab:
    tokens = list(RESERVED)
    classes = ["special"] * len(RESERVED)
    if spec.kind == "branching":
        tokens += BRANCH_FUNCTION_TOKENS
        classes += ["function"] * len(BRANCH_FUNCTION_TOKENS)
    tokens += [str(i) for i in range(spec.vocab_size)]
    classes += ["content"] * spec.vocab_size
    return Vocab(tuple(tokens), tuple(classes))


def _map_shuffle_table(spec: TaskSpec, first: int, last: int) -> np.ndarray:
    # One fixed bijection over the data ids per seed, shared by all examples.
    rng = np.random.default_rng((spec.seed, 0x5EED))
    ids = np.arange(first, last)
    return ids[rng.permutation(len(ids))]

def center_out_order(n: int) -> list[int]:
    """Index order that starts at the center and alternates right, left."""
    c = (n - 1) // 2
    order = [c]
    lo, hi = c - 1, c + 1
    right_turn = True
    while lo >= 0 or hi < n:
        if (right_turn and hi < n) or lo < 0:
            order.append(hi)
            hi += 1
        else:
            order.append(lo)
            lo -= 1
        right_turn = not right_turn
    return order


def generate_example(spec: TaskSpec, vocab: Vocab, index: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Example `index` of the task; pure in (spec, index)."""
    rng = np.random.default_rng((spec.seed, index))
    first = vocab.size - spec.vocab_size
    n = int(rng.integers(spec.min_len, spec.max_len + 1))
    src = tuple(int(t) for t in rng.integers(first, vocab.size, size=n))
    if spec.kind == "copy":
        tgt = src
    elif spec.kind == "reverse":
        tgt = src[::-1]
    elif spec.kind == "sort":
        tgt = tuple(sorted(src))
    elif spec.kind == "map_shuffle":
        table = _map_shuffle_table(spec, first, vocab.size)
        mapped = [int(table[t - first]) for t in src]
        for j in range(0, n - 1, 2):  # deterministic window-2 reorder
            mapped[j], mapped[j + 1] = mapped[j + 1], mapped[j]
        tgt = tuple(mapped)
    elif spec.kind == "branching":
        bra = vocab.id_of("bra")
        ket = vocab.id_of("ket")
        sep = vocab.id_of("sep")
        out = [bra]
        for i, j in enumerate(center_out_order(n)):
            out.append(src[j])
            if i % 2 == 1 and i < n - 1:
                out.append(sep)
        out.append(ket)
        tgt = tuple(out)
    else:  # pragma: no cover - TaskSpec rejects unknown kinds
        raise DataError(spec.kind)
    return src, tgt


def generate(spec: TaskSpec, n_examples: int, start_index: int = 0):
    vocab = build_vocab(spec)
    return [generate_example(spec, vocab, i) for i in range(start_index, start_index + n_examples)]


def branch_alignment_monotone_fraction(spec: TaskSpec, n_examples: int = 200) -> float:
    """Largest fraction of source-index steps that one fixed direction explains.

    For each branching example, the target's content tokens align to source
    indices by construction (center-out order). Count adjacent aligned pairs
    that increase, and pairs that decrease; the monotone fraction of the
    example is max(up, down) / pairs. Averaged over examples. The task is
    built so this stays well below 0.7: center-out alternates direction
    almost every step.
    """
    if spec.kind != "branching":
        raise DataError("alignment audit is defined for the branching task")
    fracs = []
    for i in range(n_examples):
        rng = np.random.default_rng((spec.seed, i))
        n = int(rng.integers(spec.min_len, spec.max_len + 1))
        order = center_out_order(n)
        if len(order) < 2:
            continue
        ups = sum(b > a for a, b in zip(order, order[1:]))
        downs = len(order) - 1 - ups
        fracs.append(max(ups, downs) / (len(order) - 1))
    return float(np.mean(fracs)) if fracs else 0.0


def write_tsv(path, pairs, vocab: Vocab) -> None:
    """One pair per line: source tokens TAB target tokens, space-separated."""
    with open(path, "w") as f:
        for src, tgt in pairs:
            f.write(f"{vocab.decode(src)}\t{vocab.decode(tgt)}\n")


def read_tsv(path, vocab: Vocab) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
    pairs = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if line.count("\t") != 1:
                raise DataError(f"{path}:{lineno}: expected exactly one tab")
            src_s, tgt_s = line.split("\t")
            if not tgt_s.strip():
                raise DataError(f"{path}:{lineno}: empty target")
            try:
                src = vocab.encode(src_s)
                tgt = vocab.encode(tgt_s)
            except DataError as e:
                raise DataError(f"{path}:{lineno}: {e}") from None
            pairs.append((src, tgt))
    return pairs


def sequence_accuracy(hyps, refs) -> float:
    if len(hyps) != len(refs):
        raise DataError("hyp/ref count mismatch")
    if not refs:
        raise DataError("empty evaluation set")
    return sum(tuple(h) == tuple(r) for h, r in zip(hyps, refs)) / len(refs)


def _ngrams(seq, n: int) -> Counter:
    return Counter(tuple(seq[i : i + n]) for i in range(len(seq) - n + 1))


def corpus_bleu(hyps, refs, max_n: int = 4) -> float:
    """Corpus BLEU on a 0..100 scale with clipped n-gram precision.

    Smoothing convention: add-one smoothing applies only to higher orders
    (n >= 2) with zero matches; unigram precision is never smoothed, so a
    corpus sharing no tokens with its references scores exactly 0 and an
    exact corpus exactly 100. Brevity penalty uses corpus totals.
    """
    if len(hyps) != len(refs):
        raise DataError("hyp/ref count mismatch")
    if not refs:
        raise DataError("empty evaluation set")
    matched = [0] * max_n
    total = [0] * max_n
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hyps, refs):
        hyp, ref = tuple(hyp), tuple(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            hc = _ngrams(hyp, n)
            rc = _ngrams(ref, n)
            total[n - 1] += max(len(hyp) - n + 1, 0)
            matched[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
    if hyp_len == 0 or matched[0] == 0:
        return 0.0
    log_prec = 0.0
    for m, t in zip(matched, total):
        if m > 0:
            log_prec += math.log(m / t)
        else:
            log_prec += math.log((m + 1) / (t + 1))
    log_prec /= max_n
    bp = 0.0 if hyp_len >= ref_len else 1.0 - ref_len / hyp_len
    return 100.0 * math.exp(bp + log_prec)
