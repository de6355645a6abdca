import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from insertgen.tasks import (
    BOS_ID,
    FIRST_DATA_ID,
    PAD_ID,
    SLOT_ID,
    STOP_ID,
    TASK_KINDS,
    DataError,
    TaskSpec,
    Vocab,
    branch_alignment_monotone_fraction,
    build_vocab,
    center_out_order,
    corpus_bleu,
    generate,
    generate_example,
    read_tsv,
    read_vocab,
    sequence_accuracy,
    write_tsv,
    write_vocab,
)


def test_reserved_ids_are_stable():
    assert (PAD_ID, BOS_ID, SLOT_ID, STOP_ID, FIRST_DATA_ID) == (0, 1, 2, 3, 4)


@pytest.mark.parametrize("kind", TASK_KINDS)
def test_generation_is_pure_in_index(kind):
    spec = TaskSpec(kind=kind, vocab_size=8, min_len=1, max_len=6, seed=5)
    a = generate(spec, 20)
    b = generate(spec, 20)
    assert a == b
    vocab = build_vocab(spec)
    assert generate_example(spec, vocab, 7) == a[7]


@pytest.mark.parametrize("kind", TASK_KINDS)
def test_lengths_respect_spec(kind):
    spec = TaskSpec(kind=kind, vocab_size=8, min_len=2, max_len=5, seed=0)
    for src, tgt in generate(spec, 40):
        assert 2 <= len(src) <= 5
        assert tgt


def test_copy_reverse_sort_semantics():
    for kind, f in (("copy", lambda s: s),
                    ("reverse", lambda s: s[::-1]),
                    ("sort", lambda s: tuple(sorted(s)))):
        spec = TaskSpec(kind=kind, vocab_size=10, min_len=1, max_len=8, seed=1)
        for src, tgt in generate(spec, 30):
            assert tgt == f(src)


def test_map_shuffle_is_a_relabeling():
    spec = TaskSpec(kind="map_shuffle", vocab_size=10, min_len=1, max_len=8, seed=2)
    mapping = {}
    for src, tgt in generate(spec, 60):
        assert len(src) == len(tgt)
        # undo the window-2 swaps, then the tokenwise map must be a function
        un = list(tgt)
        for j in range(0, len(un) - 1, 2):
            un[j], un[j + 1] = un[j + 1], un[j]
        for s, t in zip(src, un):
            assert mapping.setdefault(s, t) == t
    assert len(set(mapping.values())) == len(mapping)  # injective


def test_center_out_order_small_cases():
    assert center_out_order(1) == [0]
    assert center_out_order(2) == [0, 1]
    assert center_out_order(3) == [1, 2, 0]
    assert center_out_order(4) == [1, 2, 0, 3]
    assert center_out_order(5) == [2, 3, 1, 4, 0]


@given(st.integers(min_value=1, max_value=40))
def test_center_out_order_is_permutation(n):
    assert sorted(center_out_order(n)) == list(range(n))


def test_branching_structure():
    spec = TaskSpec(kind="branching", vocab_size=8, min_len=1, max_len=9, seed=3)
    vocab = build_vocab(spec)
    bra, ket, sep = vocab.id_of("bra"), vocab.id_of("ket"), vocab.id_of("sep")
    for src, tgt in generate(spec, 40):
        assert tgt[0] == bra and tgt[-1] == ket
        content = [t for t in tgt[1:-1] if t != sep]
        assert content == [src[j] for j in center_out_order(len(src))]


def test_branching_defeats_monotone_alignment():
    spec = TaskSpec(kind="branching", vocab_size=12, min_len=4, max_len=10, seed=0)
    assert branch_alignment_monotone_fraction(spec, 200) < 0.7


def test_taskspec_validation():
    with pytest.raises(DataError):
        TaskSpec(kind="nope", vocab_size=8)
    with pytest.raises(DataError):
        TaskSpec(kind="copy", vocab_size=0)
    with pytest.raises(DataError):
        TaskSpec(kind="copy", vocab_size=8, min_len=3, max_len=2)


# --- vocab and files -----------------------------------------------------------


def test_vocab_round_trip(tmp_path):
    spec = TaskSpec(kind="branching", vocab_size=5)
    vocab = build_vocab(spec)
    write_vocab(tmp_path / "v.tsv", vocab)
    back = read_vocab(tmp_path / "v.tsv")
    assert back.tokens == vocab.tokens
    assert back.classes == vocab.classes
    assert back.class_of(back.id_of("sep")) == "function"
    assert back.class_of(back.id_of("0")) == "content"


def test_vocab_rejects_missing_reserved_prefix():
    with pytest.raises(DataError):
        Vocab(("a", "b"), ("content", "content"))


def test_vocab_rejects_duplicates():
    spec = TaskSpec(kind="copy", vocab_size=2)
    v = build_vocab(spec)
    with pytest.raises(DataError):
        Vocab(v.tokens + ("0",), v.classes + ("content",))


def test_tsv_round_trip(tmp_path):
    spec = TaskSpec(kind="sort", vocab_size=9, min_len=1, max_len=6, seed=4)
    vocab = build_vocab(spec)
    pairs = generate(spec, 25)
    write_tsv(tmp_path / "d.tsv", pairs, vocab)
    assert read_tsv(tmp_path / "d.tsv", vocab) == pairs


def test_tsv_errors_carry_line_numbers(tmp_path):
    vocab = build_vocab(TaskSpec(kind="copy", vocab_size=4))
    bad = tmp_path / "bad.tsv"
    bad.write_text("0 1\t0 1\nno tab here\n")
    with pytest.raises(DataError, match=":2"):
        read_tsv(bad, vocab)
    bad.write_text("0 1\t\n")
    with pytest.raises(DataError, match=":1"):
        read_tsv(bad, vocab)
    bad.write_text("0 1\tnotatoken\n")
    with pytest.raises(DataError, match="notatoken"):
        read_tsv(bad, vocab)


# --- metrics ---------------------------------------------------------------------


def test_sequence_accuracy():
    assert sequence_accuracy([(4, 5), (6,)], [(4, 5), (7,)]) == 0.5
    with pytest.raises(DataError):
        sequence_accuracy([], [])
    with pytest.raises(DataError):
        sequence_accuracy([(4,)], [])


def test_bleu_identity_is_100():
    refs = [(4, 5, 6, 7, 8), (9, 10, 11, 12)]
    assert corpus_bleu(refs, refs) == pytest.approx(100.0)


def test_bleu_disjoint_is_tiny():
    assert corpus_bleu([(4, 4, 4, 4)], [(5, 6, 7, 8)]) < 1.0


def test_bleu_hand_computed():
    # one 4-token pair differing in the last token:
    # p1=3/4, p2=2/3, p3=1/2, p4 smoothed to 1/2, brevity penalty 1
    hyp = [(4, 5, 6, 9)]
    ref = [(4, 5, 6, 7)]
    expected = 100.0 * (3 / 4 * 2 / 3 * 1 / 2 * 1 / 2) ** 0.25
    assert corpus_bleu(hyp, ref) == pytest.approx(expected, rel=1e-9)


def test_bleu_smoothing_only_on_zero_match_orders():
    # identical pair: every order matches fully, so no smoothing may kick in
    pair = [(4, 5, 6, 7, 8)]
    assert corpus_bleu(pair, pair) == pytest.approx(100.0)


def test_bleu_brevity_penalty():
    # hypothesis shorter than reference gets penalized despite clean n-grams
    hyp = [(4, 5)]
    ref = [(4, 5, 6, 7)]
    assert corpus_bleu(hyp, ref) < corpus_bleu([(4, 5, 6, 7)], ref)


def test_bleu_empty_hypothesis_is_zero():
    assert corpus_bleu([()], [(4, 5)]) == 0.0
