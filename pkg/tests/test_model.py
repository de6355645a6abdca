import math

import numpy as np
import pytest

import insertgen.autodiff as ad
from insertgen.autodiff import Tape, backward
from insertgen.model import (
    BaselineStepper,
    ModelConfig,
    ModelError,
    InsertionScorer,
    baseline_log_prob,
    baseline_log_rows,
    decoder_input,
    encode,
    encode_batch,
    event_flat_index,
    factored_log_grid,
    init_params,
    insertion_log_grid,
    insertion_log_grid_batch,
    leaves,
    load_model,
    save_model,
    sinusoidal_table,
    step_prob_fn,
    trajectory_log_prob,
    trajectory_log_prob_value,
)
from insertgen.tasks import STOP_ID
from insertgen.trajectories import (
    EOS,
    Insert,
    enumerate_trajectories,
    exact_marginal,
    left_to_right_trajectory,
)
from insertgen.verification import gradient_check

TINY = ModelConfig(vocab_size=8, model_dim=8, num_heads=2,
                   num_encoder_layers=1, num_decoder_layers=1,
                   ffn_dim=12, max_len=12)


def tiny_params(seed=0, cfg=TINY, kind="insertion"):
    return init_params(cfg, np.random.default_rng(seed), kind=kind)


def eval_leaves(params):
    return leaves(Tape(recording=False), params)


def test_config_validates_heads_and_vocab():
    with pytest.raises(ModelError):
        ModelConfig(vocab_size=8, model_dim=10, num_heads=4)
    with pytest.raises(ModelError):
        ModelConfig(vocab_size=4)  # reserved ids only, no data tokens
    with pytest.raises(ModelError):
        ModelConfig(vocab_size=8, dropout_rate=1.0)


def test_encode_shapes_and_empty_source():
    p = eval_leaves(tiny_params())
    assert encode(p, TINY, (4, 5, 6)).shape == (3, TINY.model_dim)
    # empty source falls back to one begin-sentinel row
    assert encode(p, TINY, ()).shape == (1, TINY.model_dim)


def test_encode_rejects_overlong_source():
    p = eval_leaves(tiny_params())
    with pytest.raises(ModelError):
        encode(p, TINY, tuple([4] * (TINY.max_len + 1)))


def test_encode_readout_gradient_matches_finite_differences():
    params = tiny_params(2)
    src = (4, 5, 6, 7)

    def make_loss(p):
        mem = encode(p, TINY, src)
        return ad.sum_all(ad.mul(mem, mem))

    # h=1e-4: the quadratic readout is large enough that 1e-5 steps sit in
    # the roundoff floor
    worst = gradient_check(make_loss, params, np.random.default_rng(0),
                           coords_per_tensor=2, h=1e-4)
    assert worst < 1e-4


def test_factored_grid_hand_example():
    # p(pos) = softmax([ln 2, 0]) = [2/3, 1/3]; uniform tokens over 3 ids.
    t = Tape(recording=False)
    pos = t.leaf(np.array([math.log(2.0), 0.0]))
    tok = t.leaf(np.zeros((2, 3)))
    grid = np.exp(factored_log_grid(pos, tok).data)
    expect = np.array([[2, 2, 2], [1, 1, 1]]) / 9.0
    assert np.allclose(grid, expect, rtol=0, atol=1e-12)


def test_uniform_positions_when_w_loc_zero():
    params = tiny_params(1)
    params["w_loc"] = np.zeros(TINY.model_dim)
    p = eval_leaves(params)
    mem = encode(p, TINY, (4, 5))
    grid = np.exp(insertion_log_grid(p, TINY, mem, (6, 7, 4)).data)
    per_slot = grid.sum(axis=1)
    assert np.allclose(per_slot, 1.0 / 4.0, atol=1e-12)


@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("plen", [0, 1, 2, 5, 10])
def test_grid_normalizes_over_all_events(seed, plen):
    cfg = ModelConfig(vocab_size=9, model_dim=16, num_heads=2,
                      num_encoder_layers=1, num_decoder_layers=2,
                      ffn_dim=20, max_len=16)
    rng = np.random.default_rng(seed)
    p = eval_leaves(init_params(cfg, rng))
    mem = encode(p, cfg, (4, 5, 6))
    partial = tuple(rng.integers(4, cfg.vocab_size, size=plen))
    grid = insertion_log_grid(p, cfg, mem, partial).data
    assert grid.shape == (plen + 1, cfg.vocab_size)
    assert abs(np.exp(grid).sum() - 1.0) < 1e-9


def test_reserved_and_stop_cells_carry_no_mass():
    p = eval_leaves(tiny_params(4))
    mem = encode(p, TINY, (4,))
    grid = np.exp(insertion_log_grid(p, TINY, mem, (5, 6)).data)
    assert np.all(grid[:, :2] == 0.0)  # pad, bos
    assert np.all(grid[:, 2] == 0.0)  # slot sentinel
    assert np.all(grid[:-1, STOP_ID] == 0.0)  # stop only at the last slot
    assert grid[-1, STOP_ID] > 0.0


def test_decoder_is_not_causal():
    # A causal slot-0 state could not see the last partial token; here the
    # whole row must move when that token changes.
    p = eval_leaves(tiny_params(5))
    mem = encode(p, TINY, (4, 5))
    a = insertion_log_grid(p, TINY, mem, (6, 7, 4)).data
    b = insertion_log_grid(p, TINY, mem, (6, 7, 5)).data
    assert not np.allclose(a[0], b[0])


def test_positions_recomputed_after_front_insertion():
    # The same token embedded after a front insertion picks up pe[1] - pe[0].
    p = eval_leaves(tiny_params(6))
    one = decoder_input(p, TINY, (7,)).data
    two = decoder_input(p, TINY, (5, 7)).data
    pe = sinusoidal_table(TINY.max_len, TINY.model_dim)
    assert np.allclose(two[1] - one[0], pe[1] - pe[0], atol=1e-12)
    assert not np.allclose(two[1], one[0])


def test_decoder_rejects_partial_at_max_len():
    p = eval_leaves(tiny_params())
    with pytest.raises(ModelError):
        decoder_input(p, TINY, tuple([4] * TINY.max_len))


def test_trajectory_log_prob_two_factor_product():
    params = tiny_params(7)
    p = eval_leaves(params)
    src, y = (4, 5), (6,)
    mem = encode(p, TINY, src)
    g0 = insertion_log_grid(p, TINY, mem, ()).data
    g1 = insertion_log_grid(p, TINY, mem, y).data
    expect = g0.reshape(-1)[event_flat_index(Insert(0, 6), 0, TINY.vocab_size)]
    expect += g1.reshape(-1)[event_flat_index(EOS, 1, TINY.vocab_size)]
    got = trajectory_log_prob_value(TINY, params, src, (Insert(0, 6), EOS))
    assert abs(got - expect) < 1e-12


def test_trajectory_log_prob_rejects_malformed():
    params = tiny_params()
    with pytest.raises(ModelError):
        trajectory_log_prob_value(TINY, params, (4,), (Insert(0, 4),))
    with pytest.raises(ModelError):
        trajectory_log_prob_value(TINY, params, (4,), (EOS, Insert(0, 4), EOS))


@pytest.mark.parametrize("y", [(4,), (5, 6), (4, 4, 5), (7, 6, 5, 4)])
def test_trajectory_sum_equals_marginal(y):
    params = tiny_params(8)
    src = (5, 4)
    total = 0.0
    for traj in enumerate_trajectories(y):
        total += math.exp(trajectory_log_prob_value(TINY, params, src, traj))
    marginal = exact_marginal(y, src, step_prob_fn(TINY, params, src))
    assert marginal > 0.0
    assert abs(total - marginal) / marginal < 1e-9


def test_eval_grids_are_deterministic():
    params = tiny_params(9)
    a = InsertionScorer(TINY, params, (4, 5)).log_grid((6, 7))
    b = InsertionScorer(TINY, params, (4, 5)).log_grid((6, 7))
    assert np.array_equal(a, b)


def test_trajectory_log_prob_gradient_matches_finite_differences():
    cfg = ModelConfig(vocab_size=8, model_dim=8, num_heads=2,
                      num_encoder_layers=2, num_decoder_layers=2,
                      ffn_dim=12, max_len=12)
    params = init_params(cfg, np.random.default_rng(10))
    src, y = (4, 5, 6), (7, 4)
    traj = left_to_right_trajectory(y)

    def make_loss(p):
        return ad.scale(trajectory_log_prob(p, cfg, src, traj), -1.0)

    worst = gradient_check(make_loss, params, np.random.default_rng(1),
                           coords_per_tensor=2)
    assert worst < 1e-4


# --- batched forwards -------------------------------------------------------

def test_encode_batch_matches_single_under_padding():
    params = tiny_params(11)
    srcs = [(4, 5, 6, 7, 4), (5,), (), (6, 7)]
    p = eval_leaves(params)
    memory, bias = encode_batch(p, TINY, srcs)
    assert memory.shape == (4, 5, TINY.model_dim)
    for b, src in enumerate(srcs):
        single = encode(p, TINY, src).data
        n = len(src) or 1
        assert np.allclose(memory.data[b, :n], single, atol=1e-12)
        assert np.all(bias[b, 0, 0, :n] == 0.0)
        assert np.all(bias[b, 0, 0, n:] < 0.0)


def test_batched_grids_match_single_path():
    params = tiny_params(12)
    srcs = [(4, 5, 6), (7,), (5, 4, 6, 7)]
    partials = [(6, 5), (4, 4), (7, 6)]
    p = eval_leaves(params)
    memory, bias = encode_batch(p, TINY, srcs)
    grids = insertion_log_grid_batch(p, TINY, memory, bias, partials).data
    for b, (src, partial) in enumerate(zip(srcs, partials)):
        mem = encode(p, TINY, src)
        single = insertion_log_grid(p, TINY, mem, partial).data
        assert np.allclose(grids[b], single, atol=1e-12)
        assert abs(np.exp(grids[b]).sum() - 1.0) < 1e-9


def test_batched_grids_reject_mixed_lengths():
    params = tiny_params()
    p = eval_leaves(params)
    memory, bias = encode_batch(p, TINY, [(4,), (5,)])
    with pytest.raises(ModelError):
        insertion_log_grid_batch(p, TINY, memory, bias, [(4,), (4, 5)])


def test_batched_grid_gradients_flow_to_all_params():
    params = tiny_params(13)
    tape = Tape()
    p = leaves(tape, params)
    memory, bias = encode_batch(p, TINY, [(4, 5), (6,)])
    grids = insertion_log_grid_batch(p, TINY, memory, bias, [(7,), (4,)])
    backward(ad.sum_all(ad.mul(grids, grids)))
    missing = [k for k, leaf in p.items() if leaf.grad is None]
    assert missing == []


# --- left-to-right baseline --------------------------------------------------

def test_baseline_single_token_is_two_softmax_factors():
    params = tiny_params(14, kind="baseline")
    p = eval_leaves(params)
    src, y = (4, 5), (6,)
    rows = baseline_log_rows(p, TINY, src, y).data
    expect = rows[0, 6] + rows[1, STOP_ID]
    got = baseline_log_prob(p, TINY, src, y).item()
    assert abs(got - expect) < 1e-12
    assert np.allclose(np.exp(rows).sum(axis=1), 1.0, atol=1e-9)


def test_baseline_rows_are_causal():
    params = tiny_params(15, kind="baseline")
    p = eval_leaves(params)
    src = (4, 5)
    a = baseline_log_rows(p, TINY, src, (6, 7, 4)).data
    b = baseline_log_rows(p, TINY, src, (6, 7, 5)).data
    # rows 0..2 condition on bos, y0, y1 only; y2 differs and must not leak
    assert np.array_equal(a[:3], b[:3])
    assert not np.allclose(a[3], b[3])


def test_baseline_stepper_matches_teacher_forcing():
    params = tiny_params(16, kind="baseline")
    p = eval_leaves(params)
    src, y = (5, 6, 7), (4, 7, 6, 5)
    rows = baseline_log_rows(p, TINY, src, y).data
    stepper = BaselineStepper(TINY, params, src)
    state, logp = stepper.start()
    assert np.allclose(logp, rows[0], atol=1e-9)
    for t, tok in enumerate(y):
        state, logp = stepper.advance(state, tok, t)
        assert np.allclose(logp, rows[t + 1], atol=1e-9)


def test_baseline_stepper_respects_max_len():
    params = tiny_params(kind="baseline")
    stepper = BaselineStepper(TINY, params, (4,))
    state, _ = stepper.start()
    with pytest.raises(ModelError):
        stepper.advance(state, 4, TINY.max_len - 1)


# --- persistence --------------------------------------------------------------

def test_save_load_model_round_trip(tmp_path):
    cfg = ModelConfig(vocab_size=8, model_dim=8, num_heads=2,
                      num_encoder_layers=1, num_decoder_layers=1,
                      ffn_dim=12, max_len=12, dropout_rate=0.25)
    params = init_params(cfg, np.random.default_rng(17), kind="baseline")
    save_model(tmp_path / "m", cfg, params, "baseline")
    cfg2, params2, kind = load_model(tmp_path / "m")
    assert cfg2 == cfg
    assert kind == "baseline"
    assert set(params2) == set(params)
    for name, arr in params.items():
        assert np.array_equal(params2[name], arr.astype(np.float32).astype(np.float64))


def test_load_model_missing_field_rejected(tmp_path):
    save_model(tmp_path / "m", TINY, tiny_params(), "insertion")
    manifest = (tmp_path / "m" / "model.txt").read_text().splitlines()
    kept = [line for line in manifest if not line.startswith("ffn_dim=")]
    (tmp_path / "m" / "model.txt").write_text("\n".join(kept) + "\n")
    with pytest.raises(ModelError):
        load_model(tmp_path / "m")
