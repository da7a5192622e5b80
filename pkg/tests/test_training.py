import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from globalmem import diffcore as dc
from globalmem.evalbench import token_f1
from globalmem.model import init_params
from globalmem.training import (
    GenSample,
    RlgfPair,
    SftSample,
    TrainingAborted,
    build_rlgf_pairs,
    clue_subsets,
    default_config,
    loss_generator,
    loss_pretrain,
    loss_rlgf,
    loss_rlgf_grad,
    loss_rlgf_margin,
    loss_sft,
    pair_from_outcome,
    preference_accuracy,
    sample_ks,
    smoothed,
    train,
)

import fixtures
from conftest import toy_config


def _mem_check(loss_fn, params, names=None):
    w = params.tensors(names or params.memory_names)
    tensors = [w[n] for n in (names or params.memory_names)]
    return dc.grad_check(lambda: loss_fn(w), tensors, max_entries=12)


# --- defaults -------------------------------------------------------------------------------


def test_stage_defaults():
    pre, sft, rl = (default_config(s) for s in ("pretrain", "sft", "rlgf"))
    assert (pre.lr, pre.batch_size, pre.epochs) == (5e-5, 8, 1)
    assert (sft.lr, sft.batch_size, sft.epochs) == (1e-5, 8, 2)
    assert pre.betas == (4, 8, 16, 32, 64)
    assert pre.momentum == 0.9
    with pytest.raises(ValueError):
        default_config("finetune")


def test_beta_sampled_per_window_from_usable_set():
    cfg = toy_config(window_l=16, mem_k=4)
    ks = sample_ks(cfg, 16 * 200, (4, 8, 16, 32, 64), np.random.default_rng(0))
    assert len(ks) == 200
    assert set(ks) == {4, 2, 1}


# --- pretraining loss ---------------------------------------------------------------------


def test_pretrain_vocab_one_is_zero():
    p = init_params(toy_config(vocab_size=1), 0)
    assert loss_pretrain(np.zeros((2, 20), dtype=int), p).item() == pytest.approx(0.0, abs=1e-12)


def test_pretrain_untrained_loss_near_log_vocab():
    p = init_params(toy_config(vocab_size=50), 0)
    batch = np.random.default_rng(0).integers(50, size=(4, 24))
    assert loss_pretrain(batch, p).item() == pytest.approx(math.log(50), rel=0.15)


def test_pretrain_rejects_short_sequences(params):
    with pytest.raises(ValueError):
        loss_pretrain(np.array([[3]]), params)


def test_pretrain_gradients_three_windows(params):
    batch = np.random.default_rng(2).integers(17, size=(2, 24))
    assert _mem_check(lambda w: loss_pretrain(batch, params, w=w), params) < 1e-4


# --- SFT loss -----------------------------------------------------------------------------


def test_sft_vocab_one_is_zero():
    p = init_params(toy_config(vocab_size=1), 0)
    assert loss_sft(SftSample([0] * 10, [0], [0]), p).item() == pytest.approx(0.0, abs=1e-12)


def test_sft_needs_output():
    with pytest.raises(ValueError):
        SftSample([1, 2], [3], [])


def test_sft_base_weights_receive_no_gradient(params):
    w = params.tensors(params.memory_names)
    with dc.recording() as tape:
        loss = loss_sft(SftSample(list(range(12)), [1, 2], [3, 4]), params, w=w)
    tape.backward(loss)
    assert all(w[n].grad is None for n in params.base_names)
    assert any(w[n].grad is not None and np.any(w[n].grad) for n in params.memory_names)


def test_sft_gradients(params):
    samples = [SftSample(list(range(12)), [1, 2], [3, 4]), SftSample(list(range(5, 14)), [6], [0])]
    assert _mem_check(lambda w: loss_sft(samples, params, w=w), params) < 1e-4


def test_sft_only_scores_output_tokens(params):
    # changing the gold output changes the loss; the context alone does not enter the target
    a = loss_sft(SftSample(list(range(12)), [1, 2], [3]), params).item()
    b = loss_sft(SftSample(list(range(12)), [1, 2], [5]), params).item()
    assert a != b


# --- RLGF ---------------------------------------------------------------------------------


@pytest.mark.parametrize("rp,rn,expected", [(0.8, 0.3, 0.5), (2.0, 0.5, 0.0), (0.4, 0.4, 1.0), (0.0, 1.0, 2.0)])
def test_rlgf_hinge_values(rp, rn, expected):
    assert loss_rlgf(rp, rn) == pytest.approx(expected, abs=1e-15)


def test_rlgf_batched_sum():
    assert loss_rlgf([0.8, 2.0, 0.5], [0.3, 0.5, 0.5]) == pytest.approx(0.5 + 0.0 + 1.0, abs=1e-15)


@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), min_size=1, max_size=8))
def test_rlgf_non_negative_and_zero_iff_margin_met(pairs):
    rp, rn = zip(*pairs)
    value = loss_rlgf(rp, rn)
    assert value >= 0.0
    assert (value == 0.0) == all(a >= b + 1 for a, b in pairs)


def test_rlgf_subgradient_is_zero_when_margin_met():
    gp, gn = loss_rlgf_grad([2.0, 0.5], [0.5, 0.3])
    assert gp.tolist() == [0.0, -1.0] and gn.tolist() == [0.0, 1.0]


def test_rlgf_rejects_rewards_not_strictly_ordered():
    with pytest.raises(ValueError):
        RlgfPair([1], [1], [2], [3], 0.5, 0.5)


def test_rlgf_margin_gradients(params):
    pairs = [RlgfPair(list(range(12)), [1], [2, 3], [4], 1.0, 0.0), RlgfPair(list(range(3, 12)), [2], [5], [6, 7], 0.7, 0.2)]
    assert loss_rlgf_margin(pairs, params).item() > 0  # a met margin would make the check vacuous
    assert _mem_check(lambda w: loss_rlgf_margin(pairs, params, w=w), params) < 1e-4


def test_subset_enumeration_counts():
    assert len(clue_subsets(5)) == 16
    assert len(clue_subsets(10)) == sum(math.comb(10, r) for r in range(3, 11))
    assert clue_subsets(5)[0] == (0, 1, 2)


@pytest.mark.parametrize("gold_clue", range(5))
def test_preferred_subset_always_contains_the_gold_clue(gold_clue):
    for seed in range(4):
        src, gold = fixtures.rlgf_source(seed, gold_clue)
        out = build_rlgf_pairs(src, fixtures.rlgf_pipeline(gold), token_f1)
        best, worst = out.pair
        assert len(out.rewards) == 16
        assert gold_clue in best and gold_clue not in worst
        assert best == min(s for s, r in out.rewards.items() if r == max(out.rewards.values()))


def test_rlgf_needs_five_clues():
    src, gold = fixtures.rlgf_source(0, 0)
    src.clues = src.clues[:4]
    out = build_rlgf_pairs(src, fixtures.rlgf_pipeline(gold), token_f1)
    assert out.pair is None and "4 clues" in out.reason


def test_rlgf_drops_sample_when_all_subsets_tie():
    src, gold = fixtures.rlgf_source(0, 0)
    pipe = fixtures.rlgf_pipeline(gold)
    pipe.answerer = lambda q, e: "unknown"
    out = build_rlgf_pairs(src, pipe, token_f1)
    assert out.pair is None and out.reason and len(out.rewards) == 16


def test_rlgf_downsamples_above_ten_clues():
    src, gold = fixtures.rlgf_source(0, 0)
    src.clues = src.clues + [f"extra{i}" for i in range(7)]
    out = build_rlgf_pairs(src, fixtures.rlgf_pipeline(gold), token_f1, np.random.default_rng(1))
    assert len(out.clue_ids) == 10
    assert len(out.rewards) == len(clue_subsets(10))


def _fixture_pairs(pipe):
    pairs = []
    for seed in range(6):
        for g in (0, 2, 4):
            src, gold = fixtures.rlgf_source(seed, g)
            p = fixtures.rlgf_pipeline(gold, pipe.params, pipe.vocab)
            pairs.append(pair_from_outcome(src, build_rlgf_pairs(src, p, token_f1), p))
    return pairs


def test_rlgf_training_raises_preference_accuracy():
    pipe = fixtures.rlgf_pipeline(0)
    pairs = _fixture_pairs(pipe)
    before = preference_accuracy(pairs, pipe.params)
    train("rlgf", pairs, pipe.params, default_config("rlgf", lr=0.01, steps=60, batch_size=6))
    assert preference_accuracy(pairs, pipe.params) > before


# --- the training loop -----------------------------------------------------------------------


def _pretrain_data():
    return [list(np.arange(i, i + 24) % 17) for i in range(8)]


@pytest.mark.parametrize("stage", ["pretrain", "sft", "rlgf"])
def test_memory_stages_keep_base_bit_identical(stage, params):
    data = {
        "pretrain": _pretrain_data(),
        "sft": [SftSample(list(range(12)), [1, 2], [3, 4])] * 4,
        "rlgf": [RlgfPair(list(range(12)), [1], [2, 3], [4], 1.0, 0.0)] * 4,
    }[stage]
    before = {n: a.copy() for n, a in params.arrays.items()}
    train(stage, data, params, default_config(stage, lr=0.05, steps=5, batch_size=2))
    assert all(np.array_equal(before[n], params.arrays[n]) for n in params.base_names)
    assert any(not np.array_equal(before[n], params.arrays[n]) for n in params.memory_names)


def test_generator_stage_trains_only_base(params):
    before = {n: a.copy() for n, a in params.arrays.items()}
    train("generator", [GenSample([1, 2, 3], [4, 5])] * 4, params, default_config("generator", steps=3, batch_size=2))
    assert all(np.array_equal(before[n], params.arrays[n]) for n in params.memory_names)
    assert any(not np.array_equal(before[n], params.arrays[n]) for n in params.base_names)


def test_generator_gradients(params):
    samples = [GenSample([1, 2, 3], [4, 5]), GenSample([6, 7], [8])]
    assert _mem_check(lambda w: loss_generator(samples, params, w=w), params, ["L1.w2", "tok_emb", "L0.wq"]) < 1e-4


def test_zero_learning_rate_changes_nothing(params):
    before = {n: a.copy() for n, a in params.arrays.items()}
    fp = params.fingerprint
    train("pretrain", _pretrain_data(), params, default_config("pretrain", lr=0.0, steps=4, batch_size=2))
    assert all(np.array_equal(before[n], params.arrays[n]) for n in params.names)
    assert params.fingerprint == fp


def test_same_seed_same_trace(cfg):
    traces = []
    for _ in range(2):
        p = init_params(cfg, 0, init_std=0.3)
        traces.append(train("pretrain", _pretrain_data(), p, default_config("pretrain", lr=0.05, steps=6, batch_size=2)))
    assert traces[0] == traces[1]


def test_nan_loss_aborts_with_snapshot(params):
    params.arrays["L0.wqm"][0, 0] = np.nan
    params.touch()
    with pytest.raises(TrainingAborted) as err:
        train("pretrain", _pretrain_data(), params, default_config("pretrain", lr=0.1, steps=3, batch_size=2))
    snap = err.value.snapshot
    assert snap["step"] == 0 and "param_norms" in snap


def test_stage_data_type_is_checked(params):
    with pytest.raises(TypeError):
        train("sft", [GenSample([1], [2])], params, default_config("sft"))
    with pytest.raises(ValueError):
        train("sft", [], params, default_config("sft"))
    with pytest.raises(ValueError):
        train("sft", [SftSample([1], [1], [1])], params, default_config("pretrain"))


def test_checkpoint_written_after_training(tmp_path, params):
    path = tmp_path / "out.ck"
    train("pretrain", _pretrain_data(), params, default_config("pretrain", steps=1, batch_size=2), checkpoint=str(path))
    assert path.read_bytes()[:4] == b"MRCK"


def test_smoothed_is_trailing_mean():
    assert smoothed([1, 2, 3, 4], window=2) == [1, 1.5, 2.5, 3.5]
