import math
from fractions import Fraction

import pytest
import numpy as np
from hypothesis import given, settings, strategies as st

from mifo.engine import EngineNonFiniteException, Tape, finite_diff_check
from mifo.grpo import RolloutGroup
from mifo.ledger import FreezeMask
from mifo.model import ModelConfig, TinyTransformer
from mifo.optim import AdamW
from mifo.sft import (BufferEntry, BufferInvariantException, DegenerateMaskException, SftBuffer,
                      SftConfig, SftConfigException, SFTPhaseException, maybe_admit,
                      select_high_entropy, sft_batch_step, sft_loss, sft_phase, should_switch)
from mifo.tasks import VOCAB, TaskConfig, make_questions, teacher_solve

from tests.conftest import TINY_MODEL, TINY_TASK

cfg = SftConfig(p=0.25, rho=0.5, S=3, learning_rate=1e-2, batch_size=2)


def group_for(q, acc, n=4):
    hits = int(round(acc * n))
    rewards = np.array([1.0] * hits + [0.0] * (n - hits))
    return RolloutGroup(question=q, responses=[(1,)] * n, old_log_probs=[np.zeros(1)] * n,
                        rewards=rewards, acc=hits / n, advantages=np.zeros(n))


def entry(q, acc=0.0):
    return BufferEntry(question=q, solution=teacher_solve(q).solution, acc_at_admission=acc)


def test_config_validation():
    with pytest.raises(SftConfigException):
        SftConfig(p=1.5)
    with pytest.raises(SftConfigException):
        SftConfig(rho=0.0)
    with pytest.raises(SftConfigException):
        SftConfig(S=0)


def test_admission_is_gated_by_accuracy(questions):
    buf = SftBuffer(cfg.S, cfg.p)
    q0, q1, q2 = questions[:3]
    assert maybe_admit(buf, group_for(q0, 0.0), teacher_solve(q0), cfg)
    assert maybe_admit(buf, group_for(q1, 0.25), teacher_solve(q1), cfg)
    assert not maybe_admit(buf, group_for(q2, 0.5), teacher_solve(q2), cfg)
    assert len(buf) == 2
    assert buf.entries[1].acc_at_admission == 0.25


def test_no_duplicate_admission(questions):
    buf = SftBuffer(cfg.S, cfg.p)
    q = questions[0]
    assert maybe_admit(buf, group_for(q, 0.0), teacher_solve(q), cfg)
    assert not maybe_admit(buf, group_for(q, 0.0), teacher_solve(q), cfg)
    assert q in buf and len(buf) == 1


def test_mismatched_demonstration(questions):
    buf = SftBuffer(cfg.S, cfg.p)
    with pytest.raises(ValueError):
        maybe_admit(buf, group_for(questions[0], 0.0), teacher_solve(questions[1]), cfg)


def test_buffer_rejects_invariant_violations(questions):
    buf = SftBuffer(cfg.S, cfg.p)
    q = questions[0]
    wrong = str((int(q.answer) + 1) % 5)
    with pytest.raises(BufferInvariantException):
        buf.append(BufferEntry(question=q, solution=VOCAB.encode(["####", wrong, "<eos>"]),
                               acc_at_admission=0.0))
    with pytest.raises(BufferInvariantException):
        buf.append(entry(q, acc=0.5))
    assert len(buf) == 0


def test_switch_at_S(questions):
    buf = SftBuffer(cfg.S, cfg.p)
    for q in questions[:2]:
        buf.append(entry(q))
    assert not should_switch(buf)
    buf.append(entry(questions[2]))
    assert should_switch(buf)


def test_buffer_round_trip(questions):
    buf = SftBuffer(cfg.S, cfg.p)
    for q in questions[:3]:
        buf.append(entry(q, acc=0.25))
    again = SftBuffer.from_list(cfg.S, cfg.p, buf.to_list())
    assert again.entries == buf.entries


def test_select_high_entropy():
    mask, tau = select_high_entropy([3.0, 1.0, 2.0, 2.0], 0.5)
    np.testing.assert_array_equal(mask, [1, 0, 1, 0])
    assert tau == 2.0
    mask, _ = select_high_entropy([0.1, 0.2, 0.3], 0.2)
    np.testing.assert_array_equal(mask, [0, 0, 1])
    mask, _ = select_high_entropy([0.5, 0.5], 1.0)
    np.testing.assert_array_equal(mask, [1, 1])
    with pytest.raises(SftConfigException):
        select_high_entropy([1.0], 0.0)


@pytest.mark.parametrize("rho", [Fraction(1, 10), Fraction(1, 5), Fraction(1, 2), Fraction(1)])
@settings(max_examples=1000, deadline=None)
@given(h=st.lists(st.floats(0.0, 3.0), min_size=1, max_size=40))
def test_high_entropy_selection_count_and_order(rho, h):
    mask, tau = select_high_entropy(h, float(rho))
    h = np.asarray(h)
    picked = mask.astype(bool)
    assert picked.sum() == math.ceil(rho * len(h))
    assert tau == h[picked].min()
    if not picked.all():
        assert h[picked].min() >= h[~picked].max()


def test_sft_loss_matches_masked_mean(model, params, questions):
    e = entry(questions[0])
    mask = np.zeros(len(e.solution))
    mask[[0, 2]] = 1.0
    tape = Tape()
    loss = sft_loss(model, tape, tape.leaves(params), e, mask)
    lp = model.token_log_probs(params, e.question.prompt, e.solution)
    np.testing.assert_allclose(loss.value, [-(lp[0] + lp[2]) / len(e.solution)])


def test_degenerate_masks(model, params, questions):
    e = entry(questions[0])
    tape = Tape()
    pv = tape.leaves(params)
    with pytest.raises(DegenerateMaskException):
        sft_loss(model, tape, pv, e, np.zeros(len(e.solution)))
    with pytest.raises(DegenerateMaskException):
        sft_loss(model, tape, pv, e, np.ones(len(e.solution) + 1))


def test_masked_tokens_carry_no_gradient(model, params, questions):
    # with a one-token mask only that token's log-probability drives the update
    e = entry(questions[0])
    mask = np.zeros(len(e.solution))
    mask[0] = 1.0
    tape = Tape()
    pv = tape.leaves(params)
    g_masked = tape.backward(sft_loss(model, tape, pv, e, mask))
    short = BufferEntry(question=e.question, solution=e.solution[:1], acc_at_admission=0.0)
    tape = Tape()
    pv = tape.leaves(params)
    g_short = tape.backward(sft_loss(model, tape, pv, short, np.ones(1)))
    for n in params:
        np.testing.assert_allclose(g_masked[n] * len(e.solution), g_short[n], atol=1e-12)


def test_batch_step_freezes(model, params, questions):
    entries = [entry(q) for q in questions[:2]]
    frozen = {"head", "embed"}
    mask = FreezeMask({n: int(n in frozen) for n in model.names})
    new, stats = sft_batch_step(model, params, entries, cfg, AdamW(params), freeze_mask=mask)
    for n in model.names:
        if n in frozen:
            assert new[n] is params[n]
    assert not np.array_equal(new["pos"], params["pos"])
    assert stats["frozen_count"] == 2 and stats["n_entries"] == 2


def test_batch_step_lowers_loss(model, params, questions):
    entries = [entry(q) for q in questions[:2]]
    c = SftConfig(rho=1.0, learning_rate=1e-3)
    _, before = sft_batch_step(model, params, entries, c, AdamW(params), entropy_selection=False)
    new, _ = sft_batch_step(model, params, entries, c, AdamW(params), entropy_selection=False)
    _, after = sft_batch_step(model, new, entries, c, AdamW(new), entropy_selection=False)
    assert after["loss"] < before["loss"]


def test_entropy_selection_counts(model, params, questions):
    entries = [entry(q) for q in questions[:2]]
    _, s = sft_batch_step(model, params, entries, cfg, AdamW(params))
    expected = sum(int(np.ceil(0.5 * len(e.solution))) for e in entries)
    assert s["selected_tokens"] == expected
    _, s = sft_batch_step(model, params, entries, cfg, AdamW(params), entropy_selection=False)
    assert s["selected_tokens"] == sum(len(e.solution) for e in entries)


def test_phase_drains_buffer(model, params, questions):
    buf = SftBuffer(cfg.S, cfg.p)
    for q in questions[:3]:
        buf.append(entry(q))
    new, stats = sft_phase(model, params, buf, cfg, AdamW(params))
    assert len(buf) == 0
    assert len(stats) == 2
    assert [s["n_entries"] for s in stats] == [2, 1]


def test_phase_needs_full_buffer(model, params, questions):
    buf = SftBuffer(cfg.S, cfg.p)
    buf.append(entry(questions[0]))
    with pytest.raises(SFTPhaseException):
        sft_phase(model, params, buf, cfg, AdamW(params))


def test_phase_failure_restores_state(model, params, questions, monkeypatch):
    buf = SftBuffer(cfg.S, cfg.p)
    for q in questions[:3]:
        buf.append(entry(q))
    optimizer = AdamW(params)
    calls = []

    import mifo.sft as sft_module
    real_step = sft_module.sft_batch_step

    def failing(*args, **kwargs):
        calls.append(1)
        if len(calls) == 2:
            raise EngineNonFiniteException("boom")
        return real_step(*args, **kwargs)

    monkeypatch.setattr(sft_module, "sft_batch_step", failing)
    with pytest.raises(SFTPhaseException):
        sft_phase(model, params, buf, cfg, optimizer)
    assert len(buf) == 3
    assert all(t == 0 for t in optimizer.t.values())


@pytest.mark.parametrize("masked", [False, True])
def test_sft_loss_gradients(model, params, questions, masked):
    e = entry(questions[1])
    mask = np.ones(len(e.solution))
    if masked:
        mask[1::2] = 0.0

    def f(tape, pv):
        return sft_loss(model, tape, pv, e, mask)

    report = finite_diff_check(f, params, coords_per_leaf=3, tol=1e-3)
    assert report.passed, report.to_frame()


@pytest.mark.parametrize("masked", [False, True])
@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_sft_loss_gradients_at_random_points(masked, seed):
    r = np.random.default_rng(seed)
    model = TinyTransformer(ModelConfig(**TINY_MODEL, init_seed=int(r.integers(1000))), eos_id=VOCAB.eos)
    params = model.init()
    task = TaskConfig(**TINY_TASK)
    e = entry(make_questions(task, [int(r.choice(task.train_seeds))])[0])
    mask = np.ones(len(e.solution))
    if masked:
        mask = r.integers(0, 2, size=len(e.solution)).astype(float)
        mask[r.integers(len(mask))] = 1.0

    def f(tape, pv):
        return sft_loss(model, tape, pv, e, mask)

    report = finite_diff_check(f, params, coords_per_leaf=4, seed=seed, tol=1e-4)
    assert report.passed, report.to_frame()
