import math
import os
from dataclasses import replace

import pytest
import numpy as np

from mifo.checkpoint import load_checkpoint
from mifo.config import ExperimentConfig
from mifo.experiment import MifoRun, _force_answer, evaluate, run, summarize, warm_start
from mifo.metrics import audit_metrics, read_records
from mifo.sft import SFTPhaseException
from mifo.tasks import VOCAB, load_questions, make_questions, teacher_solve

from tests.conftest import tiny_config_dict


def config(tmp_path, name="run", **overrides):
    return ExperimentConfig.from_dict(tiny_config_dict(tmp_path, output_dir=str(tmp_path / name),
                                                       **overrides))


def records(cfg):
    return read_records(os.path.join(cfg.output_dir, "metrics.jsonl"))


def test_evaluate_bounds(model, params, task):
    qs = make_questions(task, task.eval_seeds)
    res = evaluate(model, params, qs, k_samples=2, temperature=0.6, seed=0, max_new=8)
    assert res.n_questions == len(qs) and res.k == 2
    assert 0.0 <= res.pass_at_1 <= 1.0 and 0.0 <= res.avg_at_k <= 1.0
    assert res.pass_ci_low <= res.pass_at_1 <= res.pass_ci_high
    assert res.avg_ci_low <= res.avg_at_k <= res.avg_ci_high
    with pytest.raises(ValueError):
        evaluate(model, params, qs, k_samples=0)


def test_answer_forcing_always_answers(model, params, task):
    qs = make_questions(task, task.eval_seeds)
    res = evaluate(model, params, qs, k_samples=1, max_new=4, answer_forcing=True)
    assert res.answer_forcing
    assert 0.0 <= res.avg_at_k <= 1.0
    forced = _force_answer(model, params, qs[0], (1, 2, 3), 1.0, seed=0)
    assert forced[:3] == (1, 2, 3) and forced[3] == VOCAB.answer_delim
    assert forced[4] in VOCAB.digit_ids[:5]


def test_warm_start_is_deterministic(tmp_path):
    cfg = config(tmp_path)
    _, a = warm_start(cfg)
    _, b = warm_start(cfg)
    for n in a:
        np.testing.assert_array_equal(a[n], b[n])


def test_rl_only_run(tmp_path):
    cfg = config(tmp_path, mode="rl_only")
    summary = run(cfg, show=False)
    assert list(summary.index) == [0]
    recs = records(cfg)
    assert {r["phase"] for r in recs} == {"rl", "eval"}
    # 12 questions in rollout batches of 4, two updates each
    assert sum(r["phase"] == "rl" for r in recs) == 6
    assert all(not r["admissions"] for r in recs if r["phase"] == "rl")
    assert os.path.exists(os.path.join(cfg.output_dir, "final.safetensors"))
    assert os.path.exists(os.path.join(cfg.output_dir, "base.safetensors"))
    dumped = load_questions(os.path.join(cfg.output_dir, "questions_eval.jsonl"))
    assert dumped == make_questions(cfg.task, cfg.task.eval_seeds)


def test_mifo_run_interleaves(tmp_path):
    # p = 1 admits every question, so each rollout batch fills the buffer past S = 2
    cfg = config(tmp_path)
    mifo_run = MifoRun(cfg)
    mifo_run.run()
    recs = records(cfg)
    sft = [r for r in recs if r["phase"] == "sft"]
    assert sft and all(r["source"] == "buffer" for r in sft)
    assert {r["interval_index"] for r in sft} == {0, 1, 2}
    assert all(r["frozen_count"] == 9 for r in sft)
    assert all(r["frozen_bit_identical"] for r in sft if "frozen_bit_identical" in r)
    assert audit_metrics(os.path.join(cfg.output_dir, "metrics.jsonl"), p=1.0, S=2,
                         k=cfg.ledger.k, d=len(mifo_run.params)).empty
    steps = [r["step"] for r in recs]
    assert steps == sorted(steps) and len(set(steps)) == len(steps)


def test_mifo_respects_accuracy_gate(tmp_path):
    cfg = config(tmp_path, sft={"p": 0.0, "rho": 0.5, "S": 2, "learning_rate": 1e-3,
                                "batch_size": 2})
    MifoRun(cfg).run()
    for r in records(cfg):
        for adm in r.get("admissions", []):
            assert adm["acc"] == 0.0 and adm["verified"]


def test_interleave_does_not_freeze(tmp_path):
    cfg = config(tmp_path, mode="interleave")
    MifoRun(cfg).run()
    sft = [r for r in records(cfg) if r["phase"] == "sft"]
    assert sft and all(r["frozen_count"] == 0 for r in sft)


def test_sft_only_run(tmp_path):
    cfg = config(tmp_path, mode="sft_only")
    MifoRun(cfg).run()
    sft = [r for r in records(cfg) if r["phase"] == "sft"]
    assert len(sft) == 6
    assert all(r["source"] == "demonstrations" for r in sft)


def test_sft_then_rl_schedule(tmp_path):
    cfg = config(tmp_path, mode="sft_then_rl")
    MifoRun(cfg).run()
    recs = records(cfg)
    phases = [r["phase"] for r in recs if r["phase"] != "eval"]
    assert phases == ["sft"] * 6 + ["rl"] * 6
    assert all(r["interval_index"] == 1 for r in recs if r["phase"] == "rl")


def test_forgetting_records(tmp_path):
    cfg = config(tmp_path, eval_around_sft=True)
    MifoRun(cfg).run()
    forgetting = [r for r in records(cfg) if r.get("when") == "forgetting"]
    assert forgetting
    for r in forgetting:
        scores = r["eval_scores"]
        assert r["forgetting_drop"] == pytest.approx(scores["pre_sft_score"] - scores["post_sft_score"])


def test_runs_are_deterministic(tmp_path):
    a, b = config(tmp_path, "a"), config(tmp_path, "b")
    MifoRun(a).run()
    MifoRun(b).run()
    assert records(a) == records(b)
    pa = load_checkpoint(os.path.join(a.output_dir, "final.safetensors")).params
    pb = load_checkpoint(os.path.join(b.output_dir, "final.safetensors")).params
    for n in pa:
        np.testing.assert_array_equal(pa[n], pb[n])


def test_resume_matches_uninterrupted_run(tmp_path):
    full = config(tmp_path, "full", checkpoint_every=1)
    MifoRun(full).run()
    ckpt = os.path.join(full.output_dir, "ckpt_000001.safetensors")
    assert os.path.exists(ckpt)
    expected = records(full)
    final = load_checkpoint(os.path.join(full.output_dir, "final.safetensors")).params

    resumed = MifoRun.resume(ckpt)
    assert resumed.units_done == 1
    resumed.run()
    assert records(full) == expected
    again = load_checkpoint(os.path.join(full.output_dir, "final.safetensors")).params
    for n in final:
        np.testing.assert_array_equal(final[n], again[n])


def test_summarize(tmp_path):
    cfg = config(tmp_path, mode="rl_only", epochs=2)
    MifoRun(cfg).run()
    df = summarize(os.path.join(cfg.output_dir, "metrics.jsonl"))
    assert list(df.index) == [0, 1]
    assert {"pass@1", "avg@2", "mean_response_length"} <= set(df.columns)


@pytest.mark.slow
def test_warmup_raises_demonstration_likelihood():
    cfg = ExperimentConfig.from_json("configs/toy.json")
    model, warmed = warm_start(cfg)
    _, fresh = warm_start(replace(cfg, warmup=replace(cfg.warmup, steps=0)))
    short = replace(cfg.task, max_chain=1)
    demos = [teacher_solve(q) for q in make_questions(short, range(20))]

    def total(params):
        return sum(model.token_log_probs(params, d.question.prompt, d.solution).sum() for d in demos)

    assert total(warmed) > total(fresh)


@pytest.mark.slow
def test_toy_mifo_run_is_clean(tmp_path, monkeypatch):
    monkeypatch.setenv("MIFO_OUTPUT_DIR", str(tmp_path / "toy"))
    cfg = ExperimentConfig.from_json("configs/toy.json")
    assert cfg.epochs == 3
    mifo_run = MifoRun(cfg)
    mifo_run.run()
    d = len(mifo_run.params)
    sft = [r for r in records(cfg) if r["phase"] == "sft"]
    assert sft
    assert all(r["frozen_count"] == math.ceil(0.5 * d) for r in sft)
    last = [r for r in sft if "frozen_bit_identical" in r]
    assert len(last) == len({r["interval_index"] for r in sft})
    assert all(r["frozen_bit_identical"] for r in last)
    assert audit_metrics(os.path.join(cfg.output_dir, "metrics.jsonl"), cfg.sft.p, cfg.sft.S,
                         k=cfg.ledger.k, d=d).empty


def toy_run(tmp_path, mode, seed):
    cfg = ExperimentConfig.from_json("configs/toy.json")
    cfg = replace(cfg, mode=mode, master_seed=seed, eval_around_sft=True,
                  output_dir=str(tmp_path / f"{mode}_{seed}"))
    MifoRun(cfg).run()
    recs = records(cfg)
    drops = [r["forgetting_drop"] for r in recs if r.get("when") == "forgetting"]
    final = [r for r in recs if r.get("when") == "epoch_end"][-1]
    return drops, final["eval_scores"][f"avg@{cfg.eval_k}"]


@pytest.mark.slow
def test_freezing_reduces_forgetting(tmp_path):
    drops = {"mifo": [], "interleave": []}
    finals = {"mifo": [], "interleave": []}
    for seed in range(5):
        for mode in drops:
            d, final = toy_run(tmp_path, mode, seed)
            drops[mode].extend(d)
            finals[mode].append(final)
    assert drops["mifo"] and drops["interleave"]
    # avg@k on the toy eval set moves in steps of 1 / (k * n_eval), so medians may tie
    assert np.median(drops["mifo"]) <= np.median(drops["interleave"])
    assert np.median(finals["mifo"]) >= np.median(finals["interleave"])


def test_rl_and_sft_keep_separate_moments(tmp_path):
    cfg = config(tmp_path, mode="interleave")
    mifo_run = MifoRun(cfg)
    mifo_run.run()
    recs = records(cfg)
    n_sft = sum(r["phase"] == "sft" for r in recs)
    n_rl = sum(r["phase"] == "rl" for r in recs)
    assert n_sft > 0
    assert set(mifo_run.sft_optimizer.t.values()) == {n_sft}
    assert max(mifo_run.rl_optimizer.t.values()) <= n_rl


def test_forgetting_scores_share_a_seed(tmp_path, monkeypatch):
    # an SFT phase that leaves the policy alone must show no forgetting at all
    def unchanged(model, params, buffer, cfg, optimizer, freeze_mask=None, entropy_selection=True):
        buffer.drain()
        return params, []

    monkeypatch.setattr("mifo.experiment.sft_phase", unchanged)
    cfg = config(tmp_path, mode="interleave", eval_around_sft=True)
    MifoRun(cfg).run()
    forgetting = [r for r in records(cfg) if r.get("when") == "forgetting"]
    assert forgetting
    assert all(r["forgetting_drop"] == 0.0 for r in forgetting)


def test_failed_sft_phase_keeps_ledger_unfolded(tmp_path, monkeypatch):
    def failing(*args, **kwargs):
        raise SFTPhaseException("diverged")

    monkeypatch.setattr("mifo.experiment.sft_phase", failing)
    cfg = config(tmp_path)
    mifo_run = MifoRun(cfg)
    with pytest.raises(SFTPhaseException):
        mifo_run.run()
    ledger = load_checkpoint(os.path.join(cfg.output_dir, "last_good.safetensors")).manifest["ledger"]
    assert ledger["interval_index"] == 0 and ledger["history"] == []
    assert mifo_run.ledger.interval_index == 0
