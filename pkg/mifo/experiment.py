"""RL->SFT interval scheduling, evaluation and resumable runs."""

from __future__ import annotations

import logging
import math
import os
import time
import warnings
from dataclasses import asdict, dataclass, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from statsmodels.stats.proportion import proportion_confint

from mifo.checkpoint import Checkpoint, load_checkpoint, load_params, save_checkpoint
from mifo.config import ExperimentConfig
from mifo.engine import NamedParams
from mifo.grpo import response_seeds, rl_rollout_batch
from mifo.ledger import ImportanceLedger
from mifo.metrics import MetricsRecord, MetricsWriter, read_records
from mifo.model import TinyTransformer, TokenSequence
from mifo.optim import AdamW
from mifo.seeding import derive_seed, stream_rng
from mifo.sft import (BufferEntry, SftBuffer, SftConfig, SFTPhaseException, maybe_admit,
                      sft_batch_step, sft_phase, should_switch)
from mifo.tasks import (VOCAB, Question, dump_questions, extract, make_questions,
                        question_modulus, reward, teacher_solve)

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.jsonl"
BASE_CHECKPOINT = "base.safetensors"
EVAL_QUESTIONS_FILE = "questions_eval.jsonl"
FINAL_CHECKPOINT = "final.safetensors"


@dataclass
class EvalResult:
    split: str
    n_questions: int
    k: int
    pass_at_1: float
    avg_at_k: float
    mean_response_length: float
    pass_ci_low: float
    pass_ci_high: float
    avg_ci_low: float
    avg_ci_high: float
    answer_forcing: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _wilson(successes: int, n: int) -> Tuple[float, float]:
    low, high = proportion_confint(successes, n, alpha=0.05, method="wilson")
    return float(low), float(high)


def _force_answer(model: TinyTransformer, params: NamedParams, q: Question,
                  response: TokenSequence, temperature: float, seed: int) -> TokenSequence:
    """Cut the response before its first delimiter or end token, then sample the answer digits."""
    stop = [i for i, t in enumerate(response) if t in (VOCAB.answer_delim, VOCAB.eos)]
    cut = tuple(response[:stop[0]] if stop else response)
    m = question_modulus(q)
    n_digits = len(str(m - 1))
    allowed = VOCAB.digit_ids[:m] if m <= 10 else VOCAB.digit_ids
    room = model.config.max_seq_len - len(q.prompt) - 1 - (n_digits - 1)
    cut = cut[:max(room, 0)]
    context = tuple(q.prompt) + cut + (VOCAB.answer_delim,)
    answer = model.sample_response(params, context, temperature, n_digits, seed, allowed=allowed)
    return cut + (VOCAB.answer_delim,) + answer


def evaluate(model: TinyTransformer, params: NamedParams, questions: Sequence[Question],
             k_samples: int, temperature: float = 0.6, seed: int = 0, max_new: int = 32,
             answer_forcing: bool = False, split: str = "eval") -> EvalResult:
    """pass@1 (greedy) and avg@k (k samples per question at `temperature`).

    Args:
        model (TinyTransformer): the policy architecture
        params (NamedParams): the policy parameters
        questions (Sequence[Question]): the split to score
        k_samples (int): samples per question for avg@k, at least 1
        temperature (float): sampling temperature for avg@k. Defaults to 0.6.
        seed (int): seed for the sampled decodes
        max_new (int): generation limit per response
        answer_forcing (bool): append the answer delimiter to every response and sample
            one answer from the answer alphabet. Defaults to False.
        split (str): label carried into the result

    Returns:
        EvalResult: accuracies with Wilson 95% intervals and the mean response length
    """
    if k_samples < 1:
        raise ValueError("k_samples must be at least 1")
    if not questions:
        raise ValueError("no questions to evaluate")
    seeds = response_seeds(seed, len(questions) * (k_samples + 1))
    greedy_hits, sample_hits, lengths = 0, 0, []
    for i, q in enumerate(questions):
        qseeds = seeds[i * (k_samples + 1):(i + 1) * (k_samples + 1)]
        o = model.sample_response(params, q.prompt, 0.0, max_new, 0)
        if answer_forcing:
            o = _force_answer(model, params, q, o, 0.0, qseeds[0])
        greedy_hits += reward(o, q)
        lengths.append(len(o))
        for s in qseeds[1:]:
            o = model.sample_response(params, q.prompt, temperature, max_new, s)
            if answer_forcing:
                o = _force_answer(model, params, q, o, temperature, s)
            sample_hits += reward(o, q)
    n = len(questions)
    p_low, p_high = _wilson(greedy_hits, n)
    a_low, a_high = _wilson(sample_hits, n * k_samples)
    return EvalResult(split=split, n_questions=n, k=k_samples, pass_at_1=greedy_hits / n,
                      avg_at_k=sample_hits / (n * k_samples),
                      mean_response_length=float(np.mean(lengths)), pass_ci_low=p_low,
                      pass_ci_high=p_high, avg_ci_low=a_low, avg_ci_high=a_high,
                      answer_forcing=answer_forcing)


def demonstration_entries(questions: Sequence[Question]) -> List[BufferEntry]:
    return [BufferEntry(question=q, solution=teacher_solve(q).solution, acc_at_admission=0.0)
            for q in questions]


def warm_start(config: ExperimentConfig) -> Tuple[TinyTransformer, NamedParams]:
    """The shared starting policy: `init_checkpoint` if set, else init plus short-chain warmup."""
    model = TinyTransformer(config.model, eos_id=VOCAB.eos)
    if config.init_checkpoint:
        params = load_params(config.init_checkpoint)
        model.check_params(params)
        return model, params
    init_seed = derive_seed(config.master_seed, "init", config.model.init_seed)
    params = TinyTransformer(replace(config.model, init_seed=init_seed)).init()
    w = config.warmup
    if w.steps == 0:
        return model, params
    max_chain = min(w.max_chain, config.task.max_chain)
    short = replace(config.task, min_chain=min(config.task.min_chain, max_chain),
                    max_chain=max_chain)
    seeds = np.array(list(config.task.train_seeds))
    optimizer = AdamW(params)
    sft_cfg = SftConfig(learning_rate=w.learning_rate, batch_size=w.batch_size)
    for step in range(w.steps):
        batch = stream_rng(config.master_seed, "warmup", step).choice(seeds, size=w.batch_size)
        entries = demonstration_entries(make_questions(short, batch.tolist()))
        params, stats = sft_batch_step(model, params, entries, sft_cfg, optimizer,
                                       entropy_selection=False)
        if step % 50 == 0:
            logger.debug("warmup step %d loss %.4f", step, stats["loss"])
    logger.info("warmup done after %d steps", w.steps)
    return model, params


class MifoRun:

    """A resumable training run. Call `run()` to execute every remaining epoch.

    Epochs are scheduled per mode: RL epochs walk the train questions in rollout
    batches, admitting hard questions into the SFT buffer and running an SFT
    phase whenever the buffer reaches S; SFT epochs (sft_only, and the first
    epoch of sft_then_rl) train once over all procedural demonstrations. RL and
    SFT keep separate AdamW moments, so an RL interval's update never carries
    SFT momentum.

    Example:

        >>> from mifo.config import ExperimentConfig
        >>> from mifo.experiment import MifoRun
        >>> cfg = ExperimentConfig.from_json("configs/toy.json")
        >>> summary = MifoRun(cfg).run()
    """

    def __init__(self, config: ExperimentConfig, params: Optional[NamedParams] = None) -> None:
        """
        Args:
            config (ExperimentConfig): the run configuration; mode gating is applied here
            params (NamedParams, optional): starting policy. Defaults to `warm_start(config)`.
        """
        self.config = config.resolved()
        cfg = self.config
        os.makedirs(cfg.output_dir, exist_ok=True)
        self.metrics_path = os.path.join(cfg.output_dir, METRICS_FILE)
        self.train_questions = make_questions(cfg.task, cfg.task.train_seeds)
        self.eval_questions = make_questions(cfg.task, cfg.task.eval_seeds)
        self.demos = {q.seed: teacher_solve(q) for q in self.train_questions}
        if params is None:
            self.model, params = warm_start(cfg)
            save_checkpoint(os.path.join(cfg.output_dir, BASE_CHECKPOINT),
                            Checkpoint(params=params, manifest=self._config_manifest()))
            dump_questions(self.eval_questions, os.path.join(cfg.output_dir, EVAL_QUESTIONS_FILE))
        else:
            self.model = TinyTransformer(cfg.model, eos_id=VOCAB.eos)
            self.model.check_params(params)
        self.params = params
        self.rl_start = dict(params)
        self.rl_optimizer = AdamW(params, weight_decay=cfg.grpo.weight_decay)
        self.sft_optimizer = AdamW(params)
        self.ledger = ImportanceLedger.from_config(self.model.names, cfg.ledger)
        self.buffer = SftBuffer(cfg.sft.S, cfg.sft.p)
        if cfg.mode == "sft_only":
            self.schedule = ["sft"] * cfg.epochs
        elif cfg.mode == "sft_then_rl":
            self.schedule = ["sft"] + ["rl"] * cfg.epochs
        else:
            self.schedule = ["rl"] * cfg.epochs
        self.step = 0
        self.epoch = 0
        self.unit = 0
        self.units_done = 0
        self.interval_index = 0
        self.evals_done = 0
        self.sft_samples_used = 0
        self.rl_questions_used = 0
        self.sft_phases = 0
        self.writer: Optional[MetricsWriter] = None
        self._resume_step: Optional[int] = None
        if self.uses_buffer and cfg.sft.S > len(self.train_questions):
            warnings.warn(f"S={cfg.sft.S} exceeds the {len(self.train_questions)} train questions; "
                          "the buffer can never trigger an SFT phase.")

    @property
    def uses_buffer(self) -> bool:
        return self.config.uses_buffer

    def _config_manifest(self) -> Dict[str, Any]:
        d = self.config.to_dict()
        d.pop("output_dir")
        return {"config": d}

    # -- metrics ---------------------------------------------------------

    def _emit(self, phase: str, **fields: Any) -> None:
        extra = fields.pop("extra", {})
        wall = time.time() if self.config.log_wall_time else None
        record = MetricsRecord(step=self.step, phase=phase, interval_index=self.interval_index,
                               buffer_size=fields.pop("buffer_size", len(self.buffer)),
                               wall_time=wall, extra=extra, **fields)
        self.writer.write(record)
        self.step += 1

    def evaluate_now(self, when: str, split: str = "eval", seed: Optional[int] = None) -> EvalResult:
        cfg = self.config
        questions = self.eval_questions if split == "eval" else self.train_questions
        if seed is None:
            seed = derive_seed(cfg.master_seed, "eval", self.evals_done)
            self.evals_done += 1
        result = evaluate(self.model, self.params, questions, cfg.eval_k, cfg.eval_temperature,
                          seed=seed, max_new=cfg.grpo.max_new, split=split)
        self._emit("eval", eval_scores={"pass@1": result.pass_at_1, f"avg@{cfg.eval_k}": result.avg_at_k},
                   mean_response_length=result.mean_response_length,
                   extra={"when": when, "epoch": self.epoch, "split": split,
                          "pass_ci": [result.pass_ci_low, result.pass_ci_high],
                          "avg_ci": [result.avg_ci_low, result.avg_ci_high]})
        logger.info("eval (%s, epoch %d): pass@1 %.3f avg@%d %.3f", when, self.epoch,
                    result.pass_at_1, cfg.eval_k, result.avg_at_k)
        return result

    # -- units -----------------------------------------------------------

    def _n_units(self, epoch: int) -> int:
        size = (self.config.grpo.rollout_batch_size if self.schedule[epoch] == "rl"
                else self.config.sft.batch_size)
        return math.ceil(len(self.train_questions) / size)

    def _order(self, epoch: int) -> np.ndarray:
        return stream_rng(self.config.master_seed, "order", epoch).permutation(
            len(self.train_questions))

    def _rl_unit(self, epoch: int, unit: int) -> None:
        cfg = self.config
        R = cfg.grpo.rollout_batch_size
        idx = self._order(epoch)[unit * R:(unit + 1) * R]
        questions = [self.train_questions[i] for i in idx]
        seeds = [derive_seed(cfg.master_seed, "rollout", epoch, unit, i) for i in range(len(questions))]
        self.params, groups, stats = rl_rollout_batch(self.model, self.params, questions, cfg.grpo,
                                                      self.rl_optimizer, seeds)
        self.rl_questions_used += len(questions)
        admissions = []
        if self.uses_buffer:
            for g in groups:
                demo = self.demos[g.question.seed]
                if maybe_admit(self.buffer, g, demo, cfg.sft):
                    admissions.append({"seed": g.question.seed, "acc": g.acc,
                                       "verified": extract(demo.solution) == g.question.answer})
        for j, s in enumerate(stats):
            self._emit("rl", loss=s["loss"], mean_reward=s["mean_reward"], mean_acc=s["mean_acc"],
                       frozen_count=0, mean_response_length=s["mean_response_length"],
                       extra={"epoch": epoch, "batch": unit, "update": j,
                              "batch_solved_rate": s["batch_solved_rate"],
                              "batch_all_solved_rate": s["batch_all_solved_rate"],
                              "admissions": admissions if j == 0 else [],
                              "rl_questions_used": self.rl_questions_used,
                              "sft_samples_used": self.sft_samples_used})
        if self.uses_buffer and should_switch(self.buffer):
            self._sft_interval()

    def _sft_interval(self) -> None:
        cfg = self.config
        ledger_before = ImportanceLedger.from_dict(self.ledger.to_dict())
        mask = self.ledger.close_interval(self.rl_start, self.params) if cfg.freeze else None
        # pre and post SFT scores share one sampling seed
        eval_seed = derive_seed(cfg.master_seed, "forgetting", self.interval_index)
        pre = self.evaluate_now("pre_sft", seed=eval_seed) if cfg.eval_around_sft else None
        phase_start = len(self.buffer)
        before = self.params
        try:
            self.params, stats = sft_phase(self.model, self.params, self.buffer, cfg.sft,
                                           self.sft_optimizer, mask, cfg.entropy_selection)
        except SFTPhaseException:
            self.ledger = ledger_before
            self.save(os.path.join(cfg.output_dir, "last_good.safetensors"))
            raise
        frozen = sorted(mask.frozen) if mask is not None else []
        identical = all(np.array_equal(before[n], self.params[n]) for n in frozen)
        for j, s in enumerate(stats):
            last = j == len(stats) - 1
            extra = {"source": "buffer", "phase_start_buffer": phase_start,
                     "selected_tokens": s["selected_tokens"], "n_entries": s["n_entries"]}
            if last:
                extra["frozen_bit_identical"] = identical
            self._emit("sft", loss=s["loss"], frozen_count=s["frozen_count"],
                       buffer_size=max(phase_start - (j + 1) * cfg.sft.batch_size, 0), extra=extra)
        self.sft_samples_used += phase_start
        self.sft_phases += 1
        self.ledger.unfreeze_all()
        self.rl_start = dict(self.params)
        self.interval_index += 1
        if pre is not None:
            post = self.evaluate_now("post_sft", seed=eval_seed)
            key = f"avg@{cfg.eval_k}"
            self._emit("eval", eval_scores={"pre_sft_score": pre.avg_at_k,
                                            "post_sft_score": post.avg_at_k},
                       extra={"when": "forgetting", "metric": key,
                              "forgetting_drop": pre.avg_at_k - post.avg_at_k})

    def _demo_unit(self, epoch: int, unit: int) -> None:
        cfg = self.config
        B = cfg.sft.batch_size
        idx = self._order(epoch)[unit * B:(unit + 1) * B]
        entries = demonstration_entries([self.train_questions[i] for i in idx])
        self.params, s = sft_batch_step(self.model, self.params, entries, cfg.sft, self.sft_optimizer,
                                        entropy_selection=cfg.entropy_selection)
        self.sft_samples_used += len(entries)
        self._emit("sft", loss=s["loss"], frozen_count=0, buffer_size=0,
                   extra={"source": "demonstrations", "epoch": epoch, "batch": unit,
                          "selected_tokens": s["selected_tokens"], "n_entries": s["n_entries"]})

    # -- persistence -----------------------------------------------------

    def manifest(self) -> Dict[str, Any]:
        m = self._config_manifest()
        m.update({
            "step": self.step, "epoch": self.epoch, "unit": self.unit,
            "units_done": self.units_done, "interval_index": self.interval_index,
            "evals_done": self.evals_done, "sft_samples_used": self.sft_samples_used,
            "rl_questions_used": self.rl_questions_used, "sft_phases": self.sft_phases,
            "ledger": self.ledger.to_dict(), "buffer": self.buffer.to_list(),
            "adam_t": [self.rl_optimizer.t[n] for n in self.model.names],
            "sft_adam_t": [self.sft_optimizer.t[n] for n in self.model.names],
        })
        return m

    def save(self, path: str) -> None:
        save_checkpoint(path, Checkpoint(params=self.params, manifest=self.manifest(),
                                         adam_m=self.rl_optimizer.m, adam_v=self.rl_optimizer.v,
                                         sft_adam_m=self.sft_optimizer.m,
                                         sft_adam_v=self.sft_optimizer.v,
                                         rl_start=self.rl_start))

    @classmethod
    def resume(cls, path: str, output_dir: Optional[str] = None) -> "MifoRun":
        """Rebuild a run from a checkpoint; metrics after the checkpoint are discarded."""
        ckpt = load_checkpoint(path)
        m = ckpt.manifest
        d = dict(m["config"])
        d["output_dir"] = output_dir or os.path.dirname(os.path.abspath(path))
        run = cls(ExperimentConfig.from_dict(d), params=ckpt.params)
        names = run.model.names
        run.rl_start = ckpt.rl_start
        run.rl_optimizer.m = ckpt.adam_m
        run.rl_optimizer.v = ckpt.adam_v
        run.rl_optimizer.t = dict(zip(names, m["adam_t"]))
        run.sft_optimizer.m = ckpt.sft_adam_m
        run.sft_optimizer.v = ckpt.sft_adam_v
        run.sft_optimizer.t = dict(zip(names, m["sft_adam_t"]))
        run.ledger = ImportanceLedger.from_dict(m["ledger"])
        run.buffer = SftBuffer.from_list(run.config.sft.S, run.config.sft.p, m["buffer"])
        for key in ("step", "epoch", "unit", "units_done", "interval_index", "evals_done",
                    "sft_samples_used", "rl_questions_used", "sft_phases"):
            setattr(run, key, int(m[key]))
        run._resume_step = run.step - 1
        return run

    # -- driver ----------------------------------------------------------

    def run(self) -> pd.DataFrame:
        """Execute every remaining epoch; returns one row per end-of-epoch evaluation."""
        cfg = self.config
        resuming = self._resume_step is not None
        self.writer = MetricsWriter(self.metrics_path, append=resuming,
                                    truncate_after=self._resume_step)
        try:
            while self.epoch < len(self.schedule):
                kind = self.schedule[self.epoch]
                while self.unit < self._n_units(self.epoch):
                    if kind == "rl":
                        self._rl_unit(self.epoch, self.unit)
                    else:
                        self._demo_unit(self.epoch, self.unit)
                    self.unit += 1
                    self.units_done += 1
                    if cfg.eval_every and self.units_done % cfg.eval_every == 0:
                        self.evaluate_now("periodic")
                    if cfg.checkpoint_every and self.units_done % cfg.checkpoint_every == 0:
                        self.save(os.path.join(cfg.output_dir, f"ckpt_{self.units_done:06d}.safetensors"))
                self.evaluate_now("epoch_end")
                if kind == "sft" and cfg.mode == "sft_then_rl":
                    self.interval_index += 1
                self.epoch += 1
                self.unit = 0
            self.save(os.path.join(cfg.output_dir, FINAL_CHECKPOINT))
        finally:
            self.writer.close()
        return summarize(self.metrics_path)


def summarize(metrics_path: str) -> pd.DataFrame:
    rows = [r for r in read_records(metrics_path)
            if r["phase"] == "eval" and r.get("when") == "epoch_end"]
    df = pd.DataFrame([{"epoch": r["epoch"], **r["eval_scores"],
                        "mean_response_length": r["mean_response_length"]} for r in rows])
    return df.set_index("epoch") if len(df) else df


def run(config: ExperimentConfig, resume: Optional[str] = None, show: bool = True) -> pd.DataFrame:
    """Train according to `config` and return the per-epoch evaluation table.

    Args:
        config (ExperimentConfig): the experiment
        resume (str, optional): checkpoint to continue from. Defaults to None.
        show (bool, optional): Whether to print the results. Defaults to True.

    Returns:
        pd.DataFrame: pass@1, avg@k and mean response length per epoch.

    Example:

        >>> from mifo.config import ExperimentConfig
        >>> from mifo.experiment import run
        >>> cfg = ExperimentConfig.from_dict({"mode": "rl_only", "epochs": 1})
        >>> run(cfg)
    """
    mifo_run = MifoRun.resume(resume) if resume else MifoRun(config)
    res_df = mifo_run.run()
    if show:
        print(res_df.to_markdown(floatfmt=".3f"))
    return res_df
