"""Probe experiments comparing SFT and RL updates of the same starting policy.

Both paradigms start from the warmed policy theta_0 and train for one epoch
over the same train questions at the same learning rate
(`ProbeConfig.learning_rate`); only their loss differs. SFT uses the procedural
demonstrations with a full-token loss, RL uses GRPO rollouts.
"""

from __future__ import annotations

import logging
import os
from dataclasses import replace
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from mifo.checkpoint import Checkpoint, load_params, save_checkpoint
from mifo.config import ExperimentConfig
from mifo.engine import NamedParams
from mifo.experiment import (BASE_CHECKPOINT, METRICS_FILE, demonstration_entries, evaluate,
                             warm_start)
from mifo.grpo import GradTransform, rl_rollout_batch
from mifo.ledger import rl_update_magnitudes
from mifo.metrics import MetricsRecord, MetricsWriter
from mifo.model import TinyTransformer
from mifo.optim import AdamW
from mifo.probes import (dr_comparison, layer_update_magnitude, online_grad_drop,
                         posthoc_prune, sample_margin_probes, selective_topk_drop)
from mifo.seeding import derive_seed, stream_rng
from mifo.sft import sft_batch_step
from mifo.tasks import VOCAB, make_questions, teacher_solve

logger = logging.getLogger(__name__)

SUBCOMMANDS = ("grad-drop", "prune", "magnitude", "selective-drop", "dr")
PARADIGMS = ("sft", "rl")


class ProbeCheckpointException(Exception):
    pass


def grad_drop_transform(p_on: float, seed: int) -> GradTransform:
    """Online gradient dropping with a fresh mask per call, drawn from its own stream."""
    calls = [0]

    def transform(grads: NamedParams) -> NamedParams:
        rng = stream_rng(seed, "mask", calls[0])
        calls[0] += 1
        return online_grad_drop(grads, p_on, rng)

    return transform


def train_paradigm(config: ExperimentConfig, model: TinyTransformer, theta_0: NamedParams,
                   paradigm: str, grad_transform: Optional[GradTransform] = None
                   ) -> Tuple[NamedParams, List[float]]:
    """One epoch of SFT or RL from theta_0 over the train questions at the matched learning rate.

    Returns:
        Tuple[NamedParams, List[float]]: final parameters and the per-update losses
    """
    if paradigm not in PARADIGMS:
        raise ValueError(f"paradigm must be one of {PARADIGMS}, got {paradigm!r}")
    lr = config.probes.learning_rate
    questions = make_questions(config.task, config.task.train_seeds)
    order = stream_rng(config.master_seed, "order", 0).permutation(len(questions))
    questions = [questions[i] for i in order]
    optimizer = AdamW(theta_0)
    params = theta_0
    losses: List[float] = []
    if paradigm == "sft":
        sft_cfg = replace(config.sft, learning_rate=lr)
        entries = demonstration_entries(questions)
        for start in range(0, len(entries), sft_cfg.batch_size):
            params, s = sft_batch_step(model, params, entries[start:start + sft_cfg.batch_size],
                                       sft_cfg, optimizer, entropy_selection=False,
                                       grad_transform=grad_transform)
            losses.append(s["loss"])
    else:
        grpo_cfg = replace(config.grpo, learning_rate=lr)
        R = grpo_cfg.rollout_batch_size
        for unit, start in enumerate(range(0, len(questions), R)):
            batch = questions[start:start + R]
            seeds = [derive_seed(config.master_seed, "rollout", 0, unit, i) for i in range(len(batch))]
            params, _, stats = rl_rollout_batch(model, params, batch, grpo_cfg, optimizer, seeds,
                                                grad_transform)
            losses.extend(s["loss"] for s in stats)
    logger.info("%s paradigm trained: %d updates", paradigm, len(losses))
    return params, losses


def paradigm_endpoints(config: ExperimentConfig, ckpt_a: Optional[str] = None,
                       ckpt_b: Optional[str] = None
                       ) -> Tuple[TinyTransformer, NamedParams, NamedParams, NamedParams]:
    """theta_0 and the SFT and RL endpoints.

    With both checkpoints, `ckpt_a` is the SFT endpoint and `ckpt_b` the RL endpoint, and
    theta_0 is read from `init_checkpoint` or the output directory's base checkpoint.
    Without checkpoints both paradigms are trained here and saved beside the base.

    Raises:
        ProbeCheckpointException: only one checkpoint given, or a checkpoint is missing
    """
    if (ckpt_a is None) != (ckpt_b is None):
        raise ProbeCheckpointException("pass both --ckpt-a and --ckpt-b, or neither")
    os.makedirs(config.output_dir, exist_ok=True)
    base_path = config.init_checkpoint or os.path.join(config.output_dir, BASE_CHECKPOINT)
    if ckpt_a is not None:
        for path in (ckpt_a, ckpt_b, base_path):
            if not os.path.exists(path):
                raise ProbeCheckpointException(f"checkpoint {path} does not exist")
        model = TinyTransformer(config.model, eos_id=VOCAB.eos)
        theta_0, theta_sft, theta_rl = (load_params(p) for p in (base_path, ckpt_a, ckpt_b))
        for params in (theta_0, theta_sft, theta_rl):
            model.check_params(params)
        return model, theta_0, theta_sft, theta_rl
    model, theta_0 = warm_start(config)
    manifest = {"config": config.to_dict()}
    save_checkpoint(os.path.join(config.output_dir, BASE_CHECKPOINT),
                    Checkpoint(params=theta_0, manifest=manifest))
    ends = {}
    for paradigm in PARADIGMS:
        ends[paradigm], _ = train_paradigm(config, model, theta_0, paradigm)
        save_checkpoint(os.path.join(config.output_dir, f"probe_{paradigm}.safetensors"),
                        Checkpoint(params=ends[paradigm], manifest=manifest))
    return model, theta_0, ends["sft"], ends["rl"]


def _score(config: ExperimentConfig, model: TinyTransformer, params: NamedParams) -> Dict[str, float]:
    questions = make_questions(config.task, config.task.eval_seeds)
    result = evaluate(model, params, questions, config.eval_k, config.eval_temperature,
                      seed=derive_seed(config.probes.rng_seed, "eval", 0),
                      max_new=config.grpo.max_new)
    return {"pass@1": result.pass_at_1, f"avg@{config.eval_k}": result.avg_at_k}


def _grad_drop(config, ckpt_a, ckpt_b) -> pd.DataFrame:
    model, theta_0 = warm_start(config)
    rows = []
    for i, paradigm in enumerate(PARADIGMS):
        for p_on in (0.0, config.probes.p_on):
            transform = grad_drop_transform(p_on, derive_seed(config.probes.rng_seed, "probe", i))
            params, losses = train_paradigm(config, model, theta_0, paradigm, transform)
            rows.append({"paradigm": paradigm, "p_on": p_on, "final_loss": losses[-1],
                         **_score(config, model, params)})
    return pd.DataFrame(rows)


def _prune(config, ckpt_a, ckpt_b) -> pd.DataFrame:
    model, theta_0, theta_sft, theta_rl = paradigm_endpoints(config, ckpt_a, ckpt_b)
    grid = sorted(set(config.probes.prune_grid) | {config.probes.p_post})
    rows = []
    for i, (paradigm, theta_T) in enumerate(zip(PARADIGMS, (theta_sft, theta_rl))):
        for j, p_post in enumerate(grid):
            rng = stream_rng(config.probes.rng_seed, "mask", i, j)
            rows.append({"paradigm": paradigm, "p_post": p_post,
                         **_score(config, model, posthoc_prune(theta_0, theta_T, p_post, rng))})
    df = pd.DataFrame(rows)
    key = f"avg@{config.eval_k}"
    baseline = df[df["p_post"] == 0.0].set_index("paradigm")[key]
    df["drop"] = [baseline.get(p, np.nan) - v for p, v in zip(df["paradigm"], df[key])]
    return df


def _magnitude(config, ckpt_a, ckpt_b) -> pd.DataFrame:
    _, theta_0, theta_sft, theta_rl = paradigm_endpoints(config, ckpt_a, ckpt_b)
    df = pd.DataFrame({"sft": layer_update_magnitude(theta_0, theta_sft),
                       "rl": layer_update_magnitude(theta_0, theta_rl)})
    df.loc["total"] = [np.sqrt((df["sft"] ** 2).sum()), np.sqrt((df["rl"] ** 2).sum())]
    return df.rename_axis("layer").reset_index()


def _selective_drop(config, ckpt_a, ckpt_b) -> pd.DataFrame:
    model, theta_0, _, theta_rl = paradigm_endpoints(config, ckpt_a, ckpt_b)
    changes = rl_update_magnitudes(theta_0, theta_rl)
    fraction = config.probes.topk_fraction
    first = config.probes.selection
    rows = [{"selection": "none", "fraction": 0.0, **_score(config, model, theta_rl)}]
    for selection in (first, *[s for s in ("topk", "random") if s != first]):
        rng = stream_rng(config.probes.rng_seed, "mask", 99)
        params = selective_topk_drop(theta_0, theta_rl, changes, fraction, selection, rng)
        rows.append({"selection": selection, "fraction": fraction,
                     **_score(config, model, params)})
    return pd.DataFrame(rows)


def _dr(config, ckpt_a, ckpt_b) -> pd.DataFrame:
    model, theta_0, theta_sft, theta_rl = paradigm_endpoints(config, ckpt_a, ckpt_b)
    demos = [teacher_solve(q) for q in make_questions(config.task, config.task.train_seeds)]
    probes = sample_margin_probes(demos, config.probes.dr_contexts,
                                  stream_rng(config.probes.rng_seed, "dr"))
    df, summary = dr_comparison(model, theta_0, theta_sft, theta_rl, probes,
                                config.probes.margin_offset)
    logger.info("DR medians: sft %.4f rl %.4f; DR_SFT >= DR_RL on %.1f%% of contexts",
                summary["median_dr_sft"], summary["median_dr_rl"], 100 * summary["frac_sft_ge_rl"])
    df.attrs["summary"] = summary
    return df.reset_index()


_RUNNERS = {
    "grad-drop": _grad_drop,
    "prune": _prune,
    "magnitude": _magnitude,
    "selective-drop": _selective_drop,
    "dr": _dr,
}


def _clean(value: Any) -> Any:
    if isinstance(value, (np.floating, float)):
        return None if np.isnan(value) else float(value)
    if isinstance(value, np.integer):
        return int(value)
    return value


def _append_records(config: ExperimentConfig, subcommand: str, df: pd.DataFrame) -> None:
    path = os.path.join(config.output_dir, METRICS_FILE)
    with MetricsWriter(path, append=True) as writer:
        rows = [df.attrs["summary"]] if subcommand == "dr" else df.to_dict("records")
        for row in rows:
            row = {k: _clean(v) for k, v in row.items()}
            scores = {k: row.pop(k) for k in list(row) if k.startswith(("pass@", "avg@"))}
            writer.write(MetricsRecord(step=writer.last_step + 1, phase="probe",
                                       eval_scores=scores or None,
                                       extra={"probe_type": subcommand, **row}))


def probe_command(subcommand: str, config: ExperimentConfig, ckpt_a: Optional[str] = None,
                  ckpt_b: Optional[str] = None, show: bool = True) -> pd.DataFrame:
    """Run one probe experiment and append its rows to the metrics stream.

    Args:
        subcommand (str): 'grad-drop', 'prune', 'magnitude', 'selective-drop' or 'dr'
        config (ExperimentConfig): shared configuration; `probes` holds the probe settings
        ckpt_a (str, optional): SFT endpoint checkpoint
        ckpt_b (str, optional): RL endpoint checkpoint
        show (bool, optional): Whether to print the results. Defaults to True.

    Returns:
        pd.DataFrame: the probe report

    Example:

        >>> from mifo.config import ExperimentConfig
        >>> from mifo.probe_runner import probe_command
        >>> cfg = ExperimentConfig.from_json("configs/toy.json")
        >>> probe_command("prune", cfg)
    """
    runner = _RUNNERS.get(subcommand)
    if runner is None:
        raise ValueError(f"unknown probe {subcommand!r}; choose one of {SUBCOMMANDS}")
    res_df = runner(config, ckpt_a, ckpt_b)
    _append_records(config, subcommand, res_df)
    if show:
        print(res_df.to_markdown(floatfmt=".3f", index=False))
    return res_df
