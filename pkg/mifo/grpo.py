"""Group Relative Policy Optimization step for the tiny policy."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from mifo.engine import EngineNonFiniteException, NamedParams, Tape, Var
from mifo.model import TinyTransformer, TokenSequence
from mifo.optim import AdamW
from mifo.tasks import Question, reward

logger = logging.getLogger(__name__)

GradTransform = Callable[[NamedParams], NamedParams]


class GrpoConfigException(Exception):
    pass


class EmptyResponseException(Exception):
    pass


class RLStepException(Exception):
    pass


@dataclass(frozen=True)
class GrpoConfig:
    rollouts_per_query: int = 8
    clip_eps: float = 0.2
    variant: str = "reduced"
    entropy_coef: float = 0.001
    learning_rate: float = 1e-4
    rollout_batch_size: int = 16
    update_batch_size: int = 8
    rollout_temperature: float = 1.0
    max_new: int = 32
    weight_decay: float = 0.0
    workers: int = 1

    def __post_init__(self):
        if self.rollouts_per_query < 2:
            raise GrpoConfigException("rollouts_per_query must be at least 2")
        if self.clip_eps <= 0:
            raise GrpoConfigException("clip_eps must be positive")
        if self.variant not in ("vanilla", "reduced"):
            raise GrpoConfigException(f"variant must be 'vanilla' or 'reduced', got {self.variant!r}")
        if self.entropy_coef < 0 or self.learning_rate < 0 or self.weight_decay < 0:
            raise GrpoConfigException("entropy_coef, learning_rate and weight_decay must be nonnegative")
        if self.rollout_batch_size < 1 or self.update_batch_size < 1:
            raise GrpoConfigException("batch sizes must be positive")
        if self.rollout_batch_size % self.update_batch_size != 0:
            raise GrpoConfigException("update_batch_size must divide rollout_batch_size")
        if self.rollout_temperature < 0:
            raise GrpoConfigException("rollout_temperature must be nonnegative")
        if self.max_new < 1 or self.workers < 1:
            raise GrpoConfigException("max_new and workers must be positive")

    @property
    def updates_per_rollout_batch(self) -> int:
        return self.rollout_batch_size // self.update_batch_size

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "GrpoConfig":
        return cls(**d)


@dataclass
class RolloutGroup:
    question: Question
    responses: List[TokenSequence]
    old_log_probs: List[np.ndarray]
    rewards: np.ndarray
    acc: float
    advantages: np.ndarray

    @property
    def n_tokens(self) -> int:
        return sum(len(o) for o in self.responses)


def advantages(rewards: Sequence[float], variant: str = "reduced") -> np.ndarray:
    """Group-relative advantages.

    Args:
        rewards (Sequence[float]): one reward per rollout, at least two
        variant (str): 'vanilla' divides by the population std, 'reduced' only centres

    Returns:
        np.ndarray: the zero vector when all rewards are equal, else the advantages
    """
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("advantages need at least two rewards")
    if variant not in ("vanilla", "reduced"):
        raise GrpoConfigException(f"unknown variant {variant!r}")
    if np.all(r == r[0]):
        return np.zeros_like(r)
    centred = r - r.mean()
    if variant == "vanilla":
        return centred / r.std()
    return centred


def response_seeds(seed: int, n: int) -> List[int]:
    return [int(s.generate_state(1, dtype=np.uint64)[0])
            for s in np.random.SeedSequence(seed).spawn(n)]


def rollout_group(model: TinyTransformer, params_old: NamedParams, q: Question,
                  cfg: GrpoConfig, seed: int) -> RolloutGroup:
    """Sample N responses to `q` under `params_old` and score them."""
    responses = [model.sample_response(params_old, q.prompt, cfg.rollout_temperature,
                                       cfg.max_new, s)
                 for s in response_seeds(seed, cfg.rollouts_per_query)]
    old = [model.token_log_probs(params_old, q.prompt, o) if o else np.zeros(0)
           for o in responses]
    rewards = np.array([reward(o, q) for o in responses], dtype=np.float64)
    acc = float(np.count_nonzero(rewards == 1.0)) / cfg.rollouts_per_query
    return RolloutGroup(question=q, responses=responses, old_log_probs=old, rewards=rewards,
                        acc=acc, advantages=advantages(rewards, cfg.variant))


def rollout_groups(model: TinyTransformer, params_old: NamedParams,
                   questions: Sequence[Question], cfg: GrpoConfig,
                   seeds: Sequence[int]) -> List[RolloutGroup]:
    if cfg.workers == 1:
        return [rollout_group(model, params_old, q, cfg, s) for q, s in zip(questions, seeds)]
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        return list(pool.map(lambda qs: rollout_group(model, params_old, qs[0], cfg, qs[1]),
                             zip(questions, seeds)))


def grpo_loss(model: TinyTransformer, tape: Tape, pv: Dict[str, Var], group: RolloutGroup,
              cfg: GrpoConfig) -> Var:
    """Clipped token-level surrogate, negated, minus the entropy bonus.

    The vanilla variant divides the surrogate by the group's total response
    length. The reduced variant divides by the constant N * max_new, so a token's
    weight does not depend on how long the other responses are. The entropy
    bonus is always the per-token mean.

    Raises:
        EmptyResponseException: a response in the group has no tokens
    """
    if any(len(o) == 0 for o in group.responses):
        raise EmptyResponseException("group contains an empty response")
    f = tape.forward
    surrogate = None
    ent_total = None
    for o, old, a in zip(group.responses, group.old_log_probs, group.advantages):
        log_probs, entropies = model.response_stats(tape, pv, group.question.prompt, o)
        ratio = f("exp", f("sub", log_probs, tape.const(old)))
        adv = tape.const(np.full(len(o), a))
        term = f("sum", f("minimum", f("mul", ratio, adv),
                          f("mul", f("clip", ratio, lo=1.0 - cfg.clip_eps, hi=1.0 + cfg.clip_eps),
                            adv)))
        surrogate = term if surrogate is None else f("add", surrogate, term)
        if cfg.entropy_coef > 0:
            ent = f("sum", entropies)
            ent_total = ent if ent_total is None else f("add", ent_total, ent)
    if cfg.variant == "vanilla":
        norm = group.n_tokens
    else:
        norm = len(group.responses) * cfg.max_new
    loss = f("scale", surrogate, factor=-1.0 / norm)
    if ent_total is not None:
        loss = f("sub", loss, f("scale", ent_total, factor=cfg.entropy_coef / group.n_tokens))
    return loss


def _finite(grads: NamedParams) -> bool:
    return all(np.all(np.isfinite(g)) for g in grads.values())


def rl_step(model: TinyTransformer, params: NamedParams, groups: Sequence[RolloutGroup],
            cfg: GrpoConfig, optimizer: AdamW,
            grad_transform: Optional[GradTransform] = None) -> Tuple[NamedParams, Dict[str, float]]:
    """One optimizer update on the mean GRPO loss over `groups`.

    The groups' old log-probabilities stand in for params_old. An exactly zero
    gradient leaves both params and optimizer state untouched.

    Returns:
        Tuple[NamedParams, Dict[str, float]]: updated params and the step statistics
            (loss, mean_reward, mean_acc, mean_response_length, batch_solved_rate,
            batch_all_solved_rate)

    Raises:
        RLStepException: the loss or a gradient is not finite; params are left untouched
    """
    if not groups:
        raise RLStepException("rl_step needs at least one group")
    tape = Tape()
    pv = tape.leaves(params)
    try:
        total = None
        for g in groups:
            lg = grpo_loss(model, tape, pv, g, cfg)
            total = lg if total is None else tape.forward("add", total, lg)
        loss = tape.forward("scale", total, factor=1.0 / len(groups))
    except EngineNonFiniteException as e:
        raise RLStepException(f"non-finite GRPO loss: {e}") from e
    grads = tape.backward(loss)
    if grad_transform is not None:
        grads = grad_transform(grads)
    if not _finite(grads):
        raise RLStepException("non-finite GRPO gradient")
    if all(not np.any(g) for g in grads.values()):
        # no step and no moment update
        new_params = params
        logger.debug("rl step skipped: zero gradient")
    else:
        new_params = optimizer.step(params, grads, cfg.learning_rate)

    accs = np.array([g.acc for g in groups])
    stats = {
        "loss": float(loss.value[0]),
        "mean_reward": float(np.mean([g.rewards.mean() for g in groups])),
        "mean_acc": float(accs.mean()),
        "mean_response_length": float(np.mean([len(o) for g in groups for o in g.responses])),
        "batch_solved_rate": float(np.mean(accs > 0)),
        "batch_all_solved_rate": float(np.mean(accs == 1.0)),
    }
    logger.debug("rl step loss=%.6f acc=%.4f", stats["loss"], stats["mean_acc"])
    return new_params, stats


def rl_rollout_batch(model: TinyTransformer, params: NamedParams,
                     questions: Sequence[Question], cfg: GrpoConfig, optimizer: AdamW,
                     seeds: Sequence[int], grad_transform: Optional[GradTransform] = None
                     ) -> Tuple[NamedParams, List[RolloutGroup], List[Dict[str, float]]]:
    """Sample one rollout batch under params_old := params, then update in update batches.

    A full rollout batch of `rollout_batch_size` questions yields
    `rollout_batch_size // update_batch_size` optimizer updates.
    """
    groups = rollout_groups(model, params, questions, cfg, seeds)
    trainable = [g for g in groups if all(len(o) > 0 for o in g.responses)]
    stats = []
    for start in range(0, len(trainable), cfg.update_batch_size):
        params, s = rl_step(model, params, trainable[start:start + cfg.update_batch_size], cfg,
                            optimizer, grad_transform)
        stats.append(s)
    return params, groups, stats
