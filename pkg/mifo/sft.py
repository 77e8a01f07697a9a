"""Accuracy-gated SFT buffer and the high-entropy masked SFT step."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from mifo.engine import EngineNonFiniteException, NamedParams, Tape, Var
from mifo.grpo import GradTransform, RolloutGroup
from mifo.ledger import FreezeMask, apply_freeze
from mifo.model import TinyTransformer, TokenSequence
from mifo.optim import AdamW
from mifo.tasks import VOCAB, Demonstration, Question, extract

logger = logging.getLogger(__name__)


class SftConfigException(Exception):
    pass


class DegenerateMaskException(Exception):
    pass


class BufferInvariantException(Exception):
    pass


class SFTPhaseException(Exception):
    pass


@dataclass(frozen=True)
class SftConfig:
    p: float = 0.125
    rho: float = 0.2
    S: int = 64
    learning_rate: float = 1e-3
    batch_size: int = 8

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise SftConfigException(f"p must lie in [0, 1], got {self.p}")
        if not 0.0 < self.rho <= 1.0:
            raise SftConfigException(f"rho must lie in (0, 1], got {self.rho}")
        if self.S < 1 or self.batch_size < 1:
            raise SftConfigException("S and batch_size must be positive")
        if self.learning_rate < 0:
            raise SftConfigException("learning_rate must be nonnegative")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "SftConfig":
        return cls(**d)


@dataclass(frozen=True)
class BufferEntry:
    question: Question
    solution: TokenSequence
    acc_at_admission: float

    def to_dict(self) -> Dict[str, Any]:
        return {"seed": self.question.seed, "prompt_text": self.question.prompt_text,
                "answer": self.question.answer, "difficulty": self.question.difficulty,
                "solution_text": VOCAB.text(self.solution),
                "acc_at_admission": self.acc_at_admission}

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "BufferEntry":
        q = Question(seed=int(d["seed"]), prompt=VOCAB.encode(d["prompt_text"].split()),
                     answer=str(d["answer"]), difficulty=int(d["difficulty"]))
        return cls(question=q, solution=VOCAB.encode(d["solution_text"].split()),
                   acc_at_admission=float(d["acc_at_admission"]))


class SftBuffer:

    """FIFO buffer of (question, verified solution) pairs awaiting the next SFT phase.

    Every mutation re-checks that each resident entry extracts to its answer,
    was admitted at accuracy <= p, and that no question is resident twice.
    """

    def __init__(self, S: int, p: float) -> None:
        self.S = S
        self.p = p
        self.entries: List[BufferEntry] = []

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, q: Question) -> bool:
        return any(e.question.prompt == q.prompt for e in self.entries)

    def audit(self) -> None:
        seen = set()
        for e in self.entries:
            if extract(e.solution) != e.question.answer:
                raise BufferInvariantException(f"entry for seed {e.question.seed} fails extract == a")
            if e.acc_at_admission > self.p:
                raise BufferInvariantException(
                    f"entry for seed {e.question.seed} admitted at acc {e.acc_at_admission} > p")
            if e.question.prompt in seen:
                raise BufferInvariantException(f"question seed {e.question.seed} resident twice")
            seen.add(e.question.prompt)

    def append(self, entry: BufferEntry) -> None:
        self.entries.append(entry)
        try:
            self.audit()
        except BufferInvariantException:
            self.entries.pop()
            raise

    def drain(self) -> None:
        self.entries = []

    def batches(self, batch_size: int) -> List[List[BufferEntry]]:
        return [self.entries[i:i + batch_size] for i in range(0, len(self.entries), batch_size)]

    def to_list(self) -> List[Dict[str, Any]]:
        return [e.to_dict() for e in self.entries]

    @classmethod
    def from_list(cls, S: int, p: float, items: Sequence[Dict[str, Any]]) -> "SftBuffer":
        buf = cls(S, p)
        for item in items:
            buf.append(BufferEntry.from_dict(item))
        return buf


def maybe_admit(buffer: SftBuffer, group: RolloutGroup, demo: Demonstration,
                cfg: SftConfig) -> bool:
    """Admit the procedural demonstration iff acc(q) <= p and its answer verifies."""
    if demo.question != group.question:
        raise ValueError("demonstration and rollout group are for different questions")
    if group.acc > cfg.p:
        return False
    if extract(demo.solution) != demo.question.answer:
        return False
    if demo.question in buffer:
        return False
    buffer.append(BufferEntry(question=demo.question, solution=demo.solution,
                              acc_at_admission=group.acc))
    return True


def should_switch(buffer: SftBuffer) -> bool:
    return len(buffer) >= buffer.S


def select_high_entropy(entropies: Sequence[float], rho: float) -> Tuple[np.ndarray, float]:
    """Select the top ceil(rho * T) tokens by entropy.

    Ties at the threshold go to the earliest positions.

    Args:
        entropies (Sequence[float]): per-token entropies of one response
        rho (float): fraction in (0, 1]

    Returns:
        Tuple[np.ndarray, float]: 0/1 mask over the tokens and the threshold tau
            (smallest selected entropy)

    Example:

        >>> from mifo.sft import select_high_entropy
        >>> select_high_entropy([3.0, 1.0, 2.0, 2.0], 0.5)
        (array([1., 0., 1., 0.]), 2.0)
    """
    h = np.asarray(entropies, dtype=np.float64)
    if h.ndim != 1 or h.size == 0:
        raise ValueError("entropies must be a nonempty vector")
    if not 0.0 < rho <= 1.0:
        raise SftConfigException(f"rho must lie in (0, 1], got {rho}")
    n_sel = int(np.ceil(round(rho * h.size, 9)))
    order = np.lexsort((np.arange(h.size), -h))[:n_sel]
    mask = np.zeros(h.size)
    mask[order] = 1.0
    return mask, float(h[order].min())


def sft_loss(model: TinyTransformer, tape: Tape, pv: Dict[str, Var], entry: BufferEntry,
             mask: np.ndarray, log_probs: Optional[Var] = None) -> Var:
    """-(1/|s|) * sum_t mask_t * log pi(s_t | q, s_<t) over the response tokens.

    Raises:
        DegenerateMaskException: mask has the wrong length or selects nothing
    """
    s = entry.solution
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != (len(s),):
        raise DegenerateMaskException(f"mask of shape {mask.shape} for a response of {len(s)} tokens")
    if not np.any(mask):
        raise DegenerateMaskException("mask selects no tokens")
    if log_probs is None:
        log_probs = model.response_log_probs(tape, pv, entry.question.prompt, s)
    f = tape.forward
    return f("scale", f("sum", f("masked_select", log_probs, mask=mask)), factor=-1.0 / len(s))


def sft_batch_step(model: TinyTransformer, params: NamedParams, entries: Sequence[BufferEntry],
                   cfg: SftConfig, optimizer: AdamW, freeze_mask: Optional[FreezeMask] = None,
                   entropy_selection: bool = True,
                   grad_transform: Optional[GradTransform] = None
                   ) -> Tuple[NamedParams, Dict[str, float]]:
    """One optimizer update on the mean SFT loss over `entries`.

    Entropies come from the same forward pass as the log-probabilities, so they
    are always those of the current params.
    """
    tape = Tape()
    pv = tape.leaves(params)
    total = None
    n_selected = 0
    for e in entries:
        log_probs, entropies = model.response_stats(tape, pv, e.question.prompt, e.solution)
        if entropy_selection:
            mask, _ = select_high_entropy(entropies.value, cfg.rho)
        else:
            mask = np.ones(len(e.solution))
        n_selected += int(mask.sum())
        le = sft_loss(model, tape, pv, e, mask, log_probs=log_probs)
        total = le if total is None else tape.forward("add", total, le)
    loss = tape.forward("scale", total, factor=1.0 / len(entries))
    grads = tape.backward(loss)
    if grad_transform is not None:
        grads = grad_transform(grads)
    frozen = frozenset()
    if freeze_mask is not None:
        grads = apply_freeze(grads, freeze_mask)
        frozen = freeze_mask.frozen
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise EngineNonFiniteException("non-finite SFT gradient")
    params = optimizer.step(params, grads, cfg.learning_rate, frozen=frozen)
    return params, {"loss": float(loss.value[0]), "n_entries": len(entries),
                    "selected_tokens": n_selected, "frozen_count": len(frozen)}


def sft_phase(model: TinyTransformer, params: NamedParams, buffer: SftBuffer, cfg: SftConfig,
              optimizer: AdamW, freeze_mask: Optional[FreezeMask] = None,
              entropy_selection: bool = True) -> Tuple[NamedParams, List[Dict[str, float]]]:
    """Train once over the whole buffer in FIFO mini-batches, then empty it.

    Returns:
        Tuple[NamedParams, List[Dict[str, float]]]: updated params and one stats dict per step

    Raises:
        SFTPhaseException: the buffer has not reached S, or a loss turned non-finite. In the
            latter case the optimizer and buffer are restored to their phase-start state and
            the caller keeps its phase-start params.
    """
    if not should_switch(buffer):
        raise SFTPhaseException(f"buffer holds {len(buffer)} < S={buffer.S} entries")
    snapshot = optimizer.snapshot()
    entries = list(buffer.entries)
    current = params
    stats = []
    try:
        for batch in buffer.batches(cfg.batch_size):
            current, s = sft_batch_step(model, current, batch, cfg, optimizer, freeze_mask,
                                        entropy_selection)
            stats.append(s)
    except EngineNonFiniteException as e:
        optimizer.restore(snapshot)
        buffer.entries = entries
        raise SFTPhaseException(f"SFT phase aborted: {e}") from e
    logger.info("sft phase done: %d entries, %d steps", len(entries), len(stats))
    buffer.drain()
    return current, stats
