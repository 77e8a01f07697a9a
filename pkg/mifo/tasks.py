"""Synthetic modular-arithmetic reasoning tasks.

A question reads ``a1 op a2 op ... op ak mod m = ?`` and is evaluated left to
right, reducing modulo m after every operation. Demonstrations write
one step per operation, ``partial op next = value ;``, and finish with
``#### answer <eos>``.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import asdict, dataclass
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

TokenSequence = Tuple[int, ...]

OPS = ("+", "-", "*")
SYMBOLS = tuple(str(d) for d in range(10)) + OPS + ("=", "?", "mod", "####", ";", "<eos>")


class TaskConfigException(Exception):
    pass


class DemonstrationException(Exception):
    pass


class VocabularyException(Exception):
    pass


class Vocabulary:
    """Bidirectional symbol <-> token id mapping for the task alphabet."""

    def __init__(self, symbols: Sequence[str] = SYMBOLS) -> None:
        if len(set(symbols)) != len(symbols):
            raise VocabularyException("duplicate symbols in vocabulary")
        self.symbols = tuple(symbols)
        self.ids = {s: i for i, s in enumerate(self.symbols)}
        self.answer_delim = self.ids["####"]
        self.eos = self.ids["<eos>"]
        self.question_delim = self.ids["?"]
        self.digit_ids = tuple(self.ids[str(d)] for d in range(10))

    def __len__(self) -> int:
        return len(self.symbols)

    def encode(self, symbols: Iterable[str]) -> TokenSequence:
        try:
            return tuple(self.ids[s] for s in symbols)
        except KeyError as e:
            raise VocabularyException(f"unknown symbol {e.args[0]!r}") from None

    def decode(self, ids: Iterable[int]) -> List[str]:
        out = []
        for i in ids:
            if not 0 <= int(i) < len(self.symbols):
                raise VocabularyException(f"token id {i} outside the task alphabet")
            out.append(self.symbols[int(i)])
        return out

    def text(self, ids: Iterable[int]) -> str:
        return " ".join(self.decode(ids))


VOCAB = Vocabulary()


def _is_prime(n: int) -> bool:
    return n >= 2 and all(n % d for d in range(2, int(n ** 0.5) + 1))


@dataclass(frozen=True)
class TaskConfig:
    """Question generator settings.

    Seeds in ``[eval_seed_start, eval_seed_start + n_eval)`` produce eval
    questions; every other seed produces train questions. Prompts are assigned
    to a split by a stable hash, so no eval prompt can equal a train prompt.
    """
    modulus: int = 7
    min_chain: int = 1
    max_chain: int = 3
    train_seed_start: int = 0
    n_train: int = 256
    eval_seed_start: int = 1_000_000
    n_eval: int = 128
    eval_fraction: float = 0.2

    def __post_init__(self):
        if not _is_prime(int(self.modulus)):
            raise TaskConfigException(f"modulus must be a prime, got {self.modulus}")
        if self.min_chain < 1 or self.max_chain < self.min_chain:
            raise TaskConfigException("need 1 <= min_chain <= max_chain")
        if self.n_train < 1 or self.n_eval < 1:
            raise TaskConfigException("n_train and n_eval must be positive")
        if not 0.0 < self.eval_fraction < 1.0:
            raise TaskConfigException("eval_fraction must lie in (0, 1)")
        train_end = self.train_seed_start + self.n_train
        eval_end = self.eval_seed_start + self.n_eval
        if self.train_seed_start < eval_end and self.eval_seed_start < train_end:
            raise TaskConfigException("train and eval seed ranges overlap")

    @property
    def train_seeds(self) -> range:
        return range(self.train_seed_start, self.train_seed_start + self.n_train)

    @property
    def eval_seeds(self) -> range:
        return range(self.eval_seed_start, self.eval_seed_start + self.n_eval)

    def split_of(self, seed: int) -> str:
        return "eval" if seed in self.eval_seeds else "train"

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "TaskConfig":
        return cls(**d)


@dataclass(frozen=True)
class Question:
    seed: int
    prompt: TokenSequence
    answer: str
    difficulty: int

    @property
    def prompt_text(self) -> str:
        return VOCAB.text(self.prompt)


@dataclass(frozen=True)
class Demonstration:
    question: Question
    solution: TokenSequence

    def __post_init__(self):
        if extract(self.solution) != self.question.answer:
            raise DemonstrationException(
                f"solution does not extract to the answer {self.question.answer!r}")


def _digits(n: int) -> List[str]:
    return list(str(n))


def _apply(op: str, a: int, b: int, m: int) -> int:
    if op == "+":
        return (a + b) % m
    if op == "-":
        return (a - b) % m
    return (a * b) % m


def _bucket_is_eval(prompt_text: str, eval_fraction: float) -> bool:
    h = int.from_bytes(hashlib.sha256(prompt_text.encode("utf-8")).digest()[:8], "little")
    return (h % 1_000_000) < eval_fraction * 1_000_000


def generate_question(cfg: TaskConfig, seed: int, max_attempts: int = 10_000) -> Question:
    """Deterministically generate the question for `seed`.

    Raises:
        TaskConfigException: the configured split holds no prompt at all
    """
    want_eval = cfg.split_of(seed) == "eval"
    rng = np.random.default_rng([int(seed) & (2**63 - 1), cfg.modulus])
    m = cfg.modulus
    for _ in range(max_attempts):
        chain = int(rng.integers(cfg.min_chain, cfg.max_chain + 1))
        operands = rng.integers(0, m, size=chain + 1)
        ops = [OPS[i] for i in rng.integers(0, len(OPS), size=chain)]
        symbols = _digits(int(operands[0]))
        value = int(operands[0])
        for op, b in zip(ops, operands[1:]):
            symbols += [op] + _digits(int(b))
            value = _apply(op, value, int(b), m)
        symbols += ["mod"] + _digits(m) + ["=", "?"]
        if _bucket_is_eval(" ".join(symbols), cfg.eval_fraction) == want_eval:
            return Question(seed=int(seed), prompt=VOCAB.encode(symbols), answer=str(value),
                            difficulty=chain)
    raise TaskConfigException("no prompt of the requested split found; widen the task")


def _parse_prompt(q: Question) -> Tuple[List[int], List[str], int]:
    symbols = VOCAB.decode(q.prompt)
    if not symbols or symbols[-1] != "?":
        raise DemonstrationException("prompt must end with the question delimiter")
    mod_at = symbols.index("mod")
    numbers: List[int] = []
    ops: List[str] = []
    current = ""
    for s in symbols[:mod_at]:
        if s in OPS:
            numbers.append(int(current))
            ops.append(s)
            current = ""
        else:
            current += s
    numbers.append(int(current))
    modulus = int("".join(symbols[mod_at + 1:symbols.index("=")]))
    return numbers, ops, modulus


def teacher_solve(q: Question) -> Demonstration:
    """Left-to-right reduction, one step per operation, then ``#### answer <eos>``."""
    numbers, ops, m = _parse_prompt(q)
    steps: List[str] = []
    value = numbers[0] % m
    for op, b in zip(ops, numbers[1:]):
        nxt = _apply(op, value, b, m)
        steps += _digits(value) + [op] + _digits(b) + ["="] + _digits(nxt) + [";"]
        value = nxt
    steps += ["####"] + _digits(value) + ["<eos>"]
    return Demonstration(question=q, solution=VOCAB.encode(steps))


def extract(s: Sequence[int], vocab: Vocabulary = VOCAB) -> Optional[str]:
    """Digits immediately following the last answer delimiter, or None."""
    ids = list(s)
    positions = [i for i, t in enumerate(ids) if t == vocab.answer_delim]
    if not positions:
        return None
    digits = []
    for t in ids[positions[-1] + 1:]:
        if t not in vocab.digit_ids:
            break
        digits.append(vocab.symbols[t])
    return "".join(digits) or None


def reward(o: Sequence[int], q: Question) -> int:
    answer = extract(o)
    return int(answer is not None and answer == q.answer)


def make_questions(cfg: TaskConfig, seeds: Iterable[int]) -> List[Question]:
    return [generate_question(cfg, s) for s in seeds]


def dump_questions(questions: Sequence[Question], path: Union[str, os.PathLike]) -> None:
    """Write one JSON line per question: seed, prompt_text, answer, difficulty."""
    df = pd.DataFrame([{"seed": q.seed, "prompt_text": q.prompt_text, "answer": q.answer,
                        "difficulty": q.difficulty} for q in questions],
                      columns=["seed", "prompt_text", "answer", "difficulty"])
    df.to_json(path, orient="records", lines=True)


def load_questions(path: Union[str, os.PathLike]) -> List[Question]:
    df = pd.read_json(path, orient="records", lines=True, dtype={"answer": str})
    return [Question(seed=int(r.seed), prompt=VOCAB.encode(r.prompt_text.split()),
                     answer=str(r.answer), difficulty=int(r.difficulty))
            for r in df.itertuples(index=False)]


def question_modulus(q: Question) -> int:
    return _parse_prompt(q)[2]
