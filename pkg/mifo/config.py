"""Experiment configuration.

One JSON document describes a run. Sub-sections map onto the per-module
dataclasses; hyperparameter keys keep their usual names (`rollout_batch_size`,
`rollouts_per_query`, `update_batch_size`, `learning_rate`,
`rollout_temperature`, `entropy_coef`, `p`, `rho`, `k`, `alpha`,
`batch_size`). ``MIFO_OUTPUT_DIR`` overrides `output_dir` and nothing else.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, Optional, Union

from mifo.grpo import GrpoConfig
from mifo.ledger import LedgerConfig
from mifo.model import ModelConfig
from mifo.probes import ProbeConfig
from mifo.sft import SftConfig
from mifo.tasks import VOCAB, TaskConfig

logger = logging.getLogger(__name__)

OUTPUT_DIR_ENV = "MIFO_OUTPUT_DIR"

# mode -> (entropy selection, parameter freezing, rl->sft buffer loop)
MODES: Dict[str, tuple] = {
    "mifo": (True, True, True),
    "mifo_dagger": (True, True, True),
    "interleave": (False, False, True),
    "interleave_es": (True, False, True),
    "interleave_pf": (False, True, True),
    "rl_only": (False, False, False),
    "sft_only": (False, False, False),
    "sft_then_rl": (False, False, False),
}


class ExperimentConfigException(Exception):
    pass


@dataclass(frozen=True)
class WarmupConfig:
    """Full-token SFT on short-chain demonstrations applied to the fresh policy."""
    steps: int = 150
    batch_size: int = 16
    learning_rate: float = 3e-3
    max_chain: int = 1

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.max_chain < 1 or self.learning_rate < 0:
            raise ExperimentConfigException("invalid warmup settings")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "WarmupConfig":
        return cls(**d)


_SECTIONS = {
    "model": ModelConfig,
    "task": TaskConfig,
    "grpo": GrpoConfig,
    "sft": SftConfig,
    "ledger": LedgerConfig,
    "probes": ProbeConfig,
    "warmup": WarmupConfig,
}


def _max_lengths(task: TaskConfig):
    dm = len(str(task.modulus - 1))
    c = task.max_chain
    prompt = (c + 1) * dm + c + 3 + len(str(task.modulus))
    solution = c * (3 * dm + 3) + dm + 2
    return prompt, solution


@dataclass(frozen=True)
class ExperimentConfig:

    """Everything a run depends on.

    Example:

        >>> from mifo.config import ExperimentConfig
        >>> cfg = ExperimentConfig.from_dict({"mode": "mifo_dagger", "sft": {"p": 0.25}})
        >>> cfg.resolved().ledger.alpha
        0.0
    """

    mode: str = "mifo"
    model: ModelConfig = field(default_factory=ModelConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    sft: SftConfig = field(default_factory=SftConfig)
    ledger: LedgerConfig = field(default_factory=LedgerConfig)
    probes: ProbeConfig = field(default_factory=ProbeConfig)
    warmup: WarmupConfig = field(default_factory=WarmupConfig)
    epochs: int = 3
    master_seed: int = 0
    output_dir: str = "runs/mifo"
    eval_k: int = 4
    eval_temperature: float = 0.6
    eval_every: int = 0
    eval_around_sft: bool = False
    checkpoint_every: int = 0
    log_wall_time: bool = False
    init_checkpoint: Optional[str] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ExperimentConfigException(
                f"mode must be one of {sorted(MODES)}, got {self.mode!r}")
        if self.epochs < 1:
            raise ExperimentConfigException("epochs must be at least 1")
        if self.eval_k < 1:
            raise ExperimentConfigException("eval_k must be at least 1")
        if self.eval_every < 0 or self.checkpoint_every < 0:
            raise ExperimentConfigException("eval_every and checkpoint_every must be nonnegative")
        if self.model.vocab_size < len(VOCAB):
            raise ExperimentConfigException(
                f"vocab_size {self.model.vocab_size} is smaller than the task alphabet ({len(VOCAB)})")
        prompt, solution = _max_lengths(self.task)
        if prompt + solution > self.model.max_seq_len:
            raise ExperimentConfigException(
                f"max_seq_len {self.model.max_seq_len} cannot hold a {prompt}-token prompt "
                f"and a {solution}-token solution")

    @property
    def entropy_selection(self) -> bool:
        return MODES[self.mode][0]

    @property
    def freeze(self) -> bool:
        return MODES[self.mode][1]

    @property
    def uses_buffer(self) -> bool:
        return MODES[self.mode][2]

    def resolved(self) -> "ExperimentConfig":
        """Apply mode gating: mifo_dagger carries no importance history (alpha = 0)."""
        if self.mode == "mifo_dagger" and self.ledger.alpha != 0.0:
            logger.info("mode mifo_dagger: forcing alpha from %s to 0", self.ledger.alpha)
            return replace(self, ledger=replace(self.ledger, alpha=0.0))
        return self

    def to_dict(self) -> Dict[str, Any]:
        d: Dict[str, Any] = {}
        for name in self.__dataclass_fields__:
            value = getattr(self, name)
            d[name] = value.to_dict() if name in _SECTIONS else value
        return d

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "ExperimentConfig":
        kwargs = dict(d)
        unknown = set(kwargs) - set(cls.__dataclass_fields__)
        if unknown:
            raise ExperimentConfigException(f"unknown config keys {sorted(unknown)}")
        try:
            for name, section in _SECTIONS.items():
                if name in kwargs:
                    kwargs[name] = section.from_dict(kwargs[name])
            return cls(**kwargs)
        except TypeError as e:
            raise ExperimentConfigException(str(e)) from e

    @classmethod
    def from_json(cls, path: Union[str, os.PathLike]) -> "ExperimentConfig":
        try:
            with open(path) as f:
                d = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ExperimentConfigException(f"cannot read config {path}: {e}") from e
        override = os.environ.get(OUTPUT_DIR_ENV)
        if override:
            d["output_dir"] = override
        return cls.from_dict(d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)
