"""Append-only JSON-lines metrics stream and its audit."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Union

import pandas as pd

from mifo.ledger import n_frozen

logger = logging.getLogger(__name__)

PHASES = ("rl", "sft", "probe", "eval")

RECORD_FIELDS = ("step", "phase", "interval_index", "loss", "mean_reward", "mean_acc",
                 "buffer_size", "frozen_count", "mean_response_length", "eval_scores",
                 "wall_time")


class MetricsOrderException(Exception):
    pass


@dataclass
class MetricsRecord:
    step: int
    phase: str
    interval_index: int = 0
    loss: Optional[float] = None
    mean_reward: Optional[float] = None
    mean_acc: Optional[float] = None
    buffer_size: int = 0
    frozen_count: int = 0
    mean_response_length: Optional[float] = None
    eval_scores: Optional[Dict[str, float]] = None
    wall_time: Optional[float] = None
    extra: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.phase not in PHASES:
            raise MetricsOrderException(f"unknown phase {self.phase!r}")

    def to_json(self) -> str:
        d = asdict(self)
        extra = d.pop("extra")
        clash = set(extra) & set(d)
        if clash:
            raise MetricsOrderException(f"extra fields shadow record fields: {sorted(clash)}")
        d.update(extra)
        return json.dumps(d, sort_keys=True, allow_nan=False)

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "MetricsRecord":
        base = {k: d[k] for k in RECORD_FIELDS if k in d}
        extra = {k: v for k, v in d.items() if k not in RECORD_FIELDS}
        return cls(**base, extra=extra)


class _PhaseTracker:
    """SFT never follows SFT of another interval without an RL step in between."""

    def __init__(self) -> None:
        self.last_step = -1
        self.last_train: Optional[str] = None
        self.last_sft_interval: Optional[int] = None

    def check(self, record: MetricsRecord) -> Optional[str]:
        if record.step <= self.last_step:
            return f"step {record.step} does not increase past {self.last_step}"
        if record.phase == "sft" and self.last_train == "sft" \
                and record.interval_index != self.last_sft_interval:
            return f"SFT phase {record.interval_index} follows SFT phase {self.last_sft_interval} without RL"
        return None

    def advance(self, record: MetricsRecord) -> None:
        self.last_step = record.step
        if record.phase in ("rl", "sft"):
            self.last_train = record.phase
        if record.phase == "sft":
            self.last_sft_interval = record.interval_index


def read_records(path: Union[str, os.PathLike]) -> List[Dict[str, Any]]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


class MetricsWriter:

    """Writes one record per line, flushing after each.

    Args:
        path: the JSONL file
        append (bool): continue an existing stream instead of starting a new one
        truncate_after (int, optional): with `append`, drop records whose step exceeds
            this value first (used when resuming from a checkpoint)

    Raises:
        MetricsOrderException: a record's step does not increase or an SFT phase
            follows another SFT phase without RL in between
    """

    def __init__(self, path: Union[str, os.PathLike], append: bool = False,
                 truncate_after: Optional[int] = None) -> None:
        self.path = path
        self.tracker = _PhaseTracker()
        kept: List[str] = []
        if append and os.path.exists(path):
            with open(path) as f:
                lines = [line for line in f if line.strip()]
            for line in lines:
                record = MetricsRecord.from_dict(json.loads(line))
                if truncate_after is not None and record.step > truncate_after:
                    break
                self.tracker.advance(record)
                kept.append(line if line.endswith("\n") else line + "\n")
        self._f = open(path, "w")
        self._f.writelines(kept)
        self._f.flush()

    @property
    def last_step(self) -> int:
        return self.tracker.last_step

    def write(self, record: MetricsRecord) -> None:
        problem = self.tracker.check(record)
        if problem is not None:
            raise MetricsOrderException(problem)
        self._f.write(record.to_json() + "\n")
        self._f.flush()
        self.tracker.advance(record)

    def close(self) -> None:
        self._f.close()

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def audit_metrics(path: Union[str, os.PathLike], p: float, S: int, k: Optional[float] = None,
                  d: Optional[int] = None) -> pd.DataFrame:
    """Re-read a metrics stream and list buffer, phase and freezing violations.

    Checks that steps increase, SFT phases only follow RL, every admission had
    acc <= p and a verified demonstration, every buffer-triggered SFT phase
    started with at least S entries and ended with an empty buffer, and no
    phase reports a frozen parameter that moved.

    Args:
        path: the metrics.jsonl file
        p (float): admission accuracy ceiling
        S (int): switch threshold
        k (float, optional): freeze fraction of a freezing run
        d (int, optional): number of named parameters; with `k`, every buffer SFT
            record must report ceil(k * d) frozen names

    Returns:
        pd.DataFrame: one row per violation (step, rule, detail); empty when clean
    """
    rows = []
    tracker = _PhaseTracker()
    phases: Dict[int, List[Dict[str, Any]]] = {}
    for raw in read_records(path):
        record = MetricsRecord.from_dict(raw)
        problem = tracker.check(record)
        if problem is not None:
            rows.append({"step": record.step, "rule": "order", "detail": problem})
        tracker.advance(record)
        for adm in raw.get("admissions", []):
            if adm["acc"] > p:
                rows.append({"step": record.step, "rule": "admission_acc",
                             "detail": f"seed {adm['seed']} admitted at acc {adm['acc']}"})
            if not adm["verified"]:
                rows.append({"step": record.step, "rule": "admission_verified",
                             "detail": f"seed {adm['seed']} admitted without extract == a"})
        if record.phase == "sft" and raw.get("source") == "buffer":
            phases.setdefault(record.interval_index, []).append(raw)
    for interval, records in phases.items():
        if records[0]["phase_start_buffer"] < S:
            rows.append({"step": records[0]["step"], "rule": "switch_threshold",
                         "detail": f"SFT phase {interval} began with "
                                   f"{records[0]['phase_start_buffer']} < S={S} entries"})
        if records[-1]["buffer_size"] != 0:
            rows.append({"step": records[-1]["step"], "rule": "buffer_drained",
                         "detail": f"SFT phase {interval} ended with "
                                   f"{records[-1]['buffer_size']} entries"})
        identical = records[-1].get("frozen_bit_identical")
        if identical is False or (k is not None and identical is None):
            rows.append({"step": records[-1]["step"], "rule": "freeze_identical",
                         "detail": f"SFT phase {interval} moved a frozen parameter"
                                   if identical is False else
                                   f"SFT phase {interval} did not report its frozen parameters"})
        if k is not None and d is not None:
            expected = n_frozen(k, d)
            for r in records:
                got = r.get("frozen_count", 0)
                if got != expected:
                    rows.append({"step": r["step"], "rule": "freeze_count",
                                 "detail": f"{got} frozen names, expected {expected}"})
    return pd.DataFrame(rows, columns=["step", "rule", "detail"])
