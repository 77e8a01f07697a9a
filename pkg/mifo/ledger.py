"""RL-importance ledger and the per-named-parameter freeze mask.

At the close of every RL interval i the ledger folds the interval's update
magnitudes into a decayed importance map,

    C~_i = alpha * C_{i-1} + (1 - alpha) * dtheta_i,

freezes the ceil(k * d) most important names for the following SFT phase and
keeps only their importance, C_i = M_i * C~_i, for the next interval.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Any, Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from mifo.engine import NamedParams

logger = logging.getLogger(__name__)


class LedgerKeyException(Exception):
    pass


class LedgerConfigException(Exception):
    pass


@dataclass(frozen=True)
class LedgerConfig:
    alpha: float = 0.5
    k: float = 0.5
    size_normalized: bool = False

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise LedgerConfigException(f"alpha must lie in [0, 1), got {self.alpha}")
        if not 0.0 < self.k < 1.0:
            raise LedgerConfigException(f"k must lie in (0, 1), got {self.k}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "LedgerConfig":
        return cls(**d)


@dataclass(frozen=True)
class FreezeMask:
    M: Dict[str, int]

    @property
    def frozen(self) -> FrozenSet[str]:
        return frozenset(name for name, m in self.M.items() if m)

    def __len__(self) -> int:
        return sum(1 for m in self.M.values() if m)


def _check_keys(a: Dict[str, Any], b: Dict[str, Any]) -> None:
    if list(a) != list(b):
        raise LedgerKeyException("parameter name sets differ")


def rl_update_magnitudes(theta_start: NamedParams, theta_end: NamedParams,
                         size_normalized: bool = False) -> Dict[str, float]:
    """Per named parameter, the L2 norm of theta_end - theta_start.

    Args:
        theta_start (NamedParams): parameters at the start of the RL interval
        theta_end (NamedParams): parameters at the end of the RL interval
        size_normalized (bool): divide each norm by sqrt(size). Defaults to False.

    Raises:
        LedgerKeyException: names or shapes differ
    """
    _check_keys(theta_start, theta_end)
    out = {}
    for name, start in theta_start.items():
        end = theta_end[name]
        if start.shape != end.shape:
            raise LedgerKeyException(f"shape mismatch for '{name}': {start.shape} vs {end.shape}")
        norm = float(np.linalg.norm((end - start).ravel()))
        out[name] = norm / np.sqrt(start.size) if size_normalized else norm
    return out


def n_frozen(k: float, d: int) -> int:
    return int(np.ceil(round(k * d, 9)))


def topk_mask_and_retain(c_tilde: Dict[str, float], k: float) -> Tuple[FreezeMask, Dict[str, float]]:
    """Freeze the ceil(k * d) largest entries, ties to the earlier name; zero the rest."""
    names = list(c_tilde)
    values = np.array([c_tilde[n] for n in names], dtype=np.float64)
    top = set(np.argsort(-values, kind="stable")[:n_frozen(k, len(names))].tolist())
    mask = FreezeMask({n: int(i in top) for i, n in enumerate(names)})
    retained = {n: (c_tilde[n] if i in top else 0.0) for i, n in enumerate(names)}
    return mask, retained


def apply_freeze(grads: NamedParams, mask: FreezeMask) -> NamedParams:
    _check_keys(grads, mask.M)
    return {name: (np.zeros_like(g) if mask.M[name] else g) for name, g in grads.items()}


class ImportanceLedger:

    """History importance map carried across RL->SFT intervals.

    Example:

        >>> from mifo.ledger import ImportanceLedger
        >>> ledger = ImportanceLedger(["a", "b", "c"], alpha=0.5, k=0.5)
        >>> mask = ledger.close_interval_from_deltas({"a": 3.0, "b": 1.0, "c": 2.0})
        >>> sorted(mask.frozen)
        ['a', 'c']
    """

    def __init__(self, names: Sequence[str], alpha: float = 0.5, k: float = 0.5,
                 size_normalized: bool = False) -> None:
        LedgerConfig(alpha=alpha, k=k, size_normalized=size_normalized)
        self.names = list(names)
        self.alpha = alpha
        self.k = k
        self.size_normalized = size_normalized
        self.C: Dict[str, float] = {n: 0.0 for n in self.names}
        self.interval_index = 0
        self.mask: Optional[FreezeMask] = None
        self.history: List[Dict[str, float]] = []

    @classmethod
    def from_config(cls, names: Sequence[str], config: LedgerConfig) -> "ImportanceLedger":
        return cls(names, config.alpha, config.k, config.size_normalized)

    def update_importance(self, deltas: Dict[str, float]) -> Dict[str, float]:
        _check_keys(self.C, deltas)
        return {n: self.alpha * self.C[n] + (1.0 - self.alpha) * deltas[n] for n in self.names}

    def close_interval_from_deltas(self, deltas: Dict[str, float]) -> FreezeMask:
        c_tilde = self.update_importance(deltas)
        self.mask, self.C = topk_mask_and_retain(c_tilde, self.k)
        self.history.append(dict(deltas))
        self.interval_index += 1
        logger.info("interval %d closed: %d of %d names frozen", self.interval_index,
                    len(self.mask), len(self.names))
        return self.mask

    def close_interval(self, theta_start: NamedParams, theta_end: NamedParams) -> FreezeMask:
        """Fold one RL interval into the ledger and return the freeze mask for SFT."""
        return self.close_interval_from_deltas(
            rl_update_magnitudes(theta_start, theta_end, self.size_normalized))

    def unfreeze_all(self) -> None:
        self.mask = None

    @property
    def frozen_count(self) -> int:
        return 0 if self.mask is None else len(self.mask)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "names": self.names,
            "alpha": self.alpha,
            "k": self.k,
            "size_normalized": self.size_normalized,
            "C": [self.C[n] for n in self.names],
            "interval_index": self.interval_index,
            "frozen": None if self.mask is None else sorted(self.mask.frozen),
            "history": [[h[n] for n in self.names] for h in self.history],
        }

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "ImportanceLedger":
        ledger = cls(d["names"], d["alpha"], d["k"], d["size_normalized"])
        ledger.C = dict(zip(ledger.names, map(float, d["C"])))
        ledger.interval_index = int(d["interval_index"])
        if d["frozen"] is not None:
            frozen = set(d["frozen"])
            ledger.mask = FreezeMask({n: int(n in frozen) for n in ledger.names})
        ledger.history = [dict(zip(ledger.names, map(float, h))) for h in d["history"]]
        return ledger
