"""AdamW with per-parameter moment state; runs keep one instance per paradigm."""

from __future__ import annotations

import copy
from typing import AbstractSet, Dict, Optional

import numpy as np

from mifo.engine import NamedParams


class AdamW:

    """Adaptive-moment optimizer with decoupled weight decay.

    Frozen parameters are skipped entirely: no moment update, no step count,
    no weight decay, and the returned array is the input array itself.
    """

    def __init__(self, params: NamedParams, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0) -> None:
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.m: NamedParams = {k: np.zeros_like(v) for k, v in params.items()}
        self.v: NamedParams = {k: np.zeros_like(v) for k, v in params.items()}
        self.t: Dict[str, int] = {k: 0 for k in params}

    def step(self, params: NamedParams, grads: NamedParams, lr: float,
             frozen: Optional[AbstractSet[str]] = None) -> NamedParams:
        frozen = frozen or frozenset()
        out: NamedParams = {}
        for name, p in params.items():
            if name in frozen:
                out[name] = p
                continue
            g = grads[name]
            self.t[name] += 1
            t = self.t[name]
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = self.m[name] / (1 - self.beta1 ** t)
            v_hat = self.v[name] / (1 - self.beta2 ** t)
            out[name] = p - lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p)
        return out

    def snapshot(self) -> "AdamW":
        return copy.deepcopy(self)

    def restore(self, snap: "AdamW") -> None:
        self.m = copy.deepcopy(snap.m)
        self.v = copy.deepcopy(snap.v)
        self.t = dict(snap.t)
