"""Diagnostic probes on parameter updates.

Coordinate-level probes (online gradient dropping, post-hoc pruning) draw
their masks from `mifo.masks`; tensor-level probes (selective dropping,
per-layer magnitudes) work on named parameters. `dr_ratio` measures how much
larger an update is than the smallest update reaching a target decision
margin under a local linearization.
"""

from __future__ import annotations

import re
import warnings
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from mifo.engine import NamedParams, Tape
from mifo.masks import draw_mask
from mifo.model import TinyTransformer, TokenSequence
from mifo.tasks import Demonstration


class ProbeShapeException(Exception):
    pass


class LayerGroupingException(Exception):
    pass


@dataclass(frozen=True)
class ProbeConfig:
    p_on: float = 0.5
    p_post: float = 0.5
    rng_seed: int = 0
    topk_fraction: float = 0.5
    selection: str = "topk"
    prune_grid: Tuple[float, ...] = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
    dr_contexts: int = 200
    margin_offset: float = 1.0
    learning_rate: float = 1e-3

    def __post_init__(self):
        for name in ("p_on", "p_post"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 0.0 <= self.topk_fraction < 1.0:
            raise ValueError("topk_fraction must lie in [0, 1)")
        if self.selection not in ("topk", "random"):
            raise ValueError(f"selection must be 'topk' or 'random', got {self.selection!r}")
        if any(not 0.0 <= r <= 1.0 for r in self.prune_grid):
            raise ValueError("prune_grid rates must lie in [0, 1]")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.margin_offset <= 0 or self.dr_contexts < 1:
            raise ValueError("margin_offset and dr_contexts must be positive")
        object.__setattr__(self, "prune_grid", tuple(float(r) for r in self.prune_grid))

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["prune_grid"] = list(self.prune_grid)
        return d

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "ProbeConfig":
        return cls(**d)


@dataclass(frozen=True)
class MarginProbe:
    context: TokenSequence
    target: int
    epsilon_target: Optional[float] = None


@dataclass
class DRResult:
    m0: float
    g_norm: float
    delta_norm: float
    dr: float
    epsilon_target: float
    competitor: int
    flag: str = "ok"


def _check_pair(theta_0: NamedParams, theta_T: NamedParams) -> None:
    if list(theta_0) != list(theta_T):
        raise ProbeShapeException("parameter name sets differ")
    for name, a in theta_0.items():
        if a.shape != theta_T[name].shape:
            raise ProbeShapeException(f"shape mismatch for '{name}': {a.shape} vs {theta_T[name].shape}")


def _split_like(flat: np.ndarray, like: NamedParams) -> Dict[str, np.ndarray]:
    out, offset = {}, 0
    for name, a in like.items():
        out[name] = flat[offset:offset + a.size].reshape(a.shape)
        offset += a.size
    return out


def online_grad_drop(grads: NamedParams, p_on: float, rng: np.random.Generator) -> NamedParams:
    """Zero each gradient coordinate independently with probability p_on.

    p_on = 0 returns `grads` itself without touching `rng`.
    """
    if not 0.0 <= p_on <= 1.0:
        raise ValueError(f"p_on must lie in [0, 1], got {p_on}")
    if p_on == 0.0:
        return grads
    n = sum(g.size for g in grads.values())
    keep, _ = draw_mask("bernoulli", n, p_on, rng)
    keeps = _split_like(keep, grads)
    return {name: g * keeps[name] for name, g in grads.items()}


def posthoc_prune(theta_0: NamedParams, theta_T: NamedParams, p_post: float,
                  rng: np.random.Generator) -> NamedParams:
    """theta_0 + m * (theta_T - theta_0) with one Bernoulli(1 - p_post) mask over all coordinates.

    Kept coordinates take theta_T's value and dropped ones theta_0's, so both
    endpoints are reproduced bit-exactly.
    """
    _check_pair(theta_0, theta_T)
    if not 0.0 <= p_post <= 1.0:
        raise ValueError(f"p_post must lie in [0, 1], got {p_post}")
    n = sum(a.size for a in theta_0.values())
    keep, _ = draw_mask("bernoulli", n, p_post, rng)
    keeps = _split_like(keep, theta_0)
    return {name: np.where(keeps[name], theta_T[name], theta_0[name]) for name in theta_0}


def selective_topk_drop(theta_0: NamedParams, theta_T: NamedParams,
                        cumulative_changes: Dict[str, float], fraction: float,
                        selection: str = "topk",
                        rng: Optional[np.random.Generator] = None) -> NamedParams:
    """Revert floor(fraction * d) named parameters to theta_0.

    Args:
        theta_0 (NamedParams): start of training
        theta_T (NamedParams): end of training
        cumulative_changes (Dict[str, float]): per-name cumulative RL-induced change
        fraction (float): share of named parameters to revert, in [0, 1)
        selection (str): 'topk' reverts the names with the largest change, 'random' a
            uniformly drawn set of the same size
        rng (np.random.Generator, optional): required for 'random'
    """
    _check_pair(theta_0, theta_T)
    if list(cumulative_changes) != list(theta_0):
        raise ProbeShapeException("cumulative_changes must cover every name in canonical order")
    if not 0.0 <= fraction < 1.0:
        raise ValueError(f"fraction must lie in [0, 1), got {fraction}")
    scores = np.array([cumulative_changes[n] for n in theta_0], dtype=np.float64)
    keep, _ = draw_mask(selection, len(scores), fraction,
                        rng if rng is not None else np.random.default_rng(0), scores)
    return {name: (theta_T[name] if keep[i] else theta_0[name])
            for i, name in enumerate(theta_0)}


_LAYER = re.compile(r"^(layer\.\d+)\.")


def default_layer_grouping(names: Sequence[str]) -> Dict[str, str]:
    """layer.<i>.* -> layer.<i>; embed and pos -> embed; final_ln.* and head -> head."""
    grouping = {}
    for name in names:
        match = _LAYER.match(name)
        if match:
            grouping[name] = match.group(1)
        elif name in ("embed", "pos"):
            grouping[name] = "embed"
        elif name.startswith("final_ln.") or name == "head":
            grouping[name] = "head"
    return grouping


def layer_update_magnitude(theta_0: NamedParams, theta_T: NamedParams,
                           layer_grouping: Optional[Dict[str, str]] = None) -> pd.Series:
    """Per layer, the L2 norm of the concatenated difference of its tensors.

    Raises:
        LayerGroupingException: the grouping does not partition the parameter names
    """
    _check_pair(theta_0, theta_T)
    if layer_grouping is None:
        layer_grouping = default_layer_grouping(list(theta_0))
    missing = [n for n in theta_0 if n not in layer_grouping]
    extra = [n for n in layer_grouping if n not in theta_0]
    if missing or extra:
        raise LayerGroupingException(f"grouping misses {missing} and names unknown {extra}")
    sq: Dict[str, float] = {}
    for name in theta_0:
        layer = layer_grouping[name]
        sq[layer] = sq.get(layer, 0.0) + float(np.sum((theta_T[name] - theta_0[name]) ** 2))
    return pd.Series({layer: np.sqrt(v) for layer, v in sq.items()}, name="update_norm")


def margin_gradient(model: TinyTransformer, params: NamedParams,
                    probe: MarginProbe) -> Tuple[float, int, NamedParams]:
    """Margin m = z_y - z_k* at the last context position and its gradient.

    k* is the strongest non-target logit under `params`.
    """
    tape = Tape()
    pv = tape.leaves(params)
    logits = model.logits_on_tape(tape, pv, probe.context)
    last = logits.value[-1].copy()
    last[probe.target] = -np.inf
    competitor = int(np.argmax(last))

    def pick(token: int):
        sel = np.zeros(logits.shape)
        sel[-1, token] = 1.0
        return tape.forward("masked_select", logits, mask=sel)

    margin = tape.forward("sub", pick(probe.target), pick(competitor))
    return float(margin.value[0]), competitor, tape.backward(margin)


def _flat_norm(arrays: NamedParams) -> float:
    return float(np.sqrt(sum(float(np.sum(a * a)) for a in arrays.values())))


def dr_ratio(theta_0: NamedParams, theta_T: NamedParams, probe: MarginProbe,
             model: TinyTransformer, margin_offset: float = 1.0) -> DRResult:
    """Decision-redundancy ratio ||dtheta|| * ||g|| / (epsilon - m0).

    Args:
        theta_0 (NamedParams): reference parameters, where m0 and g are taken
        theta_T (NamedParams): updated parameters
        probe (MarginProbe): context and target token; epsilon_target defaults to
            m0 + margin_offset
        model (TinyTransformer): architecture the parameters belong to
        margin_offset (float): default gap between the target margin and m0

    Returns:
        DRResult: with flag 'margin_met' (DR = 0) when epsilon <= m0 and 'undefined'
            (DR = nan) when g vanishes
    """
    _check_pair(theta_0, theta_T)
    m0, competitor, g = margin_gradient(model, theta_0, probe)
    eps = probe.epsilon_target if probe.epsilon_target is not None else m0 + margin_offset
    g_norm = _flat_norm(g)
    delta_norm = _flat_norm({n: theta_T[n] - theta_0[n] for n in theta_0})
    if eps <= m0:
        warnings.warn(f"target margin {eps:.4f} already met (m0 = {m0:.4f}); DR reported as 0")
        return DRResult(m0, g_norm, delta_norm, 0.0, eps, competitor, "margin_met")
    if g_norm == 0.0:
        return DRResult(m0, g_norm, delta_norm, float("nan"), eps, competitor, "undefined")
    return DRResult(m0, g_norm, delta_norm, delta_norm * g_norm / (eps - m0), eps, competitor)


def sample_margin_probes(demos: Sequence[Demonstration], n: int,
                         rng: np.random.Generator) -> List[MarginProbe]:
    """Contexts cut from procedural demonstrations; the target is the next solution token."""
    if not demos:
        raise ValueError("need at least one demonstration")
    probes = []
    for _ in range(n):
        demo = demos[int(rng.integers(len(demos)))]
        t = int(rng.integers(len(demo.solution)))
        probes.append(MarginProbe(context=tuple(demo.question.prompt) + tuple(demo.solution[:t]),
                                  target=int(demo.solution[t])))
    return probes


def dr_comparison(model: TinyTransformer, theta_0: NamedParams, theta_sft: NamedParams,
                  theta_rl: NamedParams, probes: Sequence[MarginProbe],
                  margin_offset: float = 1.0) -> Tuple[pd.DataFrame, Dict[str, float]]:
    """DR of the SFT and the RL update over the same contexts.

    Returns:
        Tuple[pd.DataFrame, Dict[str, float]]: one row per context, and a summary with
            the median DR of each paradigm and the fraction of contexts where
            DR_SFT >= DR_RL (over contexts where both are defined)
    """
    rows = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for i, probe in enumerate(probes):
            sft = dr_ratio(theta_0, theta_sft, probe, model, margin_offset)
            rl = dr_ratio(theta_0, theta_rl, probe, model, margin_offset)
            rows.append({"context": i, "m0": sft.m0, "g_norm": sft.g_norm,
                         "epsilon_target": sft.epsilon_target,
                         "delta_norm_sft": sft.delta_norm, "delta_norm_rl": rl.delta_norm,
                         "dr_sft": sft.dr, "dr_rl": rl.dr, "flag": sft.flag})
    df = pd.DataFrame(rows, columns=["context", "m0", "g_norm", "epsilon_target",
                                     "delta_norm_sft", "delta_norm_rl", "dr_sft", "dr_rl",
                                     "flag"]).set_index("context")
    ok = df[df["flag"] == "ok"]
    summary = {
        "contexts": float(len(df)),
        "defined": float(len(ok)),
        "median_dr_sft": float(ok["dr_sft"].median()) if len(ok) else float("nan"),
        "median_dr_rl": float(ok["dr_rl"].median()) if len(ok) else float("nan"),
        "frac_sft_ge_rl": float((ok["dr_sft"] >= ok["dr_rl"]).mean()) if len(ok) else float("nan"),
    }
    return df, summary
