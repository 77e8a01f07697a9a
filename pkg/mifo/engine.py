"""Reverse-mode differentiable array engine.

A `Tape` records every primitive applied to its arrays in execution order.
`Tape.backward` walks the records once in reverse and returns one gradient
per named leaf. All arrays are float64; masks are 0/1 arrays applied by
elementwise multiplication or `masked_select`.

Example:

    >>> import numpy as np
    >>> from mifo.engine import Tape
    >>> tape = Tape()
    >>> x = tape.leaf("x", np.array([1.0, 2.0]))
    >>> loss = tape.forward("sum", tape.forward("mul", x, x))
    >>> tape.backward(loss)["x"]
    array([2., 4.])
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from numba import njit

NamedParams = Dict[str, np.ndarray]


class EngineShapeException(Exception):
    pass


class EngineOpException(Exception):
    pass


class EngineTapeException(Exception):
    pass


class EngineNonFiniteException(Exception):
    pass


class Var:
    """Handle to one array recorded on a tape."""

    __slots__ = ("tape", "index", "value")

    def __init__(self, tape: "Tape", index: int, value: np.ndarray) -> None:
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(index={self.index}, shape={self.shape})"


@dataclass
class _Node:
    op: str
    inputs: Tuple[int, ...]
    value: np.ndarray
    attrs: Dict[str, Any] = field(default_factory=dict)
    cache: Any = None
    requires_grad: bool = False


@njit(cache=False)
def _scatter_add_rows(out, ids, rows):
    for i in range(ids.shape[0]):
        out[ids[i]] += rows[i]
    return out


def _check_same(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise EngineShapeException(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    return g.reshape((-1,) + shape).sum(axis=0)


# forward rules return (output, cache); backward rules return one gradient
# (or None) per input.

def _matmul_fwd(vals, attrs):
    a, b = vals
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise EngineShapeException(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise EngineShapeException(f"matmul: batch mismatch {a.shape} vs {b.shape}")
    return np.matmul(a, b), None


def _matmul_bwd(g, vals, out, cache, attrs):
    a, b = vals
    ga = np.matmul(g, np.swapaxes(b, -1, -2))
    if b.ndim == 2 and a.ndim > 2:
        gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    else:
        gb = np.matmul(np.swapaxes(a, -1, -2), g)
    return ga, gb


def _add_fwd(vals, attrs):
    _check_same("add", *vals)
    return vals[0] + vals[1], None


def _add_bwd(g, vals, out, cache, attrs):
    return g, g


def _sub_fwd(vals, attrs):
    _check_same("sub", *vals)
    return vals[0] - vals[1], None


def _sub_bwd(g, vals, out, cache, attrs):
    return g, -g


def _broadcast_add_fwd(vals, attrs):
    a, b = vals
    if b.ndim > a.ndim or a.shape[a.ndim - b.ndim:] != b.shape:
        raise EngineShapeException(f"broadcast_add: shape mismatch {a.shape} vs {b.shape}")
    return a + b, None


def _broadcast_add_bwd(g, vals, out, cache, attrs):
    return g, _unbroadcast(g, vals[1].shape)


def _mul_fwd(vals, attrs):
    _check_same("mul", *vals)
    return vals[0] * vals[1], None


def _mul_bwd(g, vals, out, cache, attrs):
    return g * vals[1], g * vals[0]


def _scale_fwd(vals, attrs):
    return vals[0] * float(attrs["factor"]), None


def _scale_bwd(g, vals, out, cache, attrs):
    return (g * float(attrs["factor"]),)


def _exp_fwd(vals, attrs):
    return np.exp(vals[0]), None


def _exp_bwd(g, vals, out, cache, attrs):
    return (g * out,)


def _log_fwd(vals, attrs):
    x = vals[0]
    if np.any(x <= 0.0):
        raise EngineNonFiniteException("log: non-positive input")
    return np.log(x), None


def _log_bwd(g, vals, out, cache, attrs):
    return (g / vals[0],)


_GELU_C = np.sqrt(2.0 / np.pi)


def _gelu_fwd(vals, attrs):
    x = vals[0]
    t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
    return 0.5 * x * (1.0 + t), t


def _gelu_bwd(g, vals, out, t, attrs):
    x = vals[0]
    dt = (1.0 - t ** 2) * _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
    return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)


def _layer_norm_fwd(vals, attrs):
    x, gain, bias = vals
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise EngineShapeException(
            f"layer_norm: shape mismatch {x.shape} vs {gain.shape}/{bias.shape}")
    eps = float(attrs.get("eps", 1e-5))
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    inv_sigma = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_sigma
    return xhat * gain + bias, (xhat, inv_sigma)


def _layer_norm_bwd(g, vals, out, cache, attrs):
    xhat, inv_sigma = cache
    gain = vals[1]
    dxhat = g * gain
    dx = inv_sigma * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                      - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    dgain = (g * xhat).reshape(-1, gain.shape[0]).sum(axis=0)
    dbias = g.reshape(-1, gain.shape[0]).sum(axis=0)
    return dx, dgain, dbias


def _softmax_fwd(vals, attrs):
    x = vals[0]
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True), None


def _softmax_bwd(g, vals, out, cache, attrs):
    return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


def _log_softmax_fwd(vals, attrs):
    x = vals[0]
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True)), None


def _log_softmax_bwd(g, vals, out, cache, attrs):
    return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)


def _embedding_fwd(vals, attrs):
    table = vals[0]
    ids = np.asarray(attrs["ids"], dtype=np.int64)
    if table.ndim != 2 or ids.ndim != 1:
        raise EngineShapeException(f"embedding: shape mismatch {table.shape} vs {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise EngineShapeException(f"embedding: ids out of range for {table.shape}")
    return table[ids], ids


def _embedding_bwd(g, vals, out, ids, attrs):
    grad = np.zeros_like(vals[0])
    return (_scatter_add_rows(grad, ids, np.ascontiguousarray(g)),)


def _nll_gather_fwd(vals, attrs):
    x = vals[0]
    targets = np.asarray(attrs["targets"], dtype=np.int64)
    if x.ndim != 2 or targets.shape != (x.shape[0],):
        raise EngineShapeException(f"nll_gather: shape mismatch {x.shape} vs {targets.shape}")
    return -x[np.arange(x.shape[0]), targets], targets


def _nll_gather_bwd(g, vals, out, targets, attrs):
    grad = np.zeros_like(vals[0])
    grad[np.arange(grad.shape[0]), targets] = -g
    return (grad,)


def _sum_fwd(vals, attrs):
    axis = attrs.get("axis")
    if axis is None:
        return np.array([vals[0].sum()]), None
    return vals[0].sum(axis=axis), None


def _sum_bwd(g, vals, out, cache, attrs):
    x = vals[0]
    axis = attrs.get("axis")
    if axis is None:
        return (np.full_like(x, g[0]),)
    return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)


def _mean_fwd(vals, attrs):
    axis = attrs.get("axis")
    if vals[0].size == 0:
        raise EngineShapeException("mean: empty input")
    if axis is None:
        return np.array([vals[0].mean()]), None
    return vals[0].mean(axis=axis), None


def _mean_bwd(g, vals, out, cache, attrs):
    x = vals[0]
    axis = attrs.get("axis")
    if axis is None:
        return (np.full_like(x, g[0] / x.size),)
    return (np.broadcast_to(np.expand_dims(g / x.shape[axis], axis), x.shape).copy(),)


def _masked_select_fwd(vals, attrs):
    x = vals[0]
    mask = np.asarray(attrs["mask"])
    if mask.shape != x.shape:
        raise EngineShapeException(f"masked_select: shape mismatch {x.shape} vs {mask.shape}")
    keep = mask.astype(bool)
    return x[keep], keep


def _masked_select_bwd(g, vals, out, keep, attrs):
    grad = np.zeros_like(vals[0])
    grad[keep] = g
    return (grad,)


def _clip_fwd(vals, attrs):
    return np.clip(vals[0], attrs["lo"], attrs["hi"]), None


def _clip_bwd(g, vals, out, cache, attrs):
    x = vals[0]
    inside = (x >= attrs["lo"]) & (x <= attrs["hi"])
    return (g * inside,)


def _minimum_fwd(vals, attrs):
    _check_same("minimum", *vals)
    first = vals[0] <= vals[1]
    return np.where(first, vals[0], vals[1]), first


def _minimum_bwd(g, vals, out, first, attrs):
    return g * first, g * ~first


def _transpose_fwd(vals, attrs):
    axes = tuple(attrs["axes"])
    if sorted(axes) != list(range(vals[0].ndim)):
        raise EngineShapeException(f"transpose: axes {axes} invalid for {vals[0].shape}")
    return np.ascontiguousarray(np.transpose(vals[0], axes)), None


def _transpose_bwd(g, vals, out, cache, attrs):
    return (np.transpose(g, np.argsort(attrs["axes"])),)


def _reshape_fwd(vals, attrs):
    shape = tuple(attrs["shape"])
    if int(np.prod(shape)) != vals[0].size:
        raise EngineShapeException(f"reshape: shape mismatch {vals[0].shape} vs {shape}")
    return vals[0].reshape(shape), None


def _reshape_bwd(g, vals, out, cache, attrs):
    return (g.reshape(vals[0].shape),)


PRIMITIVES: Dict[str, Tuple[int, Callable, Callable]] = {
    "matmul": (2, _matmul_fwd, _matmul_bwd),
    "add": (2, _add_fwd, _add_bwd),
    "sub": (2, _sub_fwd, _sub_bwd),
    "broadcast_add": (2, _broadcast_add_fwd, _broadcast_add_bwd),
    "mul": (2, _mul_fwd, _mul_bwd),
    "scale": (1, _scale_fwd, _scale_bwd),
    "exp": (1, _exp_fwd, _exp_bwd),
    "log": (1, _log_fwd, _log_bwd),
    "gelu": (1, _gelu_fwd, _gelu_bwd),
    "layer_norm": (3, _layer_norm_fwd, _layer_norm_bwd),
    "softmax": (1, _softmax_fwd, _softmax_bwd),
    "log_softmax": (1, _log_softmax_fwd, _log_softmax_bwd),
    "embedding": (1, _embedding_fwd, _embedding_bwd),
    "nll_gather": (1, _nll_gather_fwd, _nll_gather_bwd),
    "sum": (1, _sum_fwd, _sum_bwd),
    "mean": (1, _mean_fwd, _mean_bwd),
    "masked_select": (1, _masked_select_fwd, _masked_select_bwd),
    "clip": (1, _clip_fwd, _clip_bwd),
    "minimum": (2, _minimum_fwd, _minimum_bwd),
    "transpose": (1, _transpose_fwd, _transpose_bwd),
    "reshape": (1, _reshape_fwd, _reshape_bwd),
}


class Tape:
    """Records primitive applications for one loss evaluation.

    A tape is single-threaded. Separate tapes may run concurrently as long as
    they do not share leaf arrays that someone mutates.
    """

    def __init__(self) -> None:
        self.nodes: List[_Node] = []
        self.leaf_index: Dict[str, int] = {}

    def _push(self, node: _Node) -> Var:
        self.nodes.append(node)
        return Var(self, len(self.nodes) - 1, node.value)

    def leaf(self, name: str, array: np.ndarray) -> Var:
        """Register a trainable array under `name`."""
        if not isinstance(array, np.ndarray):
            raise TypeError(f"leaf '{name}' must be a numpy array, got {type(array).__name__}")
        if name in self.leaf_index:
            raise EngineTapeException(f"leaf '{name}' already registered")
        value = np.asarray(array, dtype=np.float64)
        var = self._push(_Node("leaf", (), value, {"name": name}, requires_grad=True))
        self.leaf_index[name] = var.index
        return var

    def const(self, array: Any) -> Var:
        """Register a non-trainable input."""
        return self._push(_Node("const", (), np.asarray(array, dtype=np.float64)))

    def leaves(self, params: NamedParams, trainable: bool = True) -> Dict[str, Var]:
        """Register every entry of `params`, in order."""
        if trainable:
            return {name: self.leaf(name, value) for name, value in params.items()}
        return {name: self.const(value) for name, value in params.items()}

    def forward(self, primitive: str, *inputs: Var, **attrs: Any) -> Var:
        """Apply `primitive` to `inputs` and record it.

        Raises:
            EngineOpException: unsupported primitive or wrong arity
            EngineTapeException: an input belongs to another tape
            EngineShapeException: incompatible input shapes
            EngineNonFiniteException: the output contains NaN or Inf
        """
        rule = PRIMITIVES.get(primitive)
        if rule is None:
            raise EngineOpException(f"unsupported primitive '{primitive}'")
        arity, fwd, _ = rule
        if len(inputs) != arity:
            raise EngineOpException(f"{primitive} expects {arity} inputs, got {len(inputs)}")
        for v in inputs:
            if not isinstance(v, Var) or v.tape is not self:
                raise EngineTapeException(f"{primitive}: input is not on this tape")
        vals = [v.value for v in inputs]
        out, cache = fwd(vals, attrs)
        out = np.asarray(out, dtype=np.float64)
        if not np.all(np.isfinite(out)):
            raise EngineNonFiniteException(f"{primitive} produced non-finite values")
        requires = any(self.nodes[v.index].requires_grad for v in inputs)
        return self._push(_Node(primitive, tuple(v.index for v in inputs), out, attrs,
                                cache, requires))

    def backward(self, loss: Var) -> NamedParams:
        """Gradient of a [1]-shaped loss with respect to every leaf.

        Leaves with no path to the loss get zero arrays.

        Raises:
            EngineTapeException: the loss was recorded on another tape
            EngineShapeException: the loss is not of shape [1]
        """
        if not isinstance(loss, Var) or loss.tape is not self:
            raise EngineTapeException("loss was not produced on this tape")
        if loss.shape != (1,):
            raise EngineShapeException(f"loss must have shape (1,), got {loss.shape}")
        grads: List[Optional[np.ndarray]] = [None] * (loss.index + 1)
        grads[loss.index] = np.ones(1)
        for i in range(loss.index, -1, -1):
            g = grads[i]
            node = self.nodes[i]
            if g is None or not node.requires_grad or node.op in ("leaf", "const"):
                continue
            _, _, bwd = PRIMITIVES[node.op]
            vals = [self.nodes[j].value for j in node.inputs]
            for j, gj in zip(node.inputs, bwd(g, vals, node.value, node.cache, node.attrs)):
                if gj is None or not self.nodes[j].requires_grad:
                    continue
                grads[j] = gj if grads[j] is None else grads[j] + gj
        out: NamedParams = {}
        for name, idx in self.leaf_index.items():
            g = grads[idx] if idx < len(grads) else None
            out[name] = np.zeros_like(self.nodes[idx].value) if g is None else np.asarray(g)
        return out


def forward(tape: Tape, primitive: str, *inputs: Var, **attrs: Any) -> Var:
    return tape.forward(primitive, *inputs, **attrs)


def backward(tape: Tape, scalar_loss: Var) -> NamedParams:
    return tape.backward(scalar_loss)


@dataclass
class GradCheckReport:
    max_rel_err: Dict[str, float]
    checked: Dict[str, int]
    non_finite: List[Tuple[str, int]]
    tol: float
    passed: bool

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "leaf": list(self.max_rel_err),
            "max_rel_err": list(self.max_rel_err.values()),
            "coordinates": [self.checked[k] for k in self.max_rel_err],
        }).set_index("leaf")


def finite_diff_check(f: Callable[[Tape, Dict[str, Var]], Var],
                      leaves: NamedParams,
                      eps: float = 1e-5,
                      tol: float = 1e-4,
                      coords_per_leaf: Optional[int] = None,
                      seed: int = 0,
                      abs_floor: float = 1e-8) -> GradCheckReport:
    """Compare `backward` against central differences.

    Args:
        f (callable): builds a [1]-shaped loss from a tape and its leaf vars; must be
            deterministic given the leaves
        leaves (NamedParams): the point at which gradients are checked
        eps (float): perturbation size. Defaults to 1e-5.
        tol (float): relative error tolerance. Defaults to 1e-4.
        coords_per_leaf (int, optional): check only this many seeded random coordinates
            per leaf. Defaults to None (all coordinates).
        seed (int): seed for the coordinate subset.
        abs_floor (float): coordinates whose absolute error is below this pass
            regardless of relative error.

    Returns:
        GradCheckReport: max relative error per leaf and the overall verdict.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")

    tape = Tape()
    loss = f(tape, tape.leaves(leaves))
    analytic = tape.backward(loss)

    def value_at(point: NamedParams) -> float:
        t = Tape()
        return float(f(t, t.leaves(point)).value[0])

    rng = np.random.default_rng(seed)
    max_rel: Dict[str, float] = {}
    checked: Dict[str, int] = {}
    non_finite: List[Tuple[str, int]] = []
    passed = True
    for name, base in leaves.items():
        flat = np.asarray(base, dtype=np.float64).ravel()
        coords = np.arange(flat.size)
        if coords_per_leaf is not None and flat.size > coords_per_leaf:
            coords = np.sort(rng.choice(flat.size, size=coords_per_leaf, replace=False))
        worst = 0.0
        for c in coords:
            vals = []
            for sign in (1.0, -1.0):
                bumped = flat.copy()
                bumped[c] += sign * eps
                point = dict(leaves)
                point[name] = bumped.reshape(np.shape(base))
                try:
                    vals.append(value_at(point))
                except EngineNonFiniteException:
                    vals.append(np.nan)
            if not np.all(np.isfinite(vals)):
                non_finite.append((name, int(c)))
                passed = False
                continue
            numeric = (vals[0] - vals[1]) / (2 * eps)
            exact = analytic[name].ravel()[c]
            abs_err = abs(exact - numeric)
            if abs_err <= abs_floor:
                continue
            rel = abs_err / max(abs(exact), abs(numeric))
            worst = max(worst, rel)
        max_rel[name] = worst
        checked[name] = int(coords.size)
        passed = passed and worst <= tol
    return GradCheckReport(max_rel, checked, non_finite, tol, passed)
