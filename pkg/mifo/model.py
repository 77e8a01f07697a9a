"""Tiny decoder-only transformer policy.

Parameters are a plain ordered dict of float64 arrays (`NamedParams`). The
names are the unit of RL-importance accounting and freezing, so the scheme is
fixed:

    embed, pos,
    layer.<i>.ln1.gain, layer.<i>.ln1.bias,
    layer.<i>.attn.q, layer.<i>.attn.k, layer.<i>.attn.v, layer.<i>.attn.o,
    layer.<i>.ln2.gain, layer.<i>.ln2.bias,
    layer.<i>.mlp.in, layer.<i>.mlp.in_bias, layer.<i>.mlp.out, layer.<i>.mlp.out_bias,
    final_ln.gain, final_ln.bias, head

giving d = 12 * n_layers + 5 named parameters.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from mifo.engine import NamedParams, Tape, Var

logger = logging.getLogger(__name__)

TokenSequence = Tuple[int, ...]

_CAUSAL_FILL = -1e9


class ModelConfigException(Exception):
    pass


class SequenceLengthException(Exception):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 32
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    max_seq_len: int = 64
    init_seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "n_layers", "d_model", "n_heads", "max_seq_len"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value <= 0:
                raise ModelConfigException(f"{name} must be a positive integer, got {value!r}")
        if self.d_model % self.n_heads != 0:
            raise ModelConfigException(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "ModelConfig":
        return cls(**d)


def param_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Canonical parameter names and shapes, in canonical order."""
    D, V = config.d_model, config.vocab_size
    shapes: Dict[str, Tuple[int, ...]] = {"embed": (V, D), "pos": (config.max_seq_len, D)}
    for i in range(config.n_layers):
        p = f"layer.{i}"
        shapes.update({
            f"{p}.ln1.gain": (D,), f"{p}.ln1.bias": (D,),
            f"{p}.attn.q": (D, D), f"{p}.attn.k": (D, D),
            f"{p}.attn.v": (D, D), f"{p}.attn.o": (D, D),
            f"{p}.ln2.gain": (D,), f"{p}.ln2.bias": (D,),
            f"{p}.mlp.in": (D, 4 * D), f"{p}.mlp.in_bias": (4 * D,),
            f"{p}.mlp.out": (4 * D, D), f"{p}.mlp.out_bias": (D,),
        })
    shapes.update({"final_ln.gain": (D,), "final_ln.bias": (D,), "head": (D, V)})
    return shapes


def entropy(log_probs: np.ndarray) -> np.ndarray:
    """Natural-log entropy of each row of a log-probability array."""
    return -(np.exp(log_probs) * log_probs).sum(axis=-1)


class TinyTransformer:

    """Pre-LayerNorm decoder-only transformer with learned absolute positions.

    Example:

        >>> from mifo.model import ModelConfig, TinyTransformer
        >>> model = TinyTransformer(ModelConfig(vocab_size=20, n_layers=1, d_model=8, n_heads=2))
        >>> params = model.init()
        >>> model.forward_logits(params, (1, 2, 3)).shape
        (3, 20)
    """

    def __init__(self, config: ModelConfig, eos_id: Optional[int] = None) -> None:
        """
        Args:
            config (ModelConfig): architecture and init seed
            eos_id (int, optional): token that ends a sampled response. Defaults to None
                (sampling stops at max_new only).
        """
        self.config = config
        self.eos_id = eos_id
        self.head_dim = config.d_model // config.n_heads
        self.shapes = param_shapes(config)

    @property
    def names(self) -> List[str]:
        return list(self.shapes)

    def init(self) -> NamedParams:
        """Scaled-normal weights, unit gains, zero biases; deterministic in init_seed."""
        rng = np.random.default_rng(self.config.init_seed)
        params: NamedParams = {}
        for name, shape in self.shapes.items():
            if name.endswith(".gain"):
                params[name] = np.ones(shape)
            elif name.endswith("bias"):
                params[name] = np.zeros(shape)
            elif name in ("embed", "pos"):
                params[name] = rng.normal(size=shape) / np.sqrt(self.config.d_model)
            else:
                params[name] = rng.normal(size=shape) / np.sqrt(shape[0])
        return params

    def check_params(self, params: NamedParams) -> None:
        if list(params) != self.names:
            raise ModelConfigException("parameter names do not follow the model's name scheme")
        for name, shape in self.shapes.items():
            if params[name].shape != shape:
                raise ModelConfigException(
                    f"parameter '{name}' has shape {params[name].shape}, expected {shape}")

    def _check_tokens(self, tokens: Sequence[int]) -> np.ndarray:
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise SequenceLengthException("token sequence must be nonempty")
        if ids.size > self.config.max_seq_len:
            raise SequenceLengthException(
                f"sequence of length {ids.size} exceeds max_seq_len {self.config.max_seq_len}")
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            raise SequenceLengthException("token id outside the vocabulary")
        return ids

    def logits_on_tape(self, tape: Tape, pv: Dict[str, Var], tokens: Sequence[int]) -> Var:
        """Record the forward pass on `tape`; returns logits of shape [len(tokens), V]."""
        ids = self._check_tokens(tokens)
        T, D, H, dh = ids.size, self.config.d_model, self.config.n_heads, self.head_dim
        f = tape.forward

        x = f("add", f("embedding", pv["embed"], ids=ids),
              f("embedding", pv["pos"], ids=np.arange(T)))
        causal = tape.const(np.triu(np.full((T, T), _CAUSAL_FILL), k=1))
        for i in range(self.config.n_layers):
            p = f"layer.{i}"
            h = f("layer_norm", x, pv[f"{p}.ln1.gain"], pv[f"{p}.ln1.bias"])
            q = f("transpose", f("reshape", f("matmul", h, pv[f"{p}.attn.q"]), shape=(T, H, dh)),
                  axes=(1, 0, 2))
            kT = f("transpose", f("reshape", f("matmul", h, pv[f"{p}.attn.k"]), shape=(T, H, dh)),
                   axes=(1, 2, 0))
            v = f("transpose", f("reshape", f("matmul", h, pv[f"{p}.attn.v"]), shape=(T, H, dh)),
                  axes=(1, 0, 2))
            scores = f("broadcast_add", f("scale", f("matmul", q, kT), factor=1.0 / np.sqrt(dh)),
                       causal)
            att = f("matmul", f("softmax", scores), v)
            merged = f("reshape", f("transpose", att, axes=(1, 0, 2)), shape=(T, D))
            x = f("add", x, f("matmul", merged, pv[f"{p}.attn.o"]))

            h = f("layer_norm", x, pv[f"{p}.ln2.gain"], pv[f"{p}.ln2.bias"])
            h = f("gelu", f("broadcast_add", f("matmul", h, pv[f"{p}.mlp.in"]),
                            pv[f"{p}.mlp.in_bias"]))
            h = f("broadcast_add", f("matmul", h, pv[f"{p}.mlp.out"]), pv[f"{p}.mlp.out_bias"])
            x = f("add", x, h)

        x = f("layer_norm", x, pv["final_ln.gain"], pv["final_ln.bias"])
        return f("matmul", x, pv["head"])

    def response_stats(self, tape: Tape, pv: Dict[str, Var], prompt: Sequence[int],
                       response: Sequence[int]) -> Tuple[Var, Var]:
        """Per-token log pi(o_t | q, o_<t) and entropy H_t over the response, from one pass.

        Both outputs have shape [len(response)] and only response positions contribute.
        """
        if len(prompt) == 0:
            raise SequenceLengthException("prompt must be nonempty")
        if len(response) == 0:
            raise SequenceLengthException("response must be nonempty")
        tokens = tuple(prompt) + tuple(response)
        f = tape.forward
        logp = f("log_softmax", self.logits_on_tape(tape, pv, tokens[:-1]))
        rows = np.zeros(len(tokens) - 1)
        rows[len(prompt) - 1:] = 1.0
        log_probs = f("scale", f("masked_select", f("nll_gather", logp, targets=tokens[1:]),
                                 mask=rows), factor=-1.0)
        ent_rows = f("scale", f("sum", f("mul", f("exp", logp), logp), axis=-1), factor=-1.0)
        entropies = f("masked_select", ent_rows, mask=rows)
        return log_probs, entropies

    def response_log_probs(self, tape: Tape, pv: Dict[str, Var], prompt: Sequence[int],
                           response: Sequence[int]) -> Var:
        return self.response_stats(tape, pv, prompt, response)[0]

    def forward_logits(self, params: NamedParams, tokens: Sequence[int]) -> np.ndarray:
        tape = Tape()
        return self.logits_on_tape(tape, tape.leaves(params, trainable=False), tokens).value

    def token_log_probs(self, params: NamedParams, prompt: Sequence[int],
                        response: Sequence[int]) -> np.ndarray:
        tape = Tape()
        return self.response_stats(tape, tape.leaves(params, trainable=False), prompt,
                                   response)[0].value

    def token_entropies(self, params: NamedParams, prompt: Sequence[int],
                        response: Sequence[int]) -> np.ndarray:
        tape = Tape()
        return self.response_stats(tape, tape.leaves(params, trainable=False), prompt,
                                   response)[1].value

    def sample_response(self, params: NamedParams, prompt: Sequence[int], temperature: float,
                        max_new: int, rng_seed: int,
                        allowed: Optional[Sequence[int]] = None) -> TokenSequence:
        """Sample a continuation of `prompt`.

        Args:
            params (NamedParams): policy parameters (read only)
            prompt (Sequence[int]): nonempty prompt
            temperature (float): 0 means greedy decoding; otherwise softmax(logits / T)
            max_new (int): maximum number of new tokens
            rng_seed (int): seed for the sampling stream
            allowed (Sequence[int], optional): restrict sampling to these token ids

        Returns:
            TokenSequence: generated tokens, including the end token when one was emitted.
        """
        if temperature < 0:
            raise ValueError("temperature must be nonnegative")
        self._check_tokens(prompt)
        rng = np.random.default_rng(rng_seed)
        tokens = list(prompt)
        out: List[int] = []
        restrict = None if allowed is None else np.asarray(allowed, dtype=np.int64)
        while len(out) < max_new and len(tokens) <= self.config.max_seq_len:
            logits = self.forward_logits(params, tokens)[-1]
            if restrict is not None:
                masked = np.full_like(logits, -np.inf)
                masked[restrict] = logits[restrict]
                logits = masked
            if temperature == 0:
                nxt = int(np.argmax(logits))
            else:
                z = logits / temperature
                probs = np.exp(z - z.max())
                cdf = np.cumsum(probs)
                nxt = int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"),
                              logits.size - 1))
            out.append(nxt)
            tokens.append(nxt)
            if self.eos_id is not None and nxt == self.eos_id:
                break
        return tuple(out)


def init(config: ModelConfig) -> NamedParams:
    return TinyTransformer(config).init()
