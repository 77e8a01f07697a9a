"""Checkpoints as safetensors files.

Tensors are stored under ``param/<name>``, ``adam_m/<name>``, ``adam_v/<name>``
(RL optimizer), ``sft_adam_m/<name>``, ``sft_adam_v/<name>`` (SFT optimizer) and
``rl_start/<name>`` as little-endian float64. The ``manifest`` metadata
entry holds a sorted-key JSON document with the configuration, counters,
ledger, buffer and optimizer step counts. Saving a loaded checkpoint
reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Union

import numpy as np
from safetensors import safe_open
from safetensors.numpy import save_file

from mifo.engine import NamedParams

FORMAT_VERSION = 1

_GROUPS = ("param", "adam_m", "adam_v", "sft_adam_m", "sft_adam_v", "rl_start")


class CheckpointException(Exception):
    pass


@dataclass
class Checkpoint:
    params: NamedParams
    manifest: Dict[str, Any]
    adam_m: NamedParams = field(default_factory=dict)
    adam_v: NamedParams = field(default_factory=dict)
    sft_adam_m: NamedParams = field(default_factory=dict)
    sft_adam_v: NamedParams = field(default_factory=dict)
    rl_start: NamedParams = field(default_factory=dict)

    def save(self, path: Union[str, os.PathLike]) -> None:
        save_checkpoint(path, self)


def save_checkpoint(path: Union[str, os.PathLike], ckpt: Checkpoint) -> None:
    manifest = dict(ckpt.manifest)
    manifest["format_version"] = FORMAT_VERSION
    manifest["param_names"] = list(ckpt.params)
    tensors: Dict[str, np.ndarray] = {}
    for group, arrays in zip(_GROUPS, (ckpt.params, ckpt.adam_m, ckpt.adam_v, ckpt.sft_adam_m,
                                       ckpt.sft_adam_v, ckpt.rl_start)):
        for name, a in arrays.items():
            tensors[f"{group}/{name}"] = np.ascontiguousarray(a, dtype="<f8")
    tmp = f"{path}.tmp"
    save_file(tensors, tmp, metadata={"manifest": json.dumps(manifest, sort_keys=True)})
    os.replace(tmp, path)


def load_checkpoint(path: Union[str, os.PathLike]) -> Checkpoint:
    """
    Raises:
        CheckpointException: the file is missing, unreadable or of another format version
    """
    if not os.path.exists(path):
        raise CheckpointException(f"checkpoint {path} does not exist")
    try:
        with safe_open(str(path), framework="numpy") as f:
            metadata = f.metadata() or {}
            tensors = {key: f.get_tensor(key) for key in f.keys()}
        manifest = json.loads(metadata["manifest"])
    except (OSError, KeyError, ValueError) as e:
        raise CheckpointException(f"cannot read checkpoint {path}: {e}") from e
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointException(f"unsupported checkpoint format {manifest.get('format_version')}")
    names = manifest["param_names"]
    groups = []
    for group in _GROUPS:
        groups.append({n: tensors[f"{group}/{n}"] for n in names if f"{group}/{n}" in tensors})
    if len(groups[0]) != len(names):
        raise CheckpointException(f"checkpoint {path} misses parameter tensors")
    return Checkpoint(params=groups[0], manifest=manifest, adam_m=groups[1], adam_v=groups[2],
                      sft_adam_m=groups[3], sft_adam_v=groups[4], rl_start=groups[5])


def load_params(path: Union[str, os.PathLike]) -> NamedParams:
    return load_checkpoint(path).params
