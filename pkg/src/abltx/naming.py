"""Module-path recognition: mapping tensor names to channel semantics.

Decoder checkpoints name their tensors along module paths such as
``model.layers.3.mlp.gate_proj.weight``. A configurable suffix rule table
maps each module path to a :class:`ModuleKind` that fixes which axis of
the weight indexes output channels:

* linear projections and the LM head: channels are weight rows (axis 0),
* token embeddings: channels are hidden-dim columns (axis 1),
* normalization scales: channels are the vector elements themselves.

Paths that match no rule are left out of the channel map and treated as
opaque payload (copied verbatim during merges).
"""

from __future__ import annotations

import re
from dataclasses import dataclass

KIND_LINEAR_OUT = "LinearOut"
KIND_EMBEDDING = "Embedding"
KIND_NORM = "Norm"
KIND_LM_HEAD = "LmHead"

# Channel axis of the module's 2-D weight; None means the weight is 1-D.
_CHANNEL_AXIS = {
    KIND_LINEAR_OUT: 0,
    KIND_LM_HEAD: 0,
    KIND_EMBEDDING: 1,
    KIND_NORM: 0,
}


@dataclass(frozen=True)
class ModuleKind:
    kind: str
    channel_axis: int
    n_channels: int


# Suffix -> kind, checked in order; first match wins. Covers the common
# decoder naming schemes (Llama/Qwen style). Callers may pass their own
# table when a checkpoint uses different names.
DEFAULT_RULE_TABLE: tuple[tuple[str, str], ...] = (
    ("q_proj", KIND_LINEAR_OUT),
    ("k_proj", KIND_LINEAR_OUT),
    ("v_proj", KIND_LINEAR_OUT),
    ("o_proj", KIND_LINEAR_OUT),
    ("gate_proj", KIND_LINEAR_OUT),
    ("up_proj", KIND_LINEAR_OUT),
    ("down_proj", KIND_LINEAR_OUT),
    ("out_proj", KIND_LINEAR_OUT),
    ("fc1", KIND_LINEAR_OUT),
    ("fc2", KIND_LINEAR_OUT),
    ("embed_tokens", KIND_EMBEDDING),
    ("wte", KIND_EMBEDDING),
    ("lm_head", KIND_LM_HEAD),
    ("input_layernorm", KIND_NORM),
    ("post_attention_layernorm", KIND_NORM),
    ("norm", KIND_NORM),
    ("ln_f", KIND_NORM),
)

_PARAM_SUFFIXES = (".weight", ".bias")

_LAYER_RE = re.compile(r"(?:^|\.)layers\.(\d+)(?:\.|$)")


def module_path_of(tensor_name: str) -> tuple[str, str]:
    """Split a tensor name into (module path, parameter name).

    ``model.layers.0.mlp.up_proj.weight`` -> (``model.layers.0.mlp.up_proj``,
    ``weight``). Names without a known parameter suffix map to themselves
    with parameter name ``weight``.
    """
    for suffix in _PARAM_SUFFIXES:
        if tensor_name.endswith(suffix):
            return tensor_name[: -len(suffix)], suffix[1:]
    return tensor_name, "weight"


def kind_of(module_path: str, rule_table=DEFAULT_RULE_TABLE) -> str | None:
    """Resolve a module path to a kind name, or None if no rule matches."""
    last = module_path.rsplit(".", 1)[-1]
    for suffix, kind in rule_table:
        if last == suffix:
            return kind
    return None


def channel_axis_of(kind: str) -> int:
    return _CHANNEL_AXIS[kind]


def n_channels_of(kind: str, shape: tuple[int, ...]) -> int:
    axis = _CHANNEL_AXIS[kind]
    if kind == KIND_NORM:
        if len(shape) != 1:
            raise ValueError(f"norm weight must be 1-D, got shape {shape}")
        return shape[0]
    if len(shape) != 2:
        raise ValueError(f"{kind} weight must be 2-D, got shape {shape}")
    return shape[axis]


def layer_of(module_path: str) -> int | None:
    """Layer index parsed from the path, or None for non-layered modules."""
    m = _LAYER_RE.search(module_path)
    return int(m.group(1)) if m else None


def module_type_of(module_path: str) -> str:
    """Type label for grouping: the last path component."""
    return module_path.rsplit(".", 1)[-1]
