"""Miniature decoder-style network for desk-scale end-to-end oracles.

Generates seeded synthetic checkpoints in the standard decoder naming
scheme (embedding, per-layer norms and q/k/v/o + gate/up/down projections,
final norm, LM head), perturbs chosen channels to build a ground-truth
"ability" sibling, and runs a deterministic forward pass that records
every module's output channels per token.

Attention is replaced by per-token gated projections by default: without
token mixing, a planted channel's effect on its own module output stays
exact, which the localization oracles rely on. A causal-mean mixing
variant exists for realism tests.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import (
    ChannelId,
    CheckpointIndex,
    CheckpointWriter,
    iter_tensor_chunks,
    narrow_from_f64,
    open_checkpoint,
    read_tensor,
    widen_f64,
)
from .dumps import ActivationData, DumpHeader, ROLE_ANSWER, hash_token_ids
from .errors import ContractError
from .rng import fnv1a64

NONLINEARITY_SILU = "silu"


@dataclass(frozen=True)
class SynthSpec:
    n_layers: int = 2
    hidden_dim: int = 16
    intermediate_dim: int = 32
    vocab_size: int = 64
    seed: int = 0
    nonlinearity: str = NONLINEARITY_SILU
    token_mixing: bool = False
    use_bias: bool = False
    dtype: str = "F32"

    def __post_init__(self):
        for name in ("n_layers", "hidden_dim", "intermediate_dim", "vocab_size"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")
        if self.nonlinearity != NONLINEARITY_SILU:
            raise ContractError(f"unsupported nonlinearity {self.nonlinearity!r}")

    @property
    def model_id(self) -> str:
        return f"synth-{self.seed}-L{self.n_layers}h{self.hidden_dim}"

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SynthSpec":
        return cls(**json.loads(text))


@dataclass(frozen=True)
class PerturbationPlan:
    planted_channels: tuple[ChannelId, ...]
    delta_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(
            self, "planted_channels", tuple(sorted(set(self.planted_channels)))
        )


def _tensor_layout(spec: SynthSpec) -> list[tuple[str, tuple[int, ...]]]:
    h, inter, vocab = spec.hidden_dim, spec.intermediate_dim, spec.vocab_size
    layout: list[tuple[str, tuple[int, ...]]] = [("model.embed_tokens.weight", (vocab, h))]
    for i in range(spec.n_layers):
        base = f"model.layers.{i}"
        layout.append((f"{base}.input_layernorm.weight", (h,)))
        for proj in ("q_proj", "k_proj", "v_proj", "o_proj"):
            layout.append((f"{base}.self_attn.{proj}.weight", (h, h)))
            if spec.use_bias:
                layout.append((f"{base}.self_attn.{proj}.bias", (h,)))
        layout.append((f"{base}.post_attention_layernorm.weight", (h,)))
        for proj, shape in (
            ("gate_proj", (inter, h)),
            ("up_proj", (inter, h)),
            ("down_proj", (h, inter)),
        ):
            layout.append((f"{base}.mlp.{proj}.weight", shape))
            if spec.use_bias:
                layout.append((f"{base}.mlp.{proj}.bias", (shape[0],)))
    layout.append(("model.norm.weight", (h,)))
    layout.append(("lm_head.weight", (vocab, h)))
    return layout


def _init_tensor(name: str, shape: tuple[int, ...], seed: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, int(fnv1a64(name)) & 0x7FFFFFFF]))
    if name.endswith("layernorm.weight") or name.endswith("norm.weight"):
        return (1.0 + 0.1 * rng.standard_normal(shape)).astype(np.float32)
    if name.endswith(".bias"):
        return (0.05 * rng.standard_normal(shape)).astype(np.float32)
    if "embed_tokens" in name:
        return rng.standard_normal(shape).astype(np.float32)
    fan_in = shape[-1]
    return (rng.standard_normal(shape) / math.sqrt(fan_in)).astype(np.float32)


def synth_checkpoint(spec: SynthSpec, path, max_chunk_bytes: int = 16 << 20) -> Path:
    """Write a seeded-deterministic synthetic checkpoint; same spec, same bytes."""
    layout = _tensor_layout(spec)
    specs = [(name, spec.dtype, shape) for name, shape in layout]
    metadata = {"model_id": spec.model_id, "synth_spec": spec.to_json()}
    with CheckpointWriter(path, specs, metadata) as writer:
        for name, shape in layout:
            values = _init_tensor(name, shape, spec.seed)
            arr = narrow_from_f64(values.astype(np.float64), spec.dtype)
            if len(shape) > 1:
                row_bytes = arr[0].nbytes if shape[0] else 1
                rows_per = max(1, max_chunk_bytes // max(row_bytes, 1))
                for start in range(0, shape[0], rows_per):
                    writer.write_chunk(name, arr[start : start + rows_per])
            else:
                writer.write_chunk(name, arr)
    return Path(path)


def _perturbation_noise(plan: PerturbationPlan, channel: ChannelId, n: int) -> np.ndarray:
    """Signed noise with magnitude in [0.75, 1.25] * delta_scale.

    The floor keeps every planted slice uniformly detectable; a plain
    gaussian draw can land arbitrarily close to zero, which would turn a
    ground-truth channel invisible by construction. Norm scales get a
    fixed boost: a norm channel owns one scalar, so its activation swing
    is delta * |h| rather than the delta * ||x|| a whole weight row gets.
    """
    rng = np.random.default_rng(
        np.random.SeedSequence(
            [plan.seed, int(fnv1a64(channel.module_path)) & 0x7FFFFFFF, channel.index]
        )
    )
    signs = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    magnitude = 0.75 + 0.5 * rng.random(n)
    scale = plan.delta_scale
    if "norm" in channel.module_path.rsplit(".", 1)[-1]:
        scale *= NORM_NOISE_BOOST
    return scale * signs * magnitude


# Activation swing of a planted weight row grows with sqrt(fan_in); a norm
# scalar does not. This factor puts norm channels in the same signal band.
NORM_NOISE_BOOST = 16.0


def perturb_checkpoint(base_path, plan: PerturbationPlan, out_path, max_chunk_bytes: int = 16 << 20) -> Path:
    """Copy a checkpoint, adding seeded noise to exactly the planted channel
    slices; every other byte is preserved."""
    index = open_checkpoint(base_path)
    for channel in plan.planted_channels:
        entry = index.module_table.get(channel.module_path)
        if entry is None:
            raise ContractError(f"unknown channel module {channel.module_path!r}")
        if not 0 <= channel.index < entry.n_channels:
            raise ContractError(f"channel index {channel.index} out of range")

    by_tensor: dict[str, list[ChannelId]] = {}
    for channel in plan.planted_channels:
        entry = index.module_table[channel.module_path]
        by_tensor.setdefault(entry.weight, []).append(channel)
        if entry.bias is not None:
            by_tensor.setdefault(entry.bias, []).append(channel)

    specs = [(m.name, m.dtype, m.shape) for m in index.tensors.values()]
    with CheckpointWriter(out_path, specs, index.metadata or None) as writer:
        for meta in index.tensors.values():
            touched = by_tensor.get(meta.name)
            if not touched:
                for _, _, chunk in iter_tensor_chunks(index, meta.name, max_chunk_bytes):
                    writer.write_chunk(meta.name, chunk)
                continue
            entry = index.module_table[touched[0].module_path]
            weight_meta = index.tensors[entry.weight]
            row_len = weight_meta.numel // entry.n_channels
            slice_len = row_len + (1 if entry.bias is not None else 0)
            axis = 0 if meta.name == entry.bias or len(meta.shape) == 1 else entry.channel_axis
            for start, stop, chunk in iter_tensor_chunks(index, meta.name, max_chunk_bytes):
                wide = widen_f64(chunk, meta.dtype)
                for channel in touched:
                    # one noise vector covers the whole channel slice: the
                    # weight row/column first, then the bias element
                    noise = _perturbation_noise(plan, channel, slice_len)
                    if meta.name == entry.bias:
                        if start <= channel.index < stop:
                            wide[channel.index - start] += noise[row_len]
                    elif axis == 0:
                        if start <= channel.index < stop:
                            if wide.ndim == 1:
                                wide[channel.index - start] += noise[0]
                            else:
                                wide[channel.index - start] += noise[:row_len]
                    else:
                        wide[:, channel.index] += noise[start:stop]
                writer.write_chunk(meta.name, narrow_from_f64(wide, meta.dtype))
    return Path(out_path)


@dataclass
class _LoadedModel:
    spec_meta: dict
    weights: dict[str, np.ndarray]
    module_order: list[tuple[str, int]]
    model_id: str


def _load_model(checkpoint) -> _LoadedModel:
    index = checkpoint if isinstance(checkpoint, CheckpointIndex) else open_checkpoint(checkpoint)
    weights = {}
    for meta in index.tensors.values():
        weights[meta.name] = widen_f64(read_tensor(index, meta.name), meta.dtype)
    module_order = [(path, entry.n_channels) for path, entry in index.module_table.items()]
    return _LoadedModel(
        spec_meta=index.metadata,
        weights=weights,
        module_order=module_order,
        model_id=index.metadata.get("model_id", index.path.name),
    )


def _silu(x: np.ndarray) -> np.ndarray:
    return x * _sigmoid(x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _rms_norm(x: np.ndarray, scale: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    rms = np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
    return x / rms * scale


def forward_record(checkpoint, token_ids, roles: str | None = None, value_dtype: str = "F32") -> ActivationData:
    """Run the deterministic forward pass and record every module's output
    channels at every token position."""
    model = _load_model(checkpoint)
    token_ids = np.asarray(list(token_ids), dtype=np.int64)
    w = model.weights
    vocab, hidden = w["model.embed_tokens.weight"].shape
    if token_ids.size and (token_ids.min() < 0 or token_ids.max() >= vocab):
        raise ContractError(f"token id out of range for vocab {vocab}")
    if roles is None:
        roles = ROLE_ANSWER * token_ids.size

    spec_meta = model.spec_meta.get("synth_spec")
    token_mixing = bool(json.loads(spec_meta)["token_mixing"]) if spec_meta else False

    def linear(name: str, x: np.ndarray) -> np.ndarray:
        y = x @ w[f"{name}.weight"].T
        bias = w.get(f"{name}.bias")
        return y + bias if bias is not None else y

    recordings: dict[str, np.ndarray] = {}
    h = w["model.embed_tokens.weight"][token_ids]  # (T, hidden)
    recordings["model.embed_tokens"] = h
    n_layers = sum(1 for path, _ in model.module_order if path.endswith("input_layernorm"))
    for i in range(n_layers):
        base = f"model.layers.{i}"
        x = _rms_norm(h, w[f"{base}.input_layernorm.weight"])
        recordings[f"{base}.input_layernorm"] = x
        q = linear(f"{base}.self_attn.q_proj", x)
        k = linear(f"{base}.self_attn.k_proj", x)
        v = linear(f"{base}.self_attn.v_proj", x)
        recordings[f"{base}.self_attn.q_proj"] = q
        recordings[f"{base}.self_attn.k_proj"] = k
        recordings[f"{base}.self_attn.v_proj"] = v
        if token_mixing and v.shape[0] > 1:
            v_eff = np.cumsum(v, axis=0) / np.arange(1, v.shape[0] + 1)[:, None]
        else:
            v_eff = v
        # bounded gates: a large swing in one q/k channel cannot blow up
        # every o channel, which keeps planted-channel oracles sharp
        o = linear(f"{base}.self_attn.o_proj", _sigmoid(q) * _sigmoid(k) * v_eff)
        recordings[f"{base}.self_attn.o_proj"] = o
        h = h + o
        x2 = _rms_norm(h, w[f"{base}.post_attention_layernorm.weight"])
        recordings[f"{base}.post_attention_layernorm"] = x2
        g = linear(f"{base}.mlp.gate_proj", x2)
        u = linear(f"{base}.mlp.up_proj", x2)
        recordings[f"{base}.mlp.gate_proj"] = g
        recordings[f"{base}.mlp.up_proj"] = u
        d = linear(f"{base}.mlp.down_proj", _silu(g) * u)
        recordings[f"{base}.mlp.down_proj"] = d
        h = h + d
    final = _rms_norm(h, w["model.norm.weight"])
    recordings["model.norm"] = final
    recordings["lm_head"] = final @ w["lm_head.weight"].T

    frames = np.concatenate(
        [recordings[path] for path, _ in model.module_order], axis=1
    ).astype(np.float32 if value_dtype == "F32" else np.float16)
    header = DumpHeader(
        model_id=model.model_id,
        input_set_hash=hash_token_ids(token_ids),
        module_table=tuple(model.module_order),
        token_count=int(token_ids.size),
        token_roles=roles,
        value_dtype=value_dtype,
    )
    return ActivationData(header, frames)
