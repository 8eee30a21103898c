"""Masked task-vector transfer and the classic merging baselines.

The core operation adds, channel by channel, the lambda-scaled parameter
difference (ability minus target) onto the target checkpoint, but only on
channels selected by each source's unified mask. Task arithmetic is the
same update with every channel selected; DARE drops task-vector elements
at random and rescales the survivors by 1/(1-p); TIES trims each task
vector to its largest-magnitude elements and resolves sign conflicts
before averaging.

All arithmetic accumulates in float64 and casts back to the target dtype
once, round-to-nearest-even. Channels untouched by every mask keep their
exact target bytes. Tensors outside the channel map are copied verbatim
from the target.
"""

from __future__ import annotations

import json
import math
import queue
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import (
    CheckpointIndex,
    CheckpointWriter,
    dtype_size,
    narrow_from_f64,
    open_checkpoint,
    sha256_file,
    storage_dtype,
    widen_f64,
)
from .errors import ContractError
from .masks import parameter_fraction
from .rng import derive_key, keep_mask

METHOD_ACT = "act"
METHOD_TASK_ARITHMETIC = "ta"
METHOD_TIES = "ties"
METHOD_DARE = "dare"

_METHODS = (METHOD_ACT, METHOD_TASK_ARITHMETIC, METHOD_TIES, METHOD_DARE)

DEFAULT_CHUNK_BYTES = 16 << 20


@dataclass(frozen=True)
class MergeSource:
    path: Path
    mask: object | None  # AbilityMask/UnifiedMask, or None for all channels
    lam: float


@dataclass
class MergePlan:
    target: Path
    sources: list[MergeSource]
    method: str = METHOD_ACT
    ties_trim_fraction: float | None = None
    dare_drop_prob: float | None = None
    seed: int = 0

    def validate(self) -> None:
        if self.method not in _METHODS:
            raise ContractError(f"unknown merge method {self.method!r}")
        if not self.sources:
            raise ContractError("merge plan has no sources")
        for source in self.sources:
            if not math.isfinite(source.lam):
                raise ContractError(f"non-finite lambda for {source.path}")
        if self.method == METHOD_TIES:
            frac = self.ties_trim_fraction
            if frac is None or not 0 < frac <= 1:
                raise ContractError(f"ties trim fraction {frac} not in (0, 1]")
        if self.method == METHOD_DARE:
            p = self.dare_drop_prob
            if p is None or not 0 <= p < 1:
                raise ContractError(f"dare drop probability {p} not in [0, 1)")


def task_vector(target_slice: np.ndarray, ability_slice: np.ndarray) -> np.ndarray:
    """Parameter delta ability - target in float64."""
    a = np.asarray(ability_slice, dtype=np.float64)
    t = np.asarray(target_slice, dtype=np.float64)
    if a.shape != t.shape:
        raise ContractError(f"shape mismatch {a.shape} vs {t.shape}")
    return a - t


def _read_rows(index: CheckpointIndex, name: str, start: int, stop: int) -> np.ndarray:
    meta = index.tensors[name]
    shape = meta.shape
    row_shape = shape[1:] if shape else ()
    row_bytes = math.prod(row_shape) * dtype_size(meta.dtype) if shape else meta.byte_length
    source = index.source_of(name)
    with open(source, "rb") as fh:
        fh.seek(meta.byte_offset + start * row_bytes)
        raw = fh.read((stop - start) * row_bytes)
    if len(raw) != (stop - start) * row_bytes:
        raise ContractError(f"{source}: short read on {name!r}")
    return np.frombuffer(raw, dtype=storage_dtype(meta.dtype)).reshape(
        (stop - start,) + row_shape
    )


class _SourceState:
    def __init__(self, position: int, spec: MergeSource, index: CheckpointIndex):
        self.position = position
        self.spec = spec
        self.index = index
        self.model_id = index.metadata.get("model_id", str(spec.path))
        # module path -> sorted channel indices, or None meaning every channel
        self.selection: dict[str, np.ndarray] | None
        if spec.mask is None:
            self.selection = None
        else:
            per_module: dict[str, list[int]] = {}
            for channel in spec.mask.channels:
                per_module.setdefault(channel.module_path, []).append(channel.index)
            self.selection = {
                path: np.array(sorted(idx), dtype=np.int64)
                for path, idx in per_module.items()
            }

    def channels_for(self, module_path: str, n_channels: int) -> np.ndarray | None:
        """Selected channel indices for one module; None when nothing selected."""
        if self.selection is None:
            return np.arange(n_channels, dtype=np.int64)
        sel = self.selection.get(module_path)
        return sel if sel is not None and sel.size else None


def merge(plan: MergePlan, out_path, max_chunk_bytes: int = DEFAULT_CHUNK_BYTES, workers: int = 1) -> tuple[Path, dict]:
    """Execute a merge plan, streaming tensor by tensor, and return the
    output path plus its manifest."""
    plan.validate()
    target = open_checkpoint(plan.target)
    states = [
        _SourceState(i, spec, open_checkpoint(spec.path))
        for i, spec in enumerate(plan.sources)
    ]
    _validate_pair_compat(target, states)

    # TA is the all-channel degenerate case of the masked update.
    if plan.method == METHOD_TASK_ARITHMETIC:
        for state in states:
            state.selection = None

    out_path = Path(out_path)
    specs = [(m.name, m.dtype, m.shape) for m in target.tensors.values()]
    tensor_to_module = {}
    for path, entry in target.module_table.items():
        tensor_to_module[entry.weight] = (path, "weight")
        if entry.bias is not None:
            tensor_to_module[entry.bias] = (path, "bias")

    writer = CheckpointWriter(out_path, specs, target.metadata or None)

    def job_for(meta):
        def run():
            owner = tensor_to_module.get(meta.name)
            if owner is None:
                yield from _copy_chunks(target, meta.name, max_chunk_bytes)
                return
            module_path, role = owner
            entry = target.module_table[module_path]
            active = [
                (s, sel)
                for s in states
                for sel in [s.channels_for(module_path, entry.n_channels)]
                if sel is not None
            ]
            if not active:
                yield from _copy_chunks(target, meta.name, max_chunk_bytes)
                return
            if plan.method == METHOD_TIES:
                yield from _ties_tensor(plan, target, meta, entry, role, active)
            else:
                yield from _stream_tensor(plan, target, meta, entry, role, active, max_chunk_bytes)

        return run

    jobs = [job_for(meta) for meta in target.tensors.values()]
    names = list(target.tensors)

    def consume(item):
        name_idx, chunk = item
        writer.write_chunk(names[name_idx], chunk)

    _pipeline(
        [_tag_job(i, job) for i, job in enumerate(jobs)],
        workers,
        consume,
    )
    writer.close()

    merged_index = open_checkpoint(out_path)  # re-open validates the output
    manifest = _build_manifest(plan, target, states, merged_index, out_path)
    return out_path, manifest


def _tag_job(idx, job):
    def run():
        for chunk in job():
            yield (idx, chunk)

    return run


def _pipeline(jobs, workers, consume):
    """Run chunk-producing jobs, committing results strictly in job order.

    With workers > 1, up to `workers` jobs run concurrently, each buffering
    at most two pending chunks, so output bytes cannot depend on the
    schedule and memory stays bounded.
    """
    if workers <= 1:
        for job in jobs:
            for item in job():
                consume(item)
        return
    queues: list[queue.Queue] = [queue.Queue(maxsize=2) for _ in jobs]

    def run(job, q):
        try:
            for item in job():
                q.put(("item", item))
            q.put(("done", None))
        except BaseException as exc:  # re-raised on the consumer side
            q.put(("error", exc))

    started = 0

    def start_next():
        nonlocal started
        if started < len(jobs):
            threading.Thread(
                target=run, args=(jobs[started], queues[started]), daemon=True
            ).start()
            started += 1

    for _ in range(min(workers, len(jobs))):
        start_next()
    for q in queues:
        while True:
            kind, payload = q.get()
            if kind == "item":
                consume(payload)
            elif kind == "error":
                raise payload
            else:
                break
        start_next()


def _copy_chunks(index: CheckpointIndex, name: str, max_chunk_bytes: int):
    from .checkpoint import iter_tensor_chunks

    for _, _, chunk in iter_tensor_chunks(index, name, max_chunk_bytes):
        yield chunk


def _validate_pair_compat(target: CheckpointIndex, states: list[_SourceState]) -> None:
    seen_ids: set[str] = set()
    for state in states:
        if state.model_id in seen_ids:
            raise ContractError(f"source model {state.model_id!r} appears more than once")
        seen_ids.add(state.model_id)
        if state.index.module_signature() != target.module_signature():
            raise ContractError(f"{state.spec.path}: module table differs from target")
        for path, entry in target.module_table.items():
            other = state.index.module_table[path]
            for ours, theirs in ((entry.weight, other.weight), (entry.bias, other.bias)):
                if (ours is None) != (theirs is None):
                    raise ContractError(f"bias mismatch on module {path!r}")
                if ours is None:
                    continue
                if target.tensors[ours].shape != state.index.tensors[theirs].shape:
                    raise ContractError(
                        f"shape mismatch on {ours!r}: {target.tensors[ours].shape} vs "
                        f"{state.index.tensors[theirs].shape}"
                    )
        mask = state.spec.mask
        if mask is not None:
            if mask.total_channel_count != target.total_channels():
                raise ContractError(
                    f"mask universe {mask.total_channel_count} does not match target "
                    f"({target.total_channels()} channels)"
                )
            for path, sel in (state.selection or {}).items():
                entry = target.module_table.get(path)
                if entry is None:
                    raise ContractError(f"mask channel module {path!r} missing from target")
                if sel[-1] >= entry.n_channels:
                    raise ContractError(
                        f"mask channel index {int(sel[-1])} out of range for {path!r}"
                    )


def _delta_transform(plan: MergePlan, state: _SourceState, tensor_name: str):
    if plan.method != METHOD_DARE:
        return None
    key = derive_key(plan.seed, state.position, tensor_name)
    p_drop = float(plan.dare_drop_prob)
    scale = 1.0 / (1.0 - p_drop)

    def transform(delta: np.ndarray, flat_index: np.ndarray) -> np.ndarray:
        keep = _keep_by_index(key, flat_index, p_drop)
        return delta * keep * scale

    return transform


def _keep_by_index(key, flat_index: np.ndarray, p_drop: float) -> np.ndarray:
    from .rng import uniform01

    return uniform01(key, flat_index.astype(np.uint64)) >= p_drop


def _stream_tensor(plan, target, meta, entry, role, active, max_chunk_bytes):
    """Chunked masked update for one tensor (ACT / TA / DARE)."""
    source_names = {s.position: s.index.module_table[entry.path] for s, _ in active}
    shape = meta.shape
    axis = 0 if role == "bias" else entry.channel_axis
    row_elems = math.prod(shape[1:]) if len(shape) > 1 else 1
    row_bytes_all = [math.prod(shape[1:]) * dtype_size(meta.dtype) if len(shape) > 1 else dtype_size(meta.dtype)]
    for s, _ in active:
        other = source_names[s.position]
        name = other.weight if role == "weight" else other.bias
        m = s.index.tensors[name]
        row_bytes_all.append(
            math.prod(m.shape[1:]) * dtype_size(m.dtype) if len(m.shape) > 1 else dtype_size(m.dtype)
        )
    rows_per = max(1, max_chunk_bytes // max(max(row_bytes_all), 1))
    n_rows = shape[0]
    transforms = {
        s.position: _delta_transform(plan, s, meta.name) for s, _ in active
    }

    for r0 in range(0, n_rows, rows_per):
        r1 = min(r0 + rows_per, n_rows)
        t_chunk = _read_rows(target, meta.name, r0, r1)
        if axis == 0:
            yield _merge_chunk_axis0(
                meta, role, active, source_names, transforms,
                t_chunk, r0, r1, row_elems,
            )
        else:
            yield _merge_chunk_axis1(
                meta, role, active, source_names, transforms, t_chunk, r0, r1,
            )


def _merge_chunk_axis0(meta, role, active, source_names, transforms,
                       t_chunk, r0, r1, row_elems):
    locals_per_source = []
    for s, sel in active:
        local = sel[(sel >= r0) & (sel < r1)] - r0
        locals_per_source.append((s, local))
    union_local = _sorted_union([loc for _, loc in locals_per_source])
    if union_local.size == 0:
        return t_chunk
    sub_t = widen_f64(t_chunk[union_local], meta.dtype)
    acc = sub_t.copy()
    for s, local in locals_per_source:
        if local.size == 0:
            continue
        other = source_names[s.position]
        name = other.weight if role == "weight" else other.bias
        s_chunk = _read_rows(s.index, name, r0, r1)
        pos = np.searchsorted(union_local, local)
        delta = widen_f64(s_chunk[local], s.index.tensors[name].dtype) - sub_t[pos]
        transform = transforms[s.position]
        if transform is not None:
            rows_global = (local + r0).astype(np.uint64)
            if delta.ndim == 1:
                flat = rows_global
            else:
                flat = rows_global[:, None] * np.uint64(row_elems) + np.arange(
                    row_elems, dtype=np.uint64
                )
            delta = transform(delta, flat)
        acc[pos] += s.spec.lam * delta
    out = t_chunk.copy()
    out[union_local] = narrow_from_f64(acc, meta.dtype)
    return out


def _merge_chunk_axis1(meta, role, active, source_names, transforms,
                       t_chunk, r0, r1):
    n_cols = meta.shape[1]
    cols_per_source = [(s, sel) for s, sel in active]
    union_cols = _sorted_union([sel for _, sel in cols_per_source])
    if union_cols.size == 0:
        return t_chunk
    sub_t = widen_f64(t_chunk[:, union_cols], meta.dtype)
    acc = sub_t.copy()
    for s, sel in cols_per_source:
        if sel.size == 0:
            continue
        other = source_names[s.position]
        name = other.weight if role == "weight" else other.bias
        s_chunk = _read_rows(s.index, name, r0, r1)
        pos = np.searchsorted(union_cols, sel)
        delta = widen_f64(s_chunk[:, sel], s.index.tensors[name].dtype) - sub_t[:, pos]
        transform = transforms[s.position]
        if transform is not None:
            rows_global = np.arange(r0, r1, dtype=np.uint64)
            flat = rows_global[:, None] * np.uint64(n_cols) + sel.astype(np.uint64)[None, :]
            delta = transform(delta, flat)
        acc[:, pos] += s.spec.lam * delta
    out = t_chunk.copy()
    out[:, union_cols] = narrow_from_f64(acc, meta.dtype)
    return out


def _sorted_union(arrays) -> np.ndarray:
    nonempty = [a for a in arrays if a.size]
    if not nonempty:
        return np.empty(0, dtype=np.int64)
    return np.unique(np.concatenate(nonempty))


def _ties_tensor(plan, target, meta, entry, role, active):
    """Trim / elect sign / disjoint-average for one whole tensor.

    Trimming ranks element magnitudes within the tensor, so this path
    materializes the full tensor per source rather than streaming chunks.
    """
    t_full = _read_rows(target, meta.name, 0, meta.shape[0] if meta.shape else 1)
    t_wide = widen_f64(t_full, meta.dtype)
    axis = 0 if role == "bias" else entry.channel_axis
    trimmed: list[tuple[_SourceState, np.ndarray]] = []
    for s, sel in active:
        other = s.index.module_table[entry.path]
        name = other.weight if role == "weight" else other.bias
        s_full = _read_rows(s.index, name, 0, meta.shape[0] if meta.shape else 1)
        delta = widen_f64(s_full, s.index.tensors[name].dtype) - t_wide
        if sel.size != meta.shape[axis]:  # channel mask applied before trimming
            keep = np.zeros(meta.shape[axis], dtype=bool)
            keep[sel] = True
            delta = delta * _axis_mask(keep, delta.ndim, axis)
        trimmed.append((s, _trim_magnitude(delta, plan.ties_trim_fraction)))

    weighted_total = np.zeros_like(t_wide)
    for s, delta in trimmed:
        weighted_total += s.spec.lam * delta
    elected = np.sign(weighted_total)

    merged_delta = np.zeros_like(t_wide)
    agree_count = np.zeros_like(t_wide)
    for s, delta in trimmed:
        agrees = (np.sign(delta) == elected) & (elected != 0)
        merged_delta += np.where(agrees, s.spec.lam * delta, 0.0)
        agree_count += agrees
    merged_delta /= np.maximum(agree_count, 1.0)

    narrowed = narrow_from_f64(t_wide + merged_delta, meta.dtype)
    out = np.where(merged_delta == 0, t_full, narrowed)
    yield np.ascontiguousarray(out, dtype=storage_dtype(meta.dtype))


def _axis_mask(keep: np.ndarray, ndim: int, axis: int) -> np.ndarray:
    shape = [1] * ndim
    shape[axis] = keep.size
    return keep.reshape(shape)


def _trim_magnitude(delta: np.ndarray, trim_fraction: float) -> np.ndarray:
    """Zero all but the top trim_fraction of elements by magnitude.

    The keep count uses the same round-half-up rule as mask sizes; ties at
    the magnitude boundary keep the earliest flat index.
    """
    from .masks import mask_size

    flat = delta.reshape(-1)
    k = mask_size(flat.size, trim_fraction * 100.0)
    if k >= flat.size:
        return delta
    out = np.zeros_like(flat)
    if k > 0:
        order = np.argsort(-np.abs(flat), kind="stable")[:k]
        out[order] = flat[order]
    return out.reshape(delta.shape)


def _build_manifest(plan, target, states, merged_index, out_path) -> dict:
    total_elements = target.total_elements()
    sources = []
    for state in states:
        if state.selection is None:
            channels = target.total_channels()
            elements = sum(
                target.tensors[e.weight].numel + (target.tensors[e.bias].numel if e.bias else 0)
                for e in target.module_table.values()
            )
            mask_desc = "full"
        else:
            channels = sum(v.size for v in state.selection.values())
            mask = state.spec.mask
            elements, _ = parameter_fraction(mask, target)
            mask_desc = {
                "channels": channels,
                "tags": list(getattr(mask, "constituent_tags", ())) or
                        [getattr(mask, "ability_tag", "")],
            }
        sources.append(
            {
                "path": str(state.spec.path),
                "model_id": state.model_id,
                "lambda": state.spec.lam,
                "mask": mask_desc,
                "transferred_channels": channels,
                "transferred_elements": elements,
                "element_fraction": elements / total_elements if total_elements else 0.0,
            }
        )
    method_params: dict[str, float] = {}
    if plan.method == METHOD_TIES:
        method_params["ties_trim_fraction"] = plan.ties_trim_fraction
    if plan.method == METHOD_DARE:
        method_params["dare_drop_prob"] = plan.dare_drop_prob
    return {
        "format": "abltx-merge-manifest",
        "version": 1,
        "method": plan.method,
        "method_params": method_params,
        "seed": plan.seed,
        "target": str(plan.target),
        "sources": sources,
        "output": str(out_path),
        "output_checksum": sha256_file(out_path),
        "notes": {
            "accumulation": "float64, single cast to target dtype (round-to-nearest-even)",
            "ties_trim_granularity": "per tensor, per source, by element magnitude",
            "dare_rng": "counter-based per (tensor, element, source); chunking-invariant",
            "unmapped_tensors": "copied verbatim from target",
        },
    }


def write_manifest(path, manifest: dict) -> Path:
    path = Path(path)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=False) + "\n", encoding="utf-8")
    return path
