"""Checkpoint reading and writing in the safetensors layout.

A checkpoint file is: an 8-byte little-endian header length, a UTF-8 JSON
header mapping tensor name to ``{dtype, shape, data_offsets}``, then the
raw row-major tensor bytes. Supported dtypes are F32, F16 and BF16, all
handled byte-exactly (BF16 is carried as uint16 storage since numpy has
no native bfloat16).

Reading is lazy: :func:`open_checkpoint` parses and validates the header
only; tensor payloads stream through :func:`iter_tensor_chunks` in
bounded-size pieces. Writing goes through :class:`CheckpointWriter`,
which commits tensors sequentially in index order.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple

import numpy as np

from .errors import ContractError, FormatError
from .naming import (
    ModuleKind,
    channel_axis_of,
    kind_of,
    module_path_of,
    n_channels_of,
)

_HEADER_GUARD = 100_000_000  # refuse absurd header sizes

_DTYPE_SIZE = {"F32": 4, "F16": 2, "BF16": 2}
_STORAGE_DTYPE = {"F32": "<f4", "F16": "<f2", "BF16": "<u2"}


def dtype_size(code: str) -> int:
    try:
        return _DTYPE_SIZE[code]
    except KeyError:
        raise FormatError(f"unsupported dtype {code!r}") from None


def storage_dtype(code: str) -> np.dtype:
    return np.dtype(_STORAGE_DTYPE[code])


def widen_f64(arr: np.ndarray, code: str) -> np.ndarray:
    """Storage array -> float64 values (BF16 widens through float32, exact)."""
    if code == "BF16":
        as_f32 = (arr.astype(np.uint32) << 16).view(np.float32)
        with np.errstate(invalid="ignore"):  # signaling-NaN payloads are legal
            return as_f32.astype(np.float64)
    return arr.astype(np.float64)


def narrow_from_f64(arr: np.ndarray, code: str) -> np.ndarray:
    """float64 values -> storage array, round-to-nearest-even."""
    if code == "F32":
        return arr.astype("<f4")
    if code == "F16":
        return arr.astype("<f2")
    if code == "BF16":
        return _f32_to_bf16(arr.astype(np.float32))
    raise FormatError(f"unsupported dtype {code!r}")


def _f32_to_bf16(arr: np.ndarray) -> np.ndarray:
    """Round float32 to bfloat16 bits (nearest-even), quieting NaNs."""
    u = np.ascontiguousarray(arr, dtype="<f4").view(np.uint32)
    nan = (u & np.uint32(0x7FFFFFFF)) > np.uint32(0x7F800000)
    rounded = u + (np.uint32(0x7FFF) + ((u >> 16) & np.uint32(1)))
    out = (rounded >> 16).astype(np.uint16)
    if nan.any():
        out = np.where(nan, ((u >> 16) & np.uint16(0x8000)) | np.uint16(0x7FC0), out)
    return out.astype("<u2").reshape(arr.shape)


@dataclass(frozen=True)
class TensorMeta:
    name: str
    dtype: str
    shape: tuple[int, ...]
    byte_offset: int  # absolute offset of the payload within the file
    byte_length: int

    @property
    def numel(self) -> int:
        return math.prod(self.shape)


@dataclass(frozen=True)
class ModuleEntry:
    """One channel-mapped module: its kind plus owning tensor names."""

    path: str
    kind: ModuleKind
    weight: str
    bias: str | None = None

    @property
    def n_channels(self) -> int:
        return self.kind.n_channels

    @property
    def channel_axis(self) -> int:
        return self.kind.channel_axis


class ChannelId(NamedTuple):
    """Globally unique channel identity, totally ordered by (path, index)."""

    module_path: str
    index: int


class SlicePart(NamedTuple):
    tensor_name: str
    axis: int
    index: int
    n_elements: int


@dataclass(frozen=True)
class ChannelSlice:
    """The parameters owned by one channel: a weight row/column/element,
    plus the matching bias element when the module has a bias."""

    channel: ChannelId
    parts: tuple[SlicePart, ...]

    @property
    def n_elements(self) -> int:
        return sum(p.n_elements for p in self.parts)


@dataclass
class CheckpointIndex:
    path: Path
    tensors: dict[str, TensorMeta]
    module_table: dict[str, ModuleEntry]
    metadata: dict[str, str] = field(default_factory=dict)
    data_start: int = 0
    # tensor name -> file holding its payload; only populated for sharded
    # checkpoints opened from an ordered file list
    shard_of: dict[str, Path] = field(default_factory=dict)

    def source_of(self, name: str) -> Path:
        return self.shard_of.get(name, self.path)

    def module_signature(self) -> tuple[tuple[str, int], ...]:
        """Canonical (path, n_channels) listing used for universe checks."""
        return tuple(sorted((p, e.n_channels) for p, e in self.module_table.items()))

    def total_channels(self) -> int:
        return sum(e.n_channels for e in self.module_table.values())

    def total_elements(self) -> int:
        return sum(m.numel for m in self.tensors.values())

    def channel_elements(self, module_path: str) -> int:
        """Parameter elements owned by each channel of the given module."""
        entry = self.module_table[module_path]
        weight = self.tensors[entry.weight]
        per = weight.numel // entry.n_channels
        if entry.bias is not None:
            per += 1
        return per


def _parse_header(raw: bytes, path: Path) -> tuple[dict, dict[str, str]]:
    def reject_dupes(pairs):
        seen = {}
        for key, value in pairs:
            if key in seen:
                raise FormatError(f"{path}: duplicate name {key!r} in header")
            seen[key] = value
        return seen

    try:
        header = json.loads(raw.decode("utf-8"), object_pairs_hook=reject_dupes)
    except FormatError:
        raise
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed header JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise FormatError(f"{path}: header is not a JSON object")
    metadata = header.pop("__metadata__", {})
    if not isinstance(metadata, dict):
        raise FormatError(f"{path}: __metadata__ is not an object")
    return header, {str(k): str(v) for k, v in metadata.items()}


def _build_module_table(tensors: dict[str, TensorMeta], rule_table) -> dict[str, ModuleEntry]:
    weights: dict[str, str] = {}
    biases: dict[str, str] = {}
    order: list[str] = []
    for name in tensors:
        mod, param = module_path_of(name)
        if param == "weight":
            weights[mod] = name
            order.append(mod)
        elif param == "bias":
            biases[mod] = name
    table: dict[str, ModuleEntry] = {}
    for mod in order:
        kind_name = kind_of(mod, rule_table)
        if kind_name is None:
            continue
        meta = tensors[weights[mod]]
        try:
            n_channels = n_channels_of(kind_name, meta.shape)
        except ValueError as exc:
            raise FormatError(f"{meta.name}: {exc}") from exc
        kind = ModuleKind(kind_name, channel_axis_of(kind_name), n_channels)
        bias_name = biases.get(mod)
        if bias_name is not None:
            bias_meta = tensors[bias_name]
            if bias_meta.shape != (n_channels,):
                raise FormatError(
                    f"{bias_name}: bias shape {bias_meta.shape} does not match "
                    f"{n_channels} channels of {mod}"
                )
        table[mod] = ModuleEntry(mod, kind, weights[mod], bias_name)
    return table


def open_checkpoint(path, rule_table=None) -> CheckpointIndex:
    """Parse and validate a checkpoint header without loading any payload.

    Accepts a single file or an ordered list of shard files; shards must
    not repeat tensor names and are treated as one concatenated tensor map.
    """
    from .naming import DEFAULT_RULE_TABLE

    if isinstance(path, (list, tuple)):
        return _open_sharded(path, rule_table or DEFAULT_RULE_TABLE)
    path = Path(path)
    size = path.stat().st_size
    with open(path, "rb") as fh:
        prefix = fh.read(8)
        if len(prefix) < 8:
            raise FormatError(f"{path}: file too short for header length")
        header_len = int.from_bytes(prefix, "little")
        if header_len > _HEADER_GUARD or 8 + header_len > size:
            raise FormatError(f"{path}: header length {header_len} exceeds file size")
        header, metadata = _parse_header(fh.read(header_len), path)

    data_start = 8 + header_len
    data_size = size - data_start
    tensors: dict[str, TensorMeta] = {}
    spans: list[tuple[int, int, str]] = []
    for name, entry in header.items():
        try:
            code = entry["dtype"]
            shape = tuple(int(d) for d in entry["shape"])
            begin, end = entry["data_offsets"]
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: malformed entry for {name!r}: {exc}") from exc
        if any(d < 0 for d in shape):
            raise FormatError(f"{path}: negative dimension in {name!r}")
        expected = math.prod(shape) * dtype_size(code)
        if end - begin != expected:
            raise FormatError(
                f"{path}: {name!r} spans {end - begin} bytes, expected {expected}"
            )
        if begin < 0 or end > data_size:
            raise FormatError(f"{path}: truncated payload for {name!r}")
        tensors[name] = TensorMeta(name, code, shape, data_start + begin, expected)
        spans.append((begin, end, name))

    spans.sort()
    cursor = 0
    for begin, end, name in spans:
        if begin < cursor:
            raise FormatError(f"{path}: overlapping payload at {name!r}")
        cursor = max(cursor, end)
    if cursor != data_size:
        raise FormatError(f"{path}: payload size {data_size} does not match header ({cursor})")

    table = _build_module_table(tensors, rule_table or DEFAULT_RULE_TABLE)
    return CheckpointIndex(path, tensors, table, metadata, data_start)


def _open_sharded(paths, rule_table) -> CheckpointIndex:
    if not paths:
        raise ContractError("empty shard list")
    shards = [open_checkpoint(p, rule_table) for p in paths]
    tensors: dict[str, TensorMeta] = {}
    shard_of: dict[str, Path] = {}
    metadata: dict[str, str] = {}
    for shard in shards:
        for name, meta in shard.tensors.items():
            if name in tensors:
                raise FormatError(f"duplicate name {name!r} across shards")
            tensors[name] = meta
            shard_of[name] = shard.path
        metadata.update(shard.metadata)
    table = _build_module_table(tensors, rule_table)
    return CheckpointIndex(shards[0].path, tensors, table, metadata, shards[0].data_start, shard_of)


def read_tensor(index: CheckpointIndex, name: str) -> np.ndarray:
    """Load one tensor fully, in storage dtype (uint16 for BF16)."""
    meta = index.tensors[name]
    source = index.source_of(name)
    with open(source, "rb") as fh:
        fh.seek(meta.byte_offset)
        raw = fh.read(meta.byte_length)
    if len(raw) != meta.byte_length:
        raise FormatError(f"{source}: short read on {name!r}")
    return np.frombuffer(raw, dtype=storage_dtype(meta.dtype)).reshape(meta.shape)


def iter_tensor_chunks(
    index: CheckpointIndex, name: str, max_chunk_bytes: int = 64 << 20
) -> Iterator[tuple[int, int, np.ndarray]]:
    """Stream a tensor as (row_start, row_end, array) chunks of whole
    leading-axis rows, each at most ``max_chunk_bytes`` (always at least
    one row). Scalars and empty tensors yield a single chunk."""
    meta = index.tensors[name]
    shape = meta.shape
    n_rows = shape[0] if shape else 1
    row_shape = shape[1:] if shape else ()
    row_bytes = math.prod(row_shape) * dtype_size(meta.dtype) if shape else meta.byte_length
    if n_rows == 0 or meta.byte_length == 0:
        yield 0, n_rows, np.empty(shape, dtype=storage_dtype(meta.dtype))
        return
    rows_per = max(1, max_chunk_bytes // max(row_bytes, 1))
    source = index.source_of(name)
    with open(source, "rb") as fh:
        for start in range(0, n_rows, rows_per):
            stop = min(start + rows_per, n_rows)
            fh.seek(meta.byte_offset + start * row_bytes)
            raw = fh.read((stop - start) * row_bytes)
            if len(raw) != (stop - start) * row_bytes:
                raise FormatError(f"{source}: short read on {name!r}")
            arr = np.frombuffer(raw, dtype=storage_dtype(meta.dtype))
            yield start, stop, arr.reshape((stop - start,) + row_shape if shape else shape)


def channel_slice(index: CheckpointIndex, channel: ChannelId) -> ChannelSlice:
    """Describe exactly the parameters owned by one channel."""
    entry = index.module_table.get(channel.module_path)
    if entry is None:
        raise ContractError(f"unknown module {channel.module_path!r}")
    if not 0 <= channel.index < entry.n_channels:
        raise ContractError(
            f"channel index {channel.index} out of range for "
            f"{channel.module_path!r} ({entry.n_channels} channels)"
        )
    weight = index.tensors[entry.weight]
    per_channel = weight.numel // entry.n_channels
    parts = [SlicePart(entry.weight, entry.channel_axis, channel.index, per_channel)]
    if entry.bias is not None:
        parts.append(SlicePart(entry.bias, 0, channel.index, 1))
    return ChannelSlice(channel, tuple(parts))


def read_channel_values(index: CheckpointIndex, channel: ChannelId) -> np.ndarray:
    """Gather one channel's parameter values as float64 (weight slice, then
    bias element). Column channels stream row chunks to stay memory-bounded."""
    desc = channel_slice(index, channel)
    out: list[np.ndarray] = []
    for part in desc.parts:
        meta = index.tensors[part.tensor_name]
        if part.axis == 0:
            if len(meta.shape) <= 1:
                value = _read_row(index, meta, part.index, 1)
            else:
                value = _read_row(index, meta, part.index, math.prod(meta.shape[1:]))
            out.append(widen_f64(value, meta.dtype))
        else:
            pieces = [
                widen_f64(chunk[:, part.index], meta.dtype)
                for _, _, chunk in iter_tensor_chunks(index, part.tensor_name)
            ]
            out.append(np.concatenate(pieces))
    return np.concatenate(out)


def _read_row(index: CheckpointIndex, meta: TensorMeta, row: int, row_elems: int) -> np.ndarray:
    row_bytes = row_elems * dtype_size(meta.dtype)
    source = index.source_of(meta.name)
    with open(source, "rb") as fh:
        fh.seek(meta.byte_offset + row * row_bytes)
        raw = fh.read(row_bytes)
    if len(raw) != row_bytes:
        raise FormatError(f"{source}: short read on {meta.name!r}")
    return np.frombuffer(raw, dtype=storage_dtype(meta.dtype))


class CheckpointWriter:
    """Single-writer streaming output. Tensor payloads must arrive in the
    declared order, each exactly once; chunks append sequentially."""

    def __init__(self, path, specs: list[tuple[str, str, tuple[int, ...]]], metadata=None):
        self.path = Path(path)
        self._specs = list(specs)
        names = [name for name, _, _ in self._specs]
        if len(set(names)) != len(names):
            raise ContractError("duplicate tensor name in writer spec")
        header: dict[str, object] = {}
        if metadata:
            header["__metadata__"] = {str(k): str(v) for k, v in metadata.items()}
        offset = 0
        self._expected: dict[str, tuple[str, tuple[int, ...], int]] = {}
        for name, code, shape in self._specs:
            length = math.prod(shape) * dtype_size(code)
            header[name] = {
                "dtype": code,
                "shape": list(shape),
                "data_offsets": [offset, offset + length],
            }
            self._expected[name] = (code, tuple(shape), length)
            offset += length
        blob = json.dumps(header, separators=(",", ":")).encode("utf-8")
        if len(blob) % 8:
            blob += b" " * (8 - len(blob) % 8)
        self._fh = open(self.path, "wb")
        self._fh.write(len(blob).to_bytes(8, "little"))
        self._fh.write(blob)
        self._cursor = 0  # index of tensor currently being written
        self._written = 0  # bytes written for the current tensor

    def write_chunk(self, name: str, arr: np.ndarray) -> None:
        if self._cursor >= len(self._specs):
            raise ContractError(f"unexpected payload for {name!r}: all tensors written")
        current = self._specs[self._cursor][0]
        if name != current:
            raise ContractError(f"expected payload for {current!r}, got {name!r}")
        code, _, length = self._expected[name]
        data = np.ascontiguousarray(arr, dtype=storage_dtype(code)).tobytes()
        if self._written + len(data) > length:
            raise ContractError(f"payload overflow on {name!r}")
        self._fh.write(data)
        self._written += len(data)
        if self._written == length:
            self._cursor += 1
            self._written = 0

    def write_tensor(self, name: str, arr: np.ndarray) -> None:
        code, shape, _ = self._expected.get(name, (None, None, None))
        if code is not None and tuple(np.shape(arr)) != shape:
            raise ContractError(
                f"payload shape {np.shape(arr)} for {name!r}, expected {shape}"
            )
        self.write_chunk(name, arr)

    def close(self) -> Path:
        incomplete = self._cursor < len(self._specs) or self._written
        self._fh.close()
        if incomplete:
            raise ContractError(
                f"checkpoint {self.path} incomplete: "
                f"{len(self._specs) - self._cursor} tensor(s) missing"
            )
        return self.path

    def __enter__(self) -> "CheckpointWriter":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if exc_type is None:
            self.close()
        else:
            self._fh.close()


def write_checkpoint(path, tensors: Iterable[tuple[str, str, tuple[int, ...], object]], metadata=None) -> Path:
    """Write a checkpoint from (name, dtype, shape, payload) tuples, where
    payload is an array or an iterable of chunk arrays."""
    tensor_list = list(tensors)
    specs = [(name, code, tuple(shape)) for name, code, shape, _ in tensor_list]
    with CheckpointWriter(path, specs, metadata) as writer:
        for name, _, _, payload in tensor_list:
            if isinstance(payload, np.ndarray):
                writer.write_tensor(name, payload)
            else:
                for chunk in payload:
                    writer.write_chunk(name, chunk)
    return Path(path)


def copy_checkpoint(index: CheckpointIndex, dest, max_chunk_bytes: int = 64 << 20) -> Path:
    """Stream-copy a checkpoint; output re-opens to an identical index."""
    specs = [(m.name, m.dtype, m.shape) for m in index.tensors.values()]
    with CheckpointWriter(dest, specs, index.metadata or None) as writer:
        for meta in index.tensors.values():
            for _, _, chunk in iter_tensor_chunks(index, meta.name, max_chunk_bytes):
                writer.write_chunk(meta.name, chunk)
    return Path(dest)


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()
