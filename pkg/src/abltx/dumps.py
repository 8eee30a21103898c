"""Per-token activation recordings and their paired reduction.

An activation dump (magic ``ACTD``) stores, for one model on one fixed
input set, a frame per token: the concatenation of every recorded
module's output-channel values in module-table order. A diff dump
(magic ``ACTR``) is the pre-reduced pair form: per channel, the running
sum of absolute per-token differences between two sibling dumps plus the
token count that entered the sum.

Reading streams frame by frame so memory stays bounded by one frame;
sums accumulate in float64 regardless of the stored value dtype.

Values store as F32 by default. The F16 option halves dump size at a
worst-case relative rounding error of 2^-11 (~4.9e-4) per value inside
the normal half-precision range (|v| in [6.1e-5, 65504]); F32 is the
reference everywhere results are compared.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import ContractError, FormatError

DUMP_MAGIC = b"ACTD"
DIFF_MAGIC = b"ACTR"
FORMAT_VERSION = 1

ROLE_PROMPT = "P"
ROLE_ANSWER = "A"

ROLES_ALL = "all"
ROLES_ANSWER = "answer"

_VALUE_DTYPES = {"F32": "<f4", "F16": "<f2"}


def hash_token_ids(token_ids) -> str:
    """Canonical 32-byte digest of tokenized inputs: SHA-256 over the ids
    encoded as little-endian uint32, hex-encoded."""
    digest = hashlib.sha256()
    for tid in token_ids:
        digest.update(struct.pack("<I", int(tid)))
    return digest.hexdigest()


@dataclass(frozen=True)
class DumpHeader:
    model_id: str
    input_set_hash: str  # 64 hex chars
    module_table: tuple[tuple[str, int], ...]
    token_count: int
    token_roles: str  # one of "P"/"A" per token
    value_dtype: str = "F32"

    def __post_init__(self):
        if len(self.token_roles) != self.token_count:
            raise ContractError(
                f"token_roles length {len(self.token_roles)} != token_count {self.token_count}"
            )
        bad = set(self.token_roles) - {ROLE_PROMPT, ROLE_ANSWER}
        if bad:
            raise ContractError(f"invalid token roles {sorted(bad)}")
        if self.value_dtype not in _VALUE_DTYPES:
            raise ContractError(f"unsupported value dtype {self.value_dtype!r}")
        if len(self.input_set_hash) != 64:
            raise ContractError("input_set_hash must be a 32-byte hex digest")
        try:
            bytes.fromhex(self.input_set_hash)
        except ValueError:
            raise ContractError("input_set_hash is not valid hex") from None

    @property
    def frame_len(self) -> int:
        return sum(n for _, n in self.module_table)


@dataclass
class ActivationData:
    """An in-memory dump: header plus a (token_count, frame_len) array."""

    header: DumpHeader
    frames: np.ndarray


@dataclass
class DiffDump:
    """Reduced pair of dumps: per-channel |a^A - a^B| sums and token counts."""

    model_ids: tuple[str, str]
    input_set_hash: str
    role_filter: str
    module_table: tuple[tuple[str, int], ...]
    sum_abs_diff: np.ndarray  # float64, frame order
    token_count: np.ndarray  # uint64, frame order
    extra: dict = field(default_factory=dict)


def _write_header(fh, magic: bytes, header_obj: dict) -> None:
    blob = json.dumps(header_obj, separators=(",", ":")).encode("utf-8")
    fh.write(magic)
    fh.write(struct.pack("<H", FORMAT_VERSION))
    fh.write(struct.pack("<I", len(blob)))
    fh.write(blob)


def _read_header(fh, magic: bytes, path) -> dict:
    lead = fh.read(10)
    if len(lead) < 10 or lead[:4] != magic:
        raise FormatError(f"{path}: bad magic, expected {magic.decode()}")
    (version,) = struct.unpack("<H", lead[4:6])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    (length,) = struct.unpack("<I", lead[6:10])
    raw = fh.read(length)
    if len(raw) != length:
        raise FormatError(f"{path}: truncated header")
    try:
        return json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed header JSON: {exc}") from exc


def write_dump(path, header: DumpHeader, frames: Iterable[np.ndarray]) -> Path:
    """Stream frames to disk in token order. Frames must match the header's
    frame length; fewer or more frames than token_count is an error."""
    path = Path(path)
    np_dtype = np.dtype(_VALUE_DTYPES[header.value_dtype])
    header_obj = {
        "model_id": header.model_id,
        "input_set_hash": header.input_set_hash,
        "module_table": [[p, n] for p, n in header.module_table],
        "token_count": header.token_count,
        "token_roles": header.token_roles,
        "value_dtype": header.value_dtype,
    }
    written = 0
    with open(path, "wb") as fh:
        _write_header(fh, DUMP_MAGIC, header_obj)
        for frame in frames:
            arr = np.asarray(frame)
            if arr.ndim != 1 or arr.shape[0] != header.frame_len:
                raise ContractError(
                    f"frame {written} has length {arr.shape}, expected ({header.frame_len},)"
                )
            if written >= header.token_count:
                raise ContractError("more frames than token_count")
            fh.write(np.ascontiguousarray(arr, dtype=np_dtype).tobytes())
            written += 1
    if written != header.token_count:
        path.unlink(missing_ok=True)
        raise ContractError(f"premature stream end: {written}/{header.token_count} frames")
    return path


def _parse_dump_header(obj: dict, path) -> DumpHeader:
    try:
        return DumpHeader(
            model_id=obj["model_id"],
            input_set_hash=obj["input_set_hash"],
            module_table=tuple((str(p), int(n)) for p, n in obj["module_table"]),
            token_count=int(obj["token_count"]),
            token_roles=str(obj["token_roles"]),
            value_dtype=obj["value_dtype"],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed dump header: {exc}") from exc
    except ContractError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def read_dump(path) -> tuple[DumpHeader, Iterator[np.ndarray]]:
    """Open a dump and return its header plus a lazy frame iterator.

    Frames already yielded stay valid if the file turns out to be
    truncated; the iterator raises FormatError at the incomplete frame.
    """
    path = Path(path)
    fh = open(path, "rb")
    try:
        header = _parse_dump_header(_read_header(fh, DUMP_MAGIC, path), path)
    except Exception:
        fh.close()
        raise
    np_dtype = np.dtype(_VALUE_DTYPES[header.value_dtype])
    frame_bytes = header.frame_len * np_dtype.itemsize

    def frames() -> Iterator[np.ndarray]:
        with fh:
            for t in range(header.token_count):
                raw = fh.read(frame_bytes)
                if len(raw) != frame_bytes:
                    raise FormatError(f"{path}: truncated at frame {t}")
                yield np.frombuffer(raw, dtype=np_dtype)

    return header, frames()


def load_dump(path) -> ActivationData:
    header, frames = read_dump(path)
    if header.token_count == 0:
        data = np.empty((0, header.frame_len), dtype=np.dtype(_VALUE_DTYPES[header.value_dtype]))
    else:
        data = np.stack(list(frames))
    return ActivationData(header, data)


def _role_mask(roles: str, role_filter: str) -> np.ndarray:
    if role_filter == ROLES_ALL:
        return np.ones(len(roles), dtype=bool)
    if role_filter == ROLES_ANSWER:
        return np.frombuffer(roles.encode("ascii"), dtype="S1") == ROLE_ANSWER.encode()
    raise ContractError(f"unknown role filter {role_filter!r}")


def check_paired_headers(a: DumpHeader, b: DumpHeader) -> None:
    """Two dumps reduce together only if they were captured in lockstep on
    identical inputs; any layout mismatch is a contract violation."""
    for fieldname in ("input_set_hash", "token_count", "token_roles", "module_table"):
        va, vb = getattr(a, fieldname), getattr(b, fieldname)
        if va != vb:
            raise ContractError(f"header mismatch on {fieldname}")


def reduce_pair(dump_a, dump_b, role_filter: str = ROLES_ALL) -> DiffDump:
    """Accumulate per-channel sums of |a^A_{i,t} - a^B_{i,t}| over the
    filtered tokens, in float64, token order fixed.

    Accepts file paths or ActivationData. The per-channel token counts all
    equal the filtered token count; a zero-count result is valid here and
    only becomes an error when averaged into per-channel statistics.
    """
    header_a, frames_a = _as_stream(dump_a)
    header_b, frames_b = _as_stream(dump_b)
    check_paired_headers(header_a, header_b)
    keep = _role_mask(header_a.token_roles, role_filter)
    n = header_a.frame_len
    sums = np.zeros(n, dtype=np.float64)
    for t, (fa, fb) in enumerate(zip(frames_a, frames_b)):
        if keep[t]:
            sums += np.abs(fa.astype(np.float64) - fb.astype(np.float64))
    counts = np.full(n, int(keep.sum()), dtype=np.uint64)
    return DiffDump(
        model_ids=(header_a.model_id, header_b.model_id),
        input_set_hash=header_a.input_set_hash,
        role_filter=role_filter,
        module_table=header_a.module_table,
        sum_abs_diff=sums,
        token_count=counts,
    )


def _as_stream(dump) -> tuple[DumpHeader, Iterator[np.ndarray]]:
    if isinstance(dump, ActivationData):
        return dump.header, iter(dump.frames)
    return read_dump(dump)


def write_diff(path, diff: DiffDump) -> Path:
    path = Path(path)
    header_obj = {
        "model_ids": list(diff.model_ids),
        "input_set_hash": diff.input_set_hash,
        "role_filter": diff.role_filter,
        "module_table": [[p, n] for p, n in diff.module_table],
        **diff.extra,
    }
    n = sum(c for _, c in diff.module_table)
    if diff.sum_abs_diff.shape != (n,) or diff.token_count.shape != (n,):
        raise ContractError("diff arrays do not match module table size")
    records = np.empty(n, dtype=[("sum", "<f8"), ("count", "<u8")])
    records["sum"] = diff.sum_abs_diff
    records["count"] = diff.token_count
    with open(path, "wb") as fh:
        _write_header(fh, DIFF_MAGIC, header_obj)
        fh.write(records.tobytes())
    return path


def read_diff(path) -> DiffDump:
    path = Path(path)
    with open(path, "rb") as fh:
        obj = _read_header(fh, DIFF_MAGIC, path)
        try:
            module_table = tuple((str(p), int(n)) for p, n in obj.pop("module_table"))
            model_ids = tuple(obj.pop("model_ids"))
            input_set_hash = obj.pop("input_set_hash")
            role_filter = obj.pop("role_filter")
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: malformed diff header: {exc}") from exc
        n = sum(c for _, c in module_table)
        raw = fh.read(n * 16)
        if len(raw) != n * 16:
            raise FormatError(f"{path}: truncated channel records")
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after channel records")
    records = np.frombuffer(raw, dtype=[("sum", "<f8"), ("count", "<u8")])
    sums = records["sum"].copy()
    if (sums < 0).any() or not np.isfinite(sums).all():
        raise FormatError(f"{path}: negative or non-finite sums")
    return DiffDump(
        model_ids=(str(model_ids[0]), str(model_ids[1])),
        input_set_hash=str(input_set_hash),
        role_filter=str(role_filter),
        module_table=module_table,
        sum_abs_diff=sums,
        token_count=records["count"].copy(),
        extra=obj,
    )
