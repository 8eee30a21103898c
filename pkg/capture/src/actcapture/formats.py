"""Standalone writers for the ACTD / ACTR wire formats.

Both files start with a 4-byte magic, a little-endian u16 version, a u32
header length and a UTF-8 JSON header. ACTD then carries token frames as
contiguous little-endian values; ACTR carries one (f64 sum, u64 count)
record per channel in module-table order. The layouts are written here
independently so the analysis toolkit's readers act as a cross-check.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

DUMP_MAGIC = b"ACTD"
DIFF_MAGIC = b"ACTR"
FORMAT_VERSION = 1

_VALUE_DTYPES = {"F32": "<f4", "F16": "<f2"}


def hash_token_ids(token_ids) -> str:
    """SHA-256 over token ids as little-endian uint32, hex encoded.

    Must match across sibling captures so the reducer can verify both
    models saw the same inputs.
    """
    digest = hashlib.sha256()
    for tid in token_ids:
        digest.update(struct.pack("<I", int(tid)))
    return digest.hexdigest()


def _header_blob(magic: bytes, obj: dict) -> bytes:
    blob = json.dumps(obj, separators=(",", ":")).encode("utf-8")
    return magic + struct.pack("<H", FORMAT_VERSION) + struct.pack("<I", len(blob)) + blob


class DumpWriter:
    """Streams token frames to an ACTD file; frames must arrive in order."""

    def __init__(self, path, model_id: str, input_set_hash: str,
                 module_table: list[tuple[str, int]], token_count: int,
                 token_roles: str, value_dtype: str = "F32"):
        if len(token_roles) != token_count:
            raise ValueError("token_roles length must equal token_count")
        self.path = Path(path)
        self.frame_len = sum(n for _, n in module_table)
        self.token_count = token_count
        self._np_dtype = np.dtype(_VALUE_DTYPES[value_dtype])
        self._written = 0
        header = {
            "model_id": model_id,
            "input_set_hash": input_set_hash,
            "module_table": [[p, n] for p, n in module_table],
            "token_count": token_count,
            "token_roles": token_roles,
            "value_dtype": value_dtype,
        }
        self._fh = open(self.path, "wb")
        self._fh.write(_header_blob(DUMP_MAGIC, header))

    def write_frame(self, values: np.ndarray) -> None:
        arr = np.ascontiguousarray(values, dtype=self._np_dtype)
        if arr.shape != (self.frame_len,):
            raise ValueError(f"frame shape {arr.shape}, expected ({self.frame_len},)")
        if self._written >= self.token_count:
            raise ValueError("more frames than token_count")
        self._fh.write(arr.tobytes())
        self._written += 1

    def close(self) -> Path:
        self._fh.close()
        if self._written != self.token_count:
            self.path.unlink(missing_ok=True)
            raise ValueError(f"wrote {self._written}/{self.token_count} frames")
        return self.path

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.close()
        else:
            self._fh.close()


def write_diff_file(path, model_ids: tuple[str, str], input_set_hash: str,
                    role_filter: str, module_table: list[tuple[str, int]],
                    sums: np.ndarray, counts: np.ndarray) -> Path:
    path = Path(path)
    n = sum(c for _, c in module_table)
    if sums.shape != (n,) or counts.shape != (n,):
        raise ValueError("per-channel arrays do not match the module table")
    header = {
        "model_ids": list(model_ids),
        "input_set_hash": input_set_hash,
        "role_filter": role_filter,
        "module_table": [[p, c] for p, c in module_table],
    }
    records = np.empty(n, dtype=[("sum", "<f8"), ("count", "<u8")])
    records["sum"] = sums
    records["count"] = counts
    with open(path, "wb") as fh:
        fh.write(_header_blob(DIFF_MAGIC, header))
        fh.write(records.tobytes())
    return path
