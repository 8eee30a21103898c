"""Per-channel statistics of a model pair and their distribution summaries.

Two statistics share one container: the token-averaged activation
difference of each output channel (from a reduced dump pair) and the
channel-wise l2 norm of the parameter difference between two sibling
checkpoints. Both are stored as float64 in module-table frame order and
serialize to the ``ACTS`` format.

CCDF summaries report, per group and threshold, the fraction of channels
whose statistic strictly exceeds the threshold.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import ChannelId, CheckpointIndex, iter_tensor_chunks, widen_f64
from .dumps import DiffDump, _read_header, _write_header
from .errors import ContractError, FormatError
from .naming import layer_of, module_type_of

STATS_MAGIC = b"ACTS"

STAT_ACTIVATION = "ActivationDiff"
STAT_WEIGHT_L2 = "WeightL2Diff"

GROUP_GLOBAL = "global"
GROUP_LAYER = "layer"
GROUP_MODULE_TYPE = "module"

AUTO_THRESHOLD_POINTS = 64


@dataclass
class ChannelStatVector:
    """One scalar statistic per channel of a model pair.

    ``values`` follows module-table frame order; the canonical
    (module_path, index) order used for tie-breaking is derived on demand.
    """

    stat_kind: str
    module_table: tuple[tuple[str, int], ...]
    values: np.ndarray
    pair_id: tuple[str, str]
    ability_tag: str = ""
    _offsets: dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        total = sum(n for _, n in self.module_table)
        if self.values.shape != (total,):
            raise ContractError(
                f"stat vector has {self.values.shape} values for {total} channels"
            )
        offset = 0
        for path, n in self.module_table:
            self._offsets[path] = offset
            offset += n

    @property
    def n_channels(self) -> int:
        return self.values.shape[0]

    def value(self, channel: ChannelId) -> float:
        base = self._offsets.get(channel.module_path)
        if base is None:
            raise ContractError(f"unknown module {channel.module_path!r}")
        return float(self.values[base + channel.index])

    def channel_ids(self) -> list[ChannelId]:
        out = []
        for path, n in self.module_table:
            out.extend(ChannelId(path, i) for i in range(n))
        return out

    def canonical_order(self) -> np.ndarray:
        """Frame indices arranged in canonical (module_path, index) order."""
        order = []
        for path, n in sorted(self.module_table):
            base = self._offsets[path]
            order.append(np.arange(base, base + n))
        return np.concatenate(order) if order else np.empty(0, dtype=np.int64)


def activation_stats(diff: DiffDump, ability_tag: str = "") -> ChannelStatVector:
    """Token-averaged activation difference per channel: sum / count."""
    counts = diff.token_count.astype(np.float64)
    if (counts <= 0).any():
        raise ContractError("zero token count: empty answer-token filter")
    values = diff.sum_abs_diff / counts
    return ChannelStatVector(
        STAT_ACTIVATION, diff.module_table, values, diff.model_ids, ability_tag
    )


def _pair_id_of(target: CheckpointIndex, ability: CheckpointIndex) -> tuple[str, str]:
    def model_id(index: CheckpointIndex) -> str:
        return index.metadata.get("model_id", index.path.name)

    return (model_id(target), model_id(ability))


def weight_stats(
    target: CheckpointIndex,
    ability: CheckpointIndex,
    ability_tag: str = "",
    max_chunk_bytes: int = 64 << 20,
    workers: int = 1,
) -> ChannelStatVector:
    """Channel-wise l2 norm of (ability - target) parameter slices.

    Differences are widened to float64 before subtraction; squared sums
    accumulate per channel in a fixed chunk order so results do not depend
    on the worker count.
    """
    if target.module_signature() != ability.module_signature():
        raise ContractError("checkpoints do not share a module table")
    module_table = tuple((p, e.n_channels) for p, e in target.module_table.items())
    total = sum(n for _, n in module_table)
    sumsq = np.zeros(total, dtype=np.float64)

    jobs = []
    offset = 0
    for path, n in module_table:
        jobs.append((path, offset, n))
        offset += n

    def run(job):
        path, base, n = job
        entry_t = target.module_table[path]
        entry_a = ability.module_table[path]
        meta_t = target.tensors[entry_t.weight]
        meta_a = ability.tensors[entry_a.weight]
        if meta_t.shape != meta_a.shape:
            raise ContractError(
                f"shape mismatch on {entry_t.weight!r}: {meta_t.shape} vs {meta_a.shape}"
            )
        if (entry_t.bias is None) != (entry_a.bias is None):
            raise ContractError(f"bias mismatch on module {path!r}")
        acc = np.zeros(n, dtype=np.float64)
        for (start, stop, chunk_t), (_, _, chunk_a) in zip(
            iter_tensor_chunks(target, entry_t.weight, max_chunk_bytes),
            iter_tensor_chunks(ability, entry_a.weight, max_chunk_bytes),
        ):
            d = widen_f64(chunk_a, meta_a.dtype) - widen_f64(chunk_t, meta_t.dtype)
            sq = d * d
            if entry_t.channel_axis == 0:
                reduced = sq.reshape(stop - start, -1).sum(axis=1)
                acc[start:stop] += reduced
            else:
                acc += sq.sum(axis=0)
        if entry_t.bias is not None:
            bias_t = widen_f64(_load(target, entry_t.bias), target.tensors[entry_t.bias].dtype)
            bias_a = widen_f64(_load(ability, entry_a.bias), ability.tensors[entry_a.bias].dtype)
            if bias_t.shape != bias_a.shape:
                raise ContractError(f"shape mismatch on {entry_t.bias!r}")
            acc += (bias_a - bias_t) ** 2
        sumsq[base : base + n] = acc

    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, jobs))
    else:
        for job in jobs:
            run(job)

    return ChannelStatVector(
        STAT_WEIGHT_L2, module_table, np.sqrt(sumsq), _pair_id_of(target, ability), ability_tag
    )


def _load(index: CheckpointIndex, name: str) -> np.ndarray:
    from .checkpoint import read_tensor

    return read_tensor(index, name)


@dataclass(frozen=True)
class CcdfCurve:
    grouping: str
    group_key: str
    points: tuple[tuple[float, float], ...]


def _group_indices(stats: ChannelStatVector, grouping: str) -> dict[str, np.ndarray]:
    if grouping == GROUP_GLOBAL:
        return {"global": np.arange(stats.n_channels)}
    groups: dict[str, list[np.ndarray]] = {}
    offset = 0
    for path, n in stats.module_table:
        if grouping == GROUP_LAYER:
            layer = layer_of(path)
            key = str(layer) if layer is not None else "other"
        elif grouping == GROUP_MODULE_TYPE:
            key = module_type_of(path)
        else:
            raise ContractError(f"unknown grouping {grouping!r}")
        groups.setdefault(key, []).append(np.arange(offset, offset + n))
        offset += n
    return {k: np.concatenate(v) for k, v in sorted(groups.items())}


def auto_thresholds(values: np.ndarray, n_points: int = AUTO_THRESHOLD_POINTS) -> np.ndarray:
    positive = values[values > 0]
    if positive.size == 0:
        raise ContractError("no positive values to build a log-spaced threshold grid")
    lo = float(positive.min())
    hi = float(values.max())
    if lo == hi:
        return np.array([lo])
    return np.geomspace(lo, hi, n_points)


def ccdf(stats: ChannelStatVector, grouping: str = GROUP_GLOBAL, thresholds="auto") -> list[CcdfCurve]:
    """Fraction of channels whose statistic strictly exceeds each threshold,
    per group. All groups share one grid so per-group curves average back to
    the global curve with channel-count weights."""
    if stats.n_channels == 0:
        raise ContractError("empty stat vector")
    if isinstance(thresholds, str):
        if thresholds != "auto":
            raise ContractError(f"unknown threshold spec {thresholds!r}")
        grid = auto_thresholds(stats.values)
    else:
        grid = np.unique(np.asarray(list(thresholds), dtype=np.float64))
        if grid.size == 0:
            raise ContractError("empty threshold list")
    curves = []
    for key, idx in _group_indices(stats, grouping).items():
        if idx.size == 0:
            raise ContractError(f"empty group {key!r}")
        ordered = np.sort(stats.values[idx])
        exceeding = idx.size - np.searchsorted(ordered, grid, side="right")
        fractions = exceeding / idx.size
        points = tuple((float(t), float(f)) for t, f in zip(grid, fractions))
        curves.append(CcdfCurve(grouping, key, points))
    return curves


def ccdf_to_csv(curves: list[CcdfCurve]) -> str:
    lines = ["group_key,threshold,fraction"]
    for curve in curves:
        for threshold, fraction in curve.points:
            lines.append(f"{curve.group_key},{threshold!r},{fraction!r}")
    return "\n".join(lines) + "\n"


def write_stats(path, stats: ChannelStatVector) -> Path:
    path = Path(path)
    header_obj = {
        "stat_kind": stats.stat_kind,
        "pair_id": list(stats.pair_id),
        "ability_tag": stats.ability_tag,
        "module_table": [[p, n] for p, n in stats.module_table],
    }
    with open(path, "wb") as fh:
        _write_header(fh, STATS_MAGIC, header_obj)
        fh.write(np.ascontiguousarray(stats.values, dtype="<f8").tobytes())
    return path


def read_stats(path) -> ChannelStatVector:
    path = Path(path)
    with open(path, "rb") as fh:
        obj = _read_header(fh, STATS_MAGIC, path)
        try:
            module_table = tuple((str(p), int(n)) for p, n in obj["module_table"])
            stat_kind = obj["stat_kind"]
            pair_id = tuple(obj["pair_id"])
            ability_tag = obj.get("ability_tag", "")
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: malformed stats header: {exc}") from exc
        n = sum(c for _, c in module_table)
        raw = fh.read(n * 8)
        if len(raw) != n * 8:
            raise FormatError(f"{path}: truncated stat values")
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after stat values")
    values = np.frombuffer(raw, dtype="<f8").copy()
    if (values < 0).any() or not np.isfinite(values).all():
        raise FormatError(f"{path}: negative or non-finite stat values")
    return ChannelStatVector(
        stat_kind, module_table, values, (str(pair_id[0]), str(pair_id[1])), ability_tag
    )


__all__ = [
    "ChannelStatVector",
    "CcdfCurve",
    "activation_stats",
    "weight_stats",
    "ccdf",
    "auto_thresholds",
    "ccdf_to_csv",
    "write_stats",
    "read_stats",
    "layer_of",
    "module_type_of",
    "STAT_ACTIVATION",
    "STAT_WEIGHT_L2",
    "GROUP_GLOBAL",
    "GROUP_LAYER",
    "GROUP_MODULE_TYPE",
]
