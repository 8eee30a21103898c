"""Top-p% ability masks, model-level mask unions and overlap statistics.

A mask is a set of channel identities selected by ranking every channel of
a model pair globally by its statistic, irrespective of layer or module.
Ties at the selection boundary break by canonical (module_path, index)
order so repeated runs agree bit for bit. Overlap ratios normalize by the
base (row) mask, the convention used for printed overlap tables.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .checkpoint import ChannelId, CheckpointIndex
from .errors import ContractError, FormatError
from .stats import ChannelStatVector

MASK_FORMAT_VERSION = 1


def mask_size(total_channels: int, p: float) -> int:
    """Selection count: round-half-up of total * p / 100, capped at total.

    Evaluated in exact rational arithmetic so half-way cases cannot drift
    with the float representation of p.
    """
    if not 0 < p <= 100:
        raise ContractError(f"selection ratio p={p} out of range (0, 100]")
    if total_channels < 0:
        raise ContractError("negative channel count")
    exact = Fraction(total_channels) * Fraction(p) / 100
    k = int(exact + Fraction(1, 2))  # int() truncates; exact+1/2 >= 0 so this floors
    return min(k, total_channels)


@dataclass(frozen=True)
class AbilityMask:
    channels: tuple[ChannelId, ...]
    ability_tag: str
    selection_ratio_p: float
    source_pair: tuple[str, str]
    total_channel_count: int

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(sorted(self.channels)))

    def __len__(self) -> int:
        return len(self.channels)

    def channel_set(self) -> frozenset[ChannelId]:
        return frozenset(self.channels)


@dataclass(frozen=True)
class UnifiedMask:
    """Model-level union of ability masks: every channel that receives the
    source model's task vector."""

    channels: tuple[ChannelId, ...]
    source_model_id: str
    constituent_tags: tuple[str, ...]
    total_channel_count: int

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(sorted(self.channels)))

    def __len__(self) -> int:
        return len(self.channels)

    def channel_set(self) -> frozenset[ChannelId]:
        return frozenset(self.channels)


def build_mask(stats: ChannelStatVector, p: float, ability_tag: str | None = None) -> AbilityMask:
    """Select the top p% channels by statistic value, ranked globally.

    The k-th-value tie is broken by canonical channel order; scaling every
    statistic by a positive constant leaves the selection unchanged.
    """
    if stats.n_channels == 0:
        raise ContractError("empty stat vector")
    k = mask_size(stats.n_channels, p)
    order = stats.canonical_order()
    ranked = order[np.argsort(-stats.values[order], kind="stable")]
    ids = stats.channel_ids()
    selected = tuple(ids[i] for i in ranked[:k])
    return AbilityMask(
        channels=selected,
        ability_tag=stats.ability_tag if ability_tag is None else ability_tag,
        selection_ratio_p=float(p),
        source_pair=stats.pair_id,
        total_channel_count=stats.n_channels,
    )


def union_masks(masks: Sequence[AbilityMask]) -> UnifiedMask:
    """Union of ability masks that all draw on the same ability model.

    Each unified mask maps to exactly one task vector, so mixing source
    models is rejected.
    """
    if not masks:
        raise ContractError("no masks to union")
    ability_ids = {m.source_pair[1] for m in masks}
    if len(ability_ids) != 1:
        raise ContractError(f"mixed source models in union: {sorted(ability_ids)}")
    universes = {m.total_channel_count for m in masks}
    if len(universes) != 1:
        raise ContractError("masks with different channel universes")
    combined: set[ChannelId] = set()
    for m in masks:
        combined.update(m.channels)
    return UnifiedMask(
        channels=tuple(sorted(combined)),
        source_model_id=ability_ids.pop(),
        constituent_tags=tuple(m.ability_tag for m in masks),
        total_channel_count=universes.pop(),
    )


class Overlap(NamedTuple):
    ratio_percent: float
    count: int


def overlap(base, other) -> Overlap:
    """Intersection size normalized by the base (row) mask, in percent."""
    if base.total_channel_count != other.total_channel_count:
        raise ContractError(
            f"channel universe mismatch: {base.total_channel_count} vs "
            f"{other.total_channel_count}"
        )
    if len(base) == 0:
        raise ContractError("empty base mask has no defined overlap ratio")
    count = len(base.channel_set() & other.channel_set())
    return Overlap(100.0 * count / len(base), count)


def jaccard(a, b) -> float:
    """Symmetric overlap |a n b| / |a u b|; never used for printed tables."""
    if a.total_channel_count != b.total_channel_count:
        raise ContractError("channel universe mismatch")
    sa, sb = a.channel_set(), b.channel_set()
    union = len(sa | sb)
    return len(sa & sb) / union if union else 0.0


def overlap_matrix(masks: Sequence) -> list[list[Overlap]]:
    """Square table of row-normalized overlaps; diagonal is 100%."""
    if len(masks) < 2:
        raise ContractError("overlap matrix needs at least two masks")
    return [[overlap(row, col) for col in masks] for row in masks]


def random_baseline(total_channels: int, p: float) -> float:
    """Expected overlap (percent) of two independent uniform top-p% masks."""
    if not 0 < p <= 100:
        raise ContractError(f"selection ratio p={p} out of range (0, 100]")
    return float(p)


def format_overlap_cell(result: Overlap) -> str:
    """Printed-table cell format, e.g. '25.3% (4,434)'."""
    return f"{result.ratio_percent:.1f}% ({result.count:,})"


def overlap_table_csv(masks: Sequence, labels: Sequence[str] | None = None) -> str:
    matrix = overlap_matrix(masks)
    if labels is None:
        labels = [_label(m) for m in masks]
    lines = ["base,other,overlap_pct,count"]
    for row_label, row in zip(labels, matrix):
        for col_label, cell in zip(labels, row):
            lines.append(f"{row_label},{col_label},{cell.ratio_percent!r},{cell.count}")
    return "\n".join(lines) + "\n"


def _label(mask) -> str:
    if isinstance(mask, AbilityMask):
        return mask.ability_tag or "mask"
    return getattr(mask, "source_model_id", "mask")


def parameter_fraction(mask, index: CheckpointIndex) -> tuple[int, float]:
    """Parameter elements covered by the mask's channel slices and their
    fraction of all checkpoint elements (the figure comparable to reported
    transferred-parameter percentages; the channel fraction is different)."""
    per_module: dict[str, int] = {}
    for channel in mask.channels:
        per_module[channel.module_path] = per_module.get(channel.module_path, 0) + 1
    elements = 0
    for path, n_selected in per_module.items():
        if path not in index.module_table:
            raise ContractError(f"mask channel module {path!r} missing from checkpoint")
        elements += n_selected * index.channel_elements(path)
    total = index.total_elements()
    return elements, elements / total if total else 0.0


def write_mask(path, mask) -> Path:
    path = Path(path)
    if isinstance(mask, AbilityMask):
        obj = {
            "version": MASK_FORMAT_VERSION,
            "ability_tag": mask.ability_tag,
            "p": mask.selection_ratio_p,
            "source_pair": list(mask.source_pair),
            "total_channel_count": mask.total_channel_count,
            "channels": [[c.module_path, c.index] for c in mask.channels],
        }
    elif isinstance(mask, UnifiedMask):
        obj = {
            "version": MASK_FORMAT_VERSION,
            "source_model_id": mask.source_model_id,
            "constituent_tags": list(mask.constituent_tags),
            "total_channel_count": mask.total_channel_count,
            "channels": [[c.module_path, c.index] for c in mask.channels],
        }
    else:
        raise ContractError(f"cannot serialize {type(mask).__name__}")
    path.write_text(json.dumps(obj, separators=(",", ":")) + "\n", encoding="utf-8")
    return path


def read_mask(path):
    path = Path(path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: malformed mask JSON: {exc}") from exc
    try:
        if obj.get("version") != MASK_FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported mask version {obj.get('version')}")
        channels = tuple(ChannelId(str(p), int(i)) for p, i in obj["channels"])
        total = int(obj["total_channel_count"])
        if "ability_tag" in obj:
            return AbilityMask(
                channels=channels,
                ability_tag=str(obj["ability_tag"]),
                selection_ratio_p=float(obj["p"]),
                source_pair=(str(obj["source_pair"][0]), str(obj["source_pair"][1])),
                total_channel_count=total,
            )
        return UnifiedMask(
            channels=channels,
            source_model_id=str(obj["source_model_id"]),
            constituent_tags=tuple(str(t) for t in obj.get("constituent_tags", [])),
            total_channel_count=total,
        )
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise FormatError(f"{path}: malformed mask file: {exc}") from exc
