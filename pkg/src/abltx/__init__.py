"""Activation-guided channel-wise ability transfer toolkit.

Localizes ability-specific output channels from cross-model activation
differences and selectively transfers the matching parameter slices
between sibling checkpoints, alongside task-arithmetic, TIES and DARE
baselines. See the README for the pipeline walkthrough.
"""

from .checkpoint import (
    ChannelId,
    ChannelSlice,
    CheckpointIndex,
    CheckpointWriter,
    channel_slice,
    copy_checkpoint,
    open_checkpoint,
    write_checkpoint,
)
from .dumps import (
    ActivationData,
    DiffDump,
    DumpHeader,
    load_dump,
    read_diff,
    read_dump,
    reduce_pair,
    write_diff,
    write_dump,
)
from .errors import AbilityTransferError, ContractError, FormatError
from .masks import (
    AbilityMask,
    UnifiedMask,
    build_mask,
    mask_size,
    overlap,
    overlap_matrix,
    random_baseline,
    read_mask,
    union_masks,
    write_mask,
)
from .merge import MergePlan, MergeSource, merge, task_vector
from .miniforward import PerturbationPlan, SynthSpec, forward_record, perturb_checkpoint, synth_checkpoint
from .stats import ChannelStatVector, activation_stats, ccdf, read_stats, weight_stats, write_stats

__version__ = "0.1.0"

__all__ = [
    "AbilityMask",
    "AbilityTransferError",
    "ActivationData",
    "ChannelId",
    "ChannelSlice",
    "ChannelStatVector",
    "CheckpointIndex",
    "CheckpointWriter",
    "ContractError",
    "DiffDump",
    "DumpHeader",
    "FormatError",
    "MergePlan",
    "MergeSource",
    "PerturbationPlan",
    "SynthSpec",
    "UnifiedMask",
    "activation_stats",
    "build_mask",
    "ccdf",
    "channel_slice",
    "copy_checkpoint",
    "forward_record",
    "load_dump",
    "mask_size",
    "merge",
    "open_checkpoint",
    "overlap",
    "overlap_matrix",
    "perturb_checkpoint",
    "random_baseline",
    "read_diff",
    "read_dump",
    "read_mask",
    "read_stats",
    "reduce_pair",
    "synth_checkpoint",
    "task_vector",
    "union_masks",
    "weight_stats",
    "write_checkpoint",
    "write_diff",
    "write_dump",
    "write_mask",
    "write_stats",
]
