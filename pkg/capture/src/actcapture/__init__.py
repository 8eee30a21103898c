"""Activation recorder for causal LMs.

Attaches output hooks to every trainable module of a transformer
checkpoint, runs a prompt/answer dataset through it, and emits ACTD
activation dumps (or pre-reduced ACTR difference files for model pairs)
in the formats the analysis toolkit consumes.
"""

from .capture import CaptureConfig, capture, capture_reduced, resolve_modules
from .formats import DumpWriter, hash_token_ids, write_diff_file

__version__ = "0.1.0"

__all__ = [
    "CaptureConfig",
    "DumpWriter",
    "capture",
    "capture_reduced",
    "hash_token_ids",
    "resolve_modules",
    "write_diff_file",
]
