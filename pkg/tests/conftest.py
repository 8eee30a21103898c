import numpy as np
import pytest

from abltx.checkpoint import write_checkpoint
from abltx.dumps import ActivationData, DumpHeader, hash_token_ids
from abltx.miniforward import SynthSpec, synth_checkpoint


@pytest.fixture
def tiny_spec():
    return SynthSpec(n_layers=2, hidden_dim=16, intermediate_dim=32, vocab_size=64, seed=7)


@pytest.fixture
def tiny_checkpoint(tmp_path, tiny_spec):
    return synth_checkpoint(tiny_spec, tmp_path / "base.safetensors")


def make_dump(model_id, frames, roles=None, module_table=None, token_ids=None):
    """In-memory dump over an explicit frame matrix (tokens x channels)."""
    frames = np.asarray(frames, dtype=np.float32)
    n_tokens, n_channels = frames.shape
    if module_table is None:
        module_table = (("mod.a", n_channels),)
    if roles is None:
        roles = "A" * n_tokens
    if token_ids is None:
        token_ids = list(range(n_tokens))
    header = DumpHeader(
        model_id=model_id,
        input_set_hash=hash_token_ids(token_ids),
        module_table=tuple(module_table),
        token_count=n_tokens,
        token_roles=roles,
    )
    return ActivationData(header, frames)


def simple_checkpoint(path, tensors, metadata=None):
    """Write a checkpoint from {name: (dtype, array)} in insertion order."""
    rows = [(name, code, arr.shape, arr) for name, (code, arr) in tensors.items()]
    return write_checkpoint(path, rows, metadata)
