import math
import tracemalloc

import numpy as np
import pytest

from abltx.dumps import (
    ActivationData,
    DumpHeader,
    hash_token_ids,
    load_dump,
    read_diff,
    read_dump,
    reduce_pair,
    write_diff,
    write_dump,
)
from abltx.errors import ContractError, FormatError

from conftest import make_dump


def scalar_reduce(frames_a, frames_b, keep):
    """Independent per-channel loop: accumulate |a-b| over tokens in order."""
    n = len(frames_a[0])
    sums = [0.0] * n
    for i in range(n):
        for t, k in enumerate(keep):
            if k:
                sums[i] += abs(float(frames_a[t][i]) - float(frames_b[t][i]))
    return sums


def test_zero_token_dump_roundtrip(tmp_path):
    header = DumpHeader("m", hash_token_ids([]), (("mod.a", 3),), 0, "")
    path = write_dump(tmp_path / "z.actd", header, iter([]))
    got, frames = read_dump(path)
    assert got == header
    assert list(frames) == []


def test_small_dump_bit_exact_roundtrip(tmp_path):
    frames = np.linspace(-4, 4, 30, dtype=np.float32).reshape(3, 10)
    dump = make_dump("m", frames)
    path = write_dump(tmp_path / "d.actd", dump.header, iter(frames))
    header, it = read_dump(path)
    assert header == dump.header
    got = np.stack(list(it))
    assert got.tobytes() == frames.tobytes()


def test_frame_length_mismatch_rejected(tmp_path):
    header = DumpHeader("m", hash_token_ids([1]), (("mod.a", 4),), 1, "A")
    with pytest.raises(ContractError, match="length"):
        write_dump(tmp_path / "bad.actd", header, iter([np.zeros(3, dtype=np.float32)]))


def test_premature_stream_end_rejected(tmp_path):
    header = DumpHeader("m", hash_token_ids([1, 2]), (("mod.a", 2),), 2, "AA")
    with pytest.raises(ContractError, match="premature"):
        write_dump(tmp_path / "short.actd", header, iter([np.zeros(2, dtype=np.float32)]))
    assert not (tmp_path / "short.actd").exists()


def test_truncated_file_yields_earlier_frames_then_fails(tmp_path):
    frames = np.arange(40, dtype=np.float32).reshape(4, 10)
    dump = make_dump("m", frames)
    path = write_dump(tmp_path / "t.actd", dump.header, iter(frames))
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - 25])  # cut into the last frame
    _, it = read_dump(path)
    got = [next(it), next(it), next(it)]
    assert np.array_equal(np.stack(got), frames[:3])
    with pytest.raises(FormatError, match="truncated at frame 3"):
        next(it)


def test_corrupt_magic_rejected(tmp_path):
    path = tmp_path / "bad.actd"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(FormatError, match="bad magic"):
        read_dump(path)


def test_streaming_read_memory_bounded(tmp_path):
    """Iteration must hold ~one frame, not the whole payload."""
    n_tokens, n_channels = 64, 100_000  # 400 KB frames, 25.6 MB total
    header = DumpHeader("m", hash_token_ids(range(n_tokens)), (("mod.a", n_channels),), n_tokens, "A" * n_tokens)
    frame = np.zeros(n_channels, dtype=np.float32)
    path = write_dump(tmp_path / "big.actd", header, (frame for _ in range(n_tokens)))

    _, frames = read_dump(path)
    tracemalloc.start()
    for f in frames:
        assert f.shape == (n_channels,)
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    frame_bytes = n_channels * 4
    assert peak < 2 * frame_bytes + 262_144


def test_reduce_self_pair_is_zero():
    frames = np.random.default_rng(0).standard_normal((5, 8)).astype(np.float32)
    dump = make_dump("m", frames)
    out = reduce_pair(dump, dump)
    assert (out.sum_abs_diff == 0).all()
    assert (out.token_count == 5).all()


def test_reduce_constant_offset_answer_tokens():
    frames_a = np.zeros((6, 4), dtype=np.float32)
    frames_b = frames_a.copy()
    frames_b[:, 1] += 2.0
    roles = "PAAAAA"  # 5 answer tokens
    a = make_dump("a", frames_a, roles=roles)
    b = make_dump("b", frames_b, roles=roles)
    out = reduce_pair(a, b, "answer")
    assert out.sum_abs_diff.tolist() == [0.0, 10.0, 0.0, 0.0]
    assert (out.token_count == 5).all()


def test_reduce_matches_scalar_loop_to_one_ulp():
    rng = np.random.default_rng(42)
    for _ in range(25):
        frames_a = rng.standard_normal((4, 6)).astype(np.float32)
        frames_b = rng.standard_normal((4, 6)).astype(np.float32)
        a, b = make_dump("a", frames_a), make_dump("b", frames_b)
        got = reduce_pair(a, b).sum_abs_diff
        want = scalar_reduce(frames_a, frames_b, [True] * 4)
        for g, w in zip(got, want):
            assert g == w or abs(g - w) <= math.ulp(max(abs(g), abs(w)))


def test_reduce_symmetry_and_triangle():
    rng = np.random.default_rng(7)
    fa = rng.standard_normal((8, 5)).astype(np.float32)
    fb = rng.standard_normal((8, 5)).astype(np.float32)
    fc = rng.standard_normal((8, 5)).astype(np.float32)
    a, b, c = make_dump("a", fa), make_dump("b", fb), make_dump("c", fc)
    ab = reduce_pair(a, b).sum_abs_diff
    ba = reduce_pair(b, a).sum_abs_diff
    assert np.array_equal(ab, ba)
    ac = reduce_pair(a, c).sum_abs_diff
    bc = reduce_pair(b, c).sum_abs_diff
    assert (ac <= ab + bc + 1e-12).all()


def test_role_filter_partition():
    rng = np.random.default_rng(9)
    roles = "PAPPAA"
    fa = rng.standard_normal((6, 3)).astype(np.float32)
    fb = rng.standard_normal((6, 3)).astype(np.float32)
    a, b = make_dump("a", fa, roles=roles), make_dump("b", fb, roles=roles)
    total = reduce_pair(a, b, "all").sum_abs_diff
    answer = reduce_pair(a, b, "answer").sum_abs_diff
    prompt_keep = [r == "P" for r in roles]
    prompt = np.array(scalar_reduce(fa, fb, prompt_keep))
    assert np.allclose(answer + prompt, total, rtol=0, atol=1e-12)


def test_header_mismatch_rejected():
    a = make_dump("a", np.zeros((2, 3), dtype=np.float32), token_ids=[1, 2])
    b = make_dump("b", np.zeros((2, 3), dtype=np.float32), token_ids=[3, 4])
    with pytest.raises(ContractError, match="input_set_hash"):
        reduce_pair(a, b)
    c = make_dump("c", np.zeros((2, 3), dtype=np.float32), roles="PA", token_ids=[1, 2])
    with pytest.raises(ContractError, match="token_roles"):
        reduce_pair(a, c)
    d = make_dump(
        "d", np.zeros((2, 3), dtype=np.float32),
        module_table=(("mod.b", 3),), token_ids=[1, 2],
    )
    with pytest.raises(ContractError, match="module_table"):
        reduce_pair(a, d)


def test_diff_file_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    fa = rng.standard_normal((5, 7)).astype(np.float32)
    fb = rng.standard_normal((5, 7)).astype(np.float32)
    out = reduce_pair(make_dump("a", fa), make_dump("b", fb), "answer")
    path = write_diff(tmp_path / "d.actr", out)
    # magic check
    assert path.read_bytes()[:4] == b"ACTR"
    back = read_diff(path)
    assert np.array_equal(back.sum_abs_diff, out.sum_abs_diff)
    assert np.array_equal(back.token_count, out.token_count)
    assert back.model_ids == ("a", "b")
    assert back.role_filter == "answer"
    assert back.module_table == out.module_table


def test_diff_truncation_detected(tmp_path):
    out = reduce_pair(
        make_dump("a", np.zeros((2, 4), dtype=np.float32)),
        make_dump("b", np.zeros((2, 4), dtype=np.float32)),
    )
    path = write_diff(tmp_path / "d.actr", out)
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(FormatError, match="truncated"):
        read_diff(path)


def test_f16_dump_roundtrip(tmp_path):
    frames = np.linspace(-2, 2, 12, dtype=np.float16).reshape(3, 4)
    header = DumpHeader("m", hash_token_ids([5, 6, 7]), (("mod.a", 4),), 3, "AAA", value_dtype="F16")
    path = write_dump(tmp_path / "h.actd", header, iter(frames))
    data = load_dump(path)
    assert data.frames.dtype == np.float16
    assert data.frames.tobytes() == frames.tobytes()


def test_header_invariants():
    with pytest.raises(ContractError, match="token_roles length"):
        DumpHeader("m", hash_token_ids([]), (("a", 1),), 2, "A")
    with pytest.raises(ContractError, match="invalid token roles"):
        DumpHeader("m", hash_token_ids([1]), (("a", 1),), 1, "X")
    with pytest.raises(ContractError, match="hex digest"):
        DumpHeader("m", "zz", (("a", 1),), 1, "A")
