import numpy as np
import pytest

from abltx.checkpoint import (
    ChannelId,
    open_checkpoint,
    read_tensor,
    sha256_file,
    widen_f64,
)
from abltx.errors import ContractError
from abltx.masks import AbilityMask, UnifiedMask
from abltx.merge import MergePlan, MergeSource, merge, task_vector
from abltx.miniforward import PerturbationPlan, SynthSpec, perturb_checkpoint, synth_checkpoint
from abltx.rng import derive_key, keep_mask

from conftest import simple_checkpoint


def unified(channels, total, model="abl"):
    return UnifiedMask(tuple(channels), model, ("t",), total)


def write_pair(tmp_path, target_tensors, ability_tensors, meta_t=None, meta_a=None):
    t = simple_checkpoint(tmp_path / "t.st", target_tensors, meta_t or {"model_id": "trg"})
    a = simple_checkpoint(tmp_path / "a.st", ability_tensors, meta_a or {"model_id": "abl"})
    return t, a


def read_all(path):
    index = open_checkpoint(path)
    return {name: widen_f64(read_tensor(index, name), meta.dtype)
            for name, meta in index.tensors.items()}


def test_task_vector_basic():
    t = np.array([1.0, 2.0], dtype=np.float32)
    assert task_vector(t, t).tolist() == [0.0, 0.0]
    v = np.array([0.5, -0.25], dtype=np.float32)
    assert np.array_equal(task_vector(t, t + v), v.astype(np.float64))
    with pytest.raises(ContractError, match="shape"):
        task_vector(np.zeros(2), np.zeros(3))


def test_task_vector_bf16_scalar_oracle():
    rng = np.random.default_rng(4)
    bits_t = rng.integers(0, 0x7F7F, size=64, dtype=np.uint16)
    bits_a = rng.integers(0, 0x7F7F, size=64, dtype=np.uint16)
    wide_t = widen_f64(bits_t, "BF16")
    wide_a = widen_f64(bits_a, "BF16")
    got = task_vector(wide_t, wide_a)
    for i in range(64):
        lo = float(np.uint32(bits_t[i]) << np.uint32(16)) if False else None
        want = float(wide_a[i]) - float(wide_t[i])
        assert got[i] == want


def test_full_mask_lambda_one_recovers_ability(tmp_path, tiny_checkpoint):
    plan_p = PerturbationPlan((ChannelId("model.layers.0.self_attn.v_proj", 4),), 2.0, 5)
    ability = perturb_checkpoint(tiny_checkpoint, plan_p, tmp_path / "abl.st")
    plan = MergePlan(tiny_checkpoint, [MergeSource(ability, None, 1.0)], "act")
    out, manifest = merge(plan, tmp_path / "m.st")
    assert sha256_file(out) == sha256_file(ability)
    assert manifest["sources"][0]["element_fraction"] == 1.0


def test_empty_mask_and_zero_lambda_keep_target(tmp_path, tiny_checkpoint):
    index = open_checkpoint(tiny_checkpoint)
    ability = perturb_checkpoint(
        tiny_checkpoint,
        PerturbationPlan((ChannelId("model.norm", 2),), 3.0, 1),
        tmp_path / "abl.st",
    )
    empty = unified([], index.total_channels())
    out, _ = merge(MergePlan(tiny_checkpoint, [MergeSource(ability, empty, 1.0)], "act"), tmp_path / "e.st")
    assert sha256_file(out) == sha256_file(tiny_checkpoint)
    out2, _ = merge(MergePlan(tiny_checkpoint, [MergeSource(ability, None, 0.0)], "act"), tmp_path / "z.st")
    assert sha256_file(out2) == sha256_file(tiny_checkpoint)


def test_two_sources_overlapping_channel_scalar_oracle(tmp_path):
    """theta + 0.5*d1 + 0.5*d2 on the shared channel, recomputed by hand."""
    rng = np.random.default_rng(6)
    name = "model.layers.0.mlp.gate_proj.weight"
    base = rng.standard_normal((4, 3)).astype(np.float32)
    s1 = base.copy(); s1[2] += rng.standard_normal(3).astype(np.float32)
    s2 = base.copy(); s2[2] += rng.standard_normal(3).astype(np.float32)

    t = simple_checkpoint(tmp_path / "t.st", {name: ("F32", base)}, {"model_id": "trg"})
    a1 = simple_checkpoint(tmp_path / "a1.st", {name: ("F32", s1)}, {"model_id": "abl1"})
    a2 = simple_checkpoint(tmp_path / "a2.st", {name: ("F32", s2)}, {"model_id": "abl2"})
    mask1 = unified([ChannelId("model.layers.0.mlp.gate_proj", 2)], 4, "abl1")
    mask2 = unified([ChannelId("model.layers.0.mlp.gate_proj", 2)], 4, "abl2")
    plan = MergePlan(t, [MergeSource(a1, mask1, 0.5), MergeSource(a2, mask2, 0.5)], "act")
    out, _ = merge(plan, tmp_path / "m.st")
    got = read_all(out)[name]

    expect = base.astype(np.float64).copy()
    for j in range(3):
        acc = float(base[2, j])
        acc += 0.5 * (float(s1[2, j]) - float(base[2, j]))
        acc += 0.5 * (float(s2[2, j]) - float(base[2, j]))
        expect[2, j] = np.float32(acc)
    assert np.array_equal(got, expect)
    # untouched rows byte-identical
    assert np.array_equal(got[[0, 1, 3]], base[[0, 1, 3]].astype(np.float64))


def test_locality_unmasked_channels_byte_identical(tmp_path):
    spec = SynthSpec(n_layers=2, hidden_dim=16, intermediate_dim=32, vocab_size=64, seed=3, use_bias=True)
    target = synth_checkpoint(spec, tmp_path / "t.st")
    other = SynthSpec(n_layers=2, hidden_dim=16, intermediate_dim=32, vocab_size=64, seed=4, use_bias=True)
    ability_raw = synth_checkpoint(other, tmp_path / "araw.st")
    # rewrite ability metadata so module tables match but ids differ
    index = open_checkpoint(target)
    rng = np.random.default_rng(12)
    universe = [
        ChannelId(path, i)
        for path, entry in index.module_table.items()
        for i in range(entry.n_channels)
    ]
    picks = rng.choice(len(universe), size=max(1, len(universe) // 100), replace=False)
    mask = unified([universe[i] for i in picks], len(universe))
    plan = MergePlan(target, [MergeSource(ability_raw, mask, 0.7)], "act")
    out, manifest = merge(plan, tmp_path / "m.st")

    from abltx.checkpoint import read_channel_values

    merged_index = open_checkpoint(out)
    target_index = open_checkpoint(target)
    masked = set(mask.channels)
    identical = 0
    for channel in universe:
        a = read_channel_values(target_index, channel)
        b = read_channel_values(merged_index, channel)
        if channel in masked:
            continue
        if np.array_equal(a, b):
            identical += 1
    unmasked_total = len(universe) - len(masked)
    assert identical == unmasked_total
    assert manifest["sources"][0]["transferred_channels"] == len(masked)


def test_lambda_linearity_on_dyadic_values(tmp_path):
    """With dyadic weights and lambdas the update is exact, so linearity in
    lambda holds bit for bit through the full engine."""
    rng = np.random.default_rng(10)
    name = "model.layers.0.self_attn.q_proj.weight"
    grid = rng.integers(-256, 257, size=(6, 8)).astype(np.float64) / 256.0
    delta = rng.integers(-64, 65, size=(6, 8)).astype(np.float64) / 256.0
    t, a = write_pair(
        tmp_path,
        {name: ("F32", grid.astype(np.float32))},
        {name: ("F32", (grid + delta).astype(np.float32))},
    )

    def merged_tensor(lam):
        out, _ = merge(MergePlan(t, [MergeSource(a, None, lam)], "act"), tmp_path / f"m{lam}.st")
        return read_all(out)[name]

    base = grid
    m1 = merged_tensor(0.25) - base
    m2 = merged_tensor(0.5) - base
    m3 = merged_tensor(0.75) - base
    assert np.array_equal(m3, m1 + m2)


def test_ta_equals_act_with_full_masks(tmp_path):
    rng = np.random.default_rng(14)
    name = "model.layers.0.mlp.down_proj.weight"
    base = rng.standard_normal((5, 7)).astype(np.float32)
    abil = rng.standard_normal((5, 7)).astype(np.float32)
    t, a = write_pair(tmp_path, {name: ("F32", base)}, {name: ("F32", abil)})
    out_ta, _ = merge(MergePlan(t, [MergeSource(a, None, 0.3)], "ta"), tmp_path / "ta.st")
    full = unified([ChannelId("model.layers.0.mlp.down_proj", i) for i in range(5)], 5)
    out_act, _ = merge(MergePlan(t, [MergeSource(a, full, 0.3)], "act"), tmp_path / "act.st")
    assert sha256_file(out_ta) == sha256_file(out_act)


def test_ta_scaling(tmp_path):
    name = "model.norm.weight"
    zeros = np.zeros(6, dtype=np.float32)
    twice = (2 * np.arange(6)).astype(np.float32)
    t, a = write_pair(tmp_path, {name: ("F32", zeros)}, {name: ("F32", twice)})
    out, _ = merge(MergePlan(t, [MergeSource(a, None, 0.5)], "ta"), tmp_path / "m.st")
    assert np.array_equal(read_all(out)[name], np.arange(6, dtype=np.float64))


def test_ties_single_source_is_trimmed_task_arithmetic(tmp_path):
    rng = np.random.default_rng(20)
    name = "model.layers.0.mlp.up_proj.weight"
    base = rng.standard_normal((4, 5)).astype(np.float32)
    delta = rng.standard_normal((4, 5)).astype(np.float32)
    t, a = write_pair(tmp_path, {name: ("F32", base)}, {name: ("F32", base + delta)})
    out, _ = merge(
        MergePlan(t, [MergeSource(a, None, 0.5)], "ties", ties_trim_fraction=0.4),
        tmp_path / "m.st",
    )
    got = read_all(out)[name]

    wide_d = widen_f64((base + delta).astype(np.float32), "F32") - widen_f64(base, "F32")
    flat = wide_d.reshape(-1)
    k = round(flat.size * 0.4)
    order = np.argsort(-np.abs(flat), kind="stable")
    trimmed = np.zeros_like(flat)
    trimmed[order[:k]] = flat[order[:k]]
    expect = widen_f64(base, "F32") + 0.5 * trimmed.reshape(wide_d.shape)
    expect_f32 = expect.astype(np.float32).astype(np.float64)
    keep_original = trimmed.reshape(wide_d.shape) == 0
    expect_f32[keep_original] = widen_f64(base, "F32")[keep_original]
    assert np.array_equal(got, expect_f32)


def test_ties_opposite_signs_cancel(tmp_path):
    """Equal-magnitude opposite-sign deltas elect no sign; element unchanged."""
    name = "model.norm.weight"
    base = np.array([1.0, -2.0], dtype=np.float32)
    up = np.array([1.5, -2.0], dtype=np.float32)     # delta +0.5 on element 0
    down = np.array([0.5, -2.0], dtype=np.float32)   # delta -0.5 on element 0
    t = simple_checkpoint(tmp_path / "t.st", {name: ("F32", base)}, {"model_id": "trg"})
    a1 = simple_checkpoint(tmp_path / "a1.st", {name: ("F32", up)}, {"model_id": "abl1"})
    a2 = simple_checkpoint(tmp_path / "a2.st", {name: ("F32", down)}, {"model_id": "abl2"})
    plan = MergePlan(
        t, [MergeSource(a1, None, 1.0), MergeSource(a2, None, 1.0)],
        "ties", ties_trim_fraction=1.0,
    )
    out, _ = merge(plan, tmp_path / "m.st")
    assert np.array_equal(read_all(out)[name], base.astype(np.float64))
    assert sha256_file(out) == sha256_file(t)


def test_ties_agreeing_signs_average(tmp_path):
    name = "model.norm.weight"
    base = np.zeros(3, dtype=np.float32)
    a1_vals = np.array([1.0, -1.0, 0.0], dtype=np.float32)
    a2_vals = np.array([3.0, -3.0, 0.0], dtype=np.float32)
    t = simple_checkpoint(tmp_path / "t.st", {name: ("F32", base)}, {"model_id": "trg"})
    a1 = simple_checkpoint(tmp_path / "a1.st", {name: ("F32", a1_vals)}, {"model_id": "abl1"})
    a2 = simple_checkpoint(tmp_path / "a2.st", {name: ("F32", a2_vals)}, {"model_id": "abl2"})
    plan = MergePlan(
        t, [MergeSource(a1, None, 1.0), MergeSource(a2, None, 1.0)],
        "ties", ties_trim_fraction=1.0,
    )
    out, _ = merge(plan, tmp_path / "m.st")
    # mean of agreeing lambda-weighted deltas: (1+3)/2 and (-1-3)/2
    assert np.array_equal(read_all(out)[name], np.array([2.0, -2.0, 0.0]))


def test_ties_respects_channel_mask(tmp_path):
    name = "model.norm.weight"
    base = np.zeros(4, dtype=np.float32)
    abil = np.array([5.0, 5.0, 5.0, 5.0], dtype=np.float32)
    t, a = write_pair(tmp_path, {name: ("F32", base)}, {name: ("F32", abil)})
    mask = unified([ChannelId("model.norm", 1)], 4)
    plan = MergePlan(t, [MergeSource(a, mask, 1.0)], "ties", ties_trim_fraction=1.0)
    out, _ = merge(plan, tmp_path / "m.st")
    assert read_all(out)[name].tolist() == [0.0, 5.0, 0.0, 0.0]


def test_dare_zero_drop_equals_task_arithmetic(tmp_path, tiny_checkpoint):
    ability = perturb_checkpoint(
        tiny_checkpoint,
        PerturbationPlan((ChannelId("model.layers.1.self_attn.o_proj", 7),), 2.0, 8),
        tmp_path / "abl.st",
    )
    ta, _ = merge(MergePlan(tiny_checkpoint, [MergeSource(ability, None, 0.6)], "ta"), tmp_path / "ta.st")
    dare, _ = merge(
        MergePlan(tiny_checkpoint, [MergeSource(ability, None, 0.6)], "dare", dare_drop_prob=0.0, seed=9),
        tmp_path / "dare.st",
    )
    assert sha256_file(ta) == sha256_file(dare)


def test_dare_099_amplifies_kept_elements_100x(tmp_path):
    name = "model.norm.weight"
    n = 4096
    base = np.zeros(n, dtype=np.float32)
    abil = np.ones(n, dtype=np.float32)
    t, a = write_pair(tmp_path, {name: ("F32", base)}, {name: ("F32", abil)})
    out, _ = merge(
        MergePlan(t, [MergeSource(a, None, 1.0)], "dare", dare_drop_prob=0.99, seed=123),
        tmp_path / "m.st",
    )
    got = read_all(out)[name]
    kept = got[got != 0]
    assert kept.size > 0
    # rescale factor 1/(1-0.99) = 100x
    assert np.allclose(kept, 100.0, rtol=1e-12)
    assert kept.size < n * 0.05  # most elements dropped


def test_dare_keep_rate_and_chunk_invariance(tmp_path):
    key = derive_key(7, 0, "model.norm.weight")
    whole = keep_mask(key, 0, 100_000, 0.9)
    assert abs(whole.mean() - 0.1) < 0.01
    parts = np.concatenate([keep_mask(key, 0, 33_333, 0.9), keep_mask(key, 33_333, 66_667, 0.9)])
    assert np.array_equal(whole, parts)


def test_dare_mean_matches_task_arithmetic(tmp_path):
    """Monte-Carlo unbiasedness: the seed-averaged DARE output equals the
    task-arithmetic result within 5 sigma / sqrt(n_seeds) per element."""
    rng = np.random.default_rng(3)
    name = "model.norm.weight"
    base = rng.standard_normal(64).astype(np.float32)
    abil = (base + rng.standard_normal(64).astype(np.float32)).astype(np.float32)
    t, a = write_pair(tmp_path, {name: ("F32", base)}, {name: ("F32", abil)})
    ta, _ = merge(MergePlan(t, [MergeSource(a, None, 0.5)], "ta"), tmp_path / "ta.st")
    expect = read_all(ta)[name]

    n_seeds, p_drop = 200, 0.5
    acc = np.zeros(64, dtype=np.float64)
    samples = np.zeros((n_seeds, 64))
    for s in range(n_seeds):
        out, _ = merge(
            MergePlan(t, [MergeSource(a, None, 0.5)], "dare", dare_drop_prob=p_drop, seed=s),
            tmp_path / "d.st",
        )
        samples[s] = read_all(out)[name]
        acc += samples[s]
    mean = acc / n_seeds
    sigma = samples.std(axis=0, ddof=1)
    tol = 5 * sigma / np.sqrt(n_seeds)
    assert (np.abs(mean - expect) <= tol + 1e-9).all()


def test_dare_invalid_drop_prob(tmp_path, tiny_checkpoint):
    plan = MergePlan(tiny_checkpoint, [MergeSource(tiny_checkpoint, None, 1.0)], "dare", dare_drop_prob=1.0)
    with pytest.raises(ContractError, match="drop probability"):
        merge(plan, tmp_path / "x.st")


def test_merge_determinism_across_runs_and_workers(tmp_path, tiny_checkpoint):
    ability = perturb_checkpoint(
        tiny_checkpoint,
        PerturbationPlan(
            (ChannelId("model.embed_tokens", 3), ChannelId("model.layers.0.mlp.down_proj", 1)), 1.0, 2
        ),
        tmp_path / "abl.st",
    )
    digests = set()
    for run, workers in enumerate([1, 1, 4, 8]):
        out, _ = merge(
            MergePlan(tiny_checkpoint, [MergeSource(ability, None, 0.4)], "dare", dare_drop_prob=0.3, seed=5),
            tmp_path / f"m{run}.st",
            max_chunk_bytes=256,
            workers=workers,
        )
        digests.add(sha256_file(out))
    assert len(digests) == 1


def test_merge_chunk_size_independence(tmp_path, tiny_checkpoint):
    ability = perturb_checkpoint(
        tiny_checkpoint,
        PerturbationPlan((ChannelId("model.layers.0.self_attn.k_proj", 9),), 1.5, 4),
        tmp_path / "abl.st",
    )
    index = open_checkpoint(tiny_checkpoint)
    mask = unified([ChannelId("model.layers.0.self_attn.k_proj", 9)], index.total_channels())
    outs = []
    for chunk in (128, 4096, 1 << 22):
        out, _ = merge(
            MergePlan(tiny_checkpoint, [MergeSource(ability, mask, 0.9)], "act"),
            tmp_path / f"c{chunk}.st",
            max_chunk_bytes=chunk,
        )
        outs.append(sha256_file(out))
    assert len(set(outs)) == 1


def test_merge_validation_errors(tmp_path, tiny_checkpoint):
    other = synth_checkpoint(
        SynthSpec(n_layers=1, hidden_dim=16, intermediate_dim=32, vocab_size=64, seed=1),
        tmp_path / "short.st",
    )
    with pytest.raises(ContractError, match="module table"):
        merge(MergePlan(tiny_checkpoint, [MergeSource(other, None, 1.0)], "act"), tmp_path / "x.st")

    index = open_checkpoint(tiny_checkpoint)
    bad_mask = unified([ChannelId("model.norm", 0)], index.total_channels() + 1)
    ability = perturb_checkpoint(
        tiny_checkpoint, PerturbationPlan((ChannelId("model.norm", 0),), 1.0, 0), tmp_path / "a.st"
    )
    with pytest.raises(ContractError, match="universe"):
        merge(MergePlan(tiny_checkpoint, [MergeSource(ability, bad_mask, 1.0)], "act"), tmp_path / "x.st")

    stray = unified([ChannelId("model.layers.9.mlp.up_proj", 0)], index.total_channels())
    with pytest.raises(ContractError, match="missing from target"):
        merge(MergePlan(tiny_checkpoint, [MergeSource(ability, stray, 1.0)], "act"), tmp_path / "x.st")

    with pytest.raises(ContractError, match="more than once"):
        merge(
            MergePlan(tiny_checkpoint, [MergeSource(ability, None, 0.5), MergeSource(ability, None, 0.5)], "ta"),
            tmp_path / "x.st",
        )

    with pytest.raises(ContractError, match="lambda"):
        MergePlan(tiny_checkpoint, [MergeSource(ability, None, float("nan"))], "act").validate()

    with pytest.raises(ContractError, match="trim fraction"):
        MergePlan(tiny_checkpoint, [MergeSource(ability, None, 1.0)], "ties", ties_trim_fraction=0.0).validate()


def test_manifest_contents(tmp_path, tiny_checkpoint):
    index = open_checkpoint(tiny_checkpoint)
    ability = perturb_checkpoint(
        tiny_checkpoint, PerturbationPlan((ChannelId("model.norm", 1),), 1.0, 0), tmp_path / "a.st"
    )
    mask = unified([ChannelId("model.norm", 1), ChannelId("model.embed_tokens", 0)], index.total_channels())
    out, manifest = merge(
        MergePlan(tiny_checkpoint, [MergeSource(ability, mask, 0.4)], "act", seed=17),
        tmp_path / "m.st",
    )
    assert manifest["seed"] == 17
    assert manifest["output_checksum"] == sha256_file(out)
    src = manifest["sources"][0]
    assert src["transferred_channels"] == 2
    assert src["transferred_elements"] == 1 + 64  # norm element + embedding column
    assert 0 <= src["element_fraction"] <= 1


def test_bf16_checkpoint_merge(tmp_path):
    rng = np.random.default_rng(30)
    name = "model.layers.0.self_attn.q_proj.weight"
    base_f = rng.standard_normal((4, 4)).astype(np.float32)
    abil_f = rng.standard_normal((4, 4)).astype(np.float32)
    from abltx.checkpoint import narrow_from_f64

    base = narrow_from_f64(base_f.astype(np.float64), "BF16")
    abil = narrow_from_f64(abil_f.astype(np.float64), "BF16")
    t, a = write_pair(tmp_path, {name: ("BF16", base)}, {name: ("BF16", abil)})
    out, _ = merge(MergePlan(t, [MergeSource(a, None, 1.0)], "act"), tmp_path / "m.st")
    # lambda=1 full mask: one dtype round-trip of the ability values
    got = read_tensor(open_checkpoint(out), name)
    wide_t, wide_a = widen_f64(base, "BF16"), widen_f64(abil, "BF16")
    expect = narrow_from_f64(wide_t + (wide_a - wide_t), "BF16")
    assert np.array_equal(got, expect)
