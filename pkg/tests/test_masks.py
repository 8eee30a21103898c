from fractions import Fraction

import numpy as np
import pytest

from abltx.checkpoint import ChannelId, open_checkpoint
from abltx.errors import ContractError
from abltx.masks import (
    AbilityMask,
    Overlap,
    UnifiedMask,
    build_mask,
    format_overlap_cell,
    jaccard,
    mask_size,
    overlap,
    overlap_matrix,
    overlap_table_csv,
    parameter_fraction,
    random_baseline,
    read_mask,
    union_masks,
    write_mask,
)
from abltx.stats import ChannelStatVector

from test_stats import make_stats


def reference_mask_size(n, p):
    """Independent round-half-up over exact rationals."""
    x = Fraction(n) * Fraction(p) / Fraction(100)
    k = (x + Fraction(1, 2)).__floor__()
    return min(k, n)


def make_ability_mask(channels, tag="t", p=1.0, pair=("trg", "abl"), total=100):
    return AbilityMask(tuple(channels), tag, p, pair, total)


def test_mask_size_matches_reference_over_random_inputs():
    rng = np.random.default_rng(123)
    for _ in range(1000):
        n = int(rng.integers(1, 10_000_000))
        p = float(rng.uniform(1e-6, 100.0))
        assert mask_size(n, p) == reference_mask_size(n, p)


def test_mask_size_half_up_and_cap():
    assert mask_size(10, 25) == 3  # 2.5 rounds up
    assert mask_size(10, 35) == 4  # 3.5 rounds up
    assert mask_size(10, 100) == 10
    assert mask_size(3, 100.0) == 3
    with pytest.raises(ContractError):
        mask_size(10, 0)
    with pytest.raises(ContractError):
        mask_size(10, 100.5)


def test_large_universe_mask_count():
    # 1,750,500 channels at top-1% selects exactly 17,505
    n = 1_750_500
    table = (("mod.a", 750_500), ("mod.b", 1_000_000))
    values = np.random.default_rng(0).random(n)
    stats = make_stats(values, table)
    mask = build_mask(stats, 1.0)
    assert len(mask) == 17_505


def test_tie_break_canonical_order():
    stats = make_stats(np.ones(10), (("mod.b", 5), ("mod.a", 5)))
    mask = build_mask(stats, 30)
    assert mask.channels == (
        ChannelId("mod.a", 0),
        ChannelId("mod.a", 1),
        ChannelId("mod.a", 2),
    )


def test_build_mask_selects_top_values():
    values = np.array([0.1, 5.0, 0.2, 4.0, 0.3])
    mask = build_mask(make_stats(values), 40)
    assert set(mask.channels) == {ChannelId("mod.a", 1), ChannelId("mod.a", 3)}


def test_rank_invariance_under_scaling():
    rng = np.random.default_rng(5)
    values = rng.random(50)
    base = build_mask(make_stats(values), 10)
    scaled = build_mask(make_stats(values * 37.5), 10)
    assert base.channels == scaled.channels


def test_monotone_nesting():
    rng = np.random.default_rng(9)
    values = rng.random(40)
    # duplicated values exercise the tie-break path
    values[10:20] = values[0:10]
    stats = make_stats(values)
    previous = set()
    for p in (5, 10, 25, 50, 75, 100):
        current = set(build_mask(stats, p).channels)
        assert previous <= current
        previous = current


def test_union_idempotent_and_disjoint():
    a = make_ability_mask([ChannelId("m", i) for i in range(5)], tag="a")
    b = make_ability_mask([ChannelId("m", i) for i in range(5, 10)], tag="b")
    u_self = union_masks([a, a])
    assert len(u_self) == 5
    u = union_masks([a, b])
    assert len(u) == 10
    assert u.source_model_id == "abl"
    assert u.constituent_tags == ("a", "b")


def test_union_algebra():
    rng = np.random.default_rng(2)
    masks = [
        make_ability_mask(
            [ChannelId("m", int(i)) for i in rng.choice(50, size=8, replace=False)],
            tag=f"t{k}",
        )
        for k in range(3)
    ]
    a, b, c = masks
    flat = union_masks([a, b, c])
    assoc1 = set(union_masks([a, b]).channels) | set(c.channels)
    assoc2 = set(a.channels) | set(union_masks([b, c]).channels)
    assert assoc1 == assoc2 == set(flat.channels)
    assert set(union_masks([a, b]).channels) == set(union_masks([b, a]).channels)


def test_union_rejects_mixed_sources():
    a = make_ability_mask([ChannelId("m", 0)], pair=("trg", "abl1"))
    b = make_ability_mask([ChannelId("m", 1)], pair=("trg", "abl2"))
    with pytest.raises(ContractError, match="mixed source"):
        union_masks([a, b])
    c = make_ability_mask([ChannelId("m", 1)], pair=("trg", "abl1"), total=200)
    with pytest.raises(ContractError, match="universes"):
        union_masks([a, c])


def test_overlap_contract():
    m = make_ability_mask([ChannelId("m", i) for i in range(4)])
    assert overlap(m, m) == Overlap(100.0, 4)
    other = make_ability_mask([ChannelId("m", i) for i in range(10, 14)])
    assert overlap(m, other) == Overlap(0.0, 0)
    a = make_ability_mask([ChannelId("m", i) for i in range(5)])
    b = make_ability_mask([ChannelId("m", i) for i in range(2, 7)])
    got = overlap(a, b)
    assert got == Overlap(60.0, 3)
    # counts symmetric, ratios weighted by base size
    ab, ba = overlap(a, b), overlap(b, a)
    assert ab.count == ba.count
    assert ab.ratio_percent * len(a) == pytest.approx(ba.ratio_percent * len(b))


def test_overlap_universe_mismatch():
    a = make_ability_mask([ChannelId("m", 0)], total=100)
    b = make_ability_mask([ChannelId("m", 0)], total=101)
    with pytest.raises(ContractError, match="universe"):
        overlap(a, b)


def test_overlap_matrix_shapes_and_asymmetry():
    a = make_ability_mask([ChannelId("m", i) for i in range(4)], tag="a")
    b = make_ability_mask([ChannelId("m", i) for i in range(2, 10)], tag="b")
    matrix = overlap_matrix([a, b])
    assert matrix[0][0] == Overlap(100.0, 4)
    assert matrix[1][1] == Overlap(100.0, 8)
    assert matrix[0][1] == Overlap(50.0, 2)
    assert matrix[1][0] == Overlap(25.0, 2)
    same = overlap_matrix([a, a])
    assert all(cell == Overlap(100.0, 4) for row in same for cell in row)


def test_printed_cell_format():
    assert format_overlap_cell(Overlap(100.0 * 4434 / 17505, 4434)) == "25.3% (4,434)"
    assert format_overlap_cell(Overlap(100.0, 17505)) == "100.0% (17,505)"


def test_overlap_csv():
    a = make_ability_mask([ChannelId("m", i) for i in range(4)], tag="a")
    text = overlap_table_csv([a, a])
    lines = text.strip().split("\n")
    assert lines[0] == "base,other,overlap_pct,count"
    assert lines[1] == "a,a,100.0,4"


def test_random_baseline_values():
    assert random_baseline(1_750_500, 1) == 1.00
    assert random_baseline(10, 100) == 100.0
    with pytest.raises(ContractError):
        random_baseline(10, 0)


def test_random_baseline_monte_carlo():
    """Empirical mean overlap of independent top-p% masks is p percent."""
    rng = np.random.default_rng(31)
    n, p, trials = 10_000, 5.0, 400
    k = mask_size(n, p)
    ratios = []
    for _ in range(trials):
        a = rng.choice(n, size=k, replace=False)
        b = rng.choice(n, size=k, replace=False)
        ratios.append(100.0 * len(np.intersect1d(a, b)) / k)
    ratios = np.array(ratios)
    sigma = ratios.std(ddof=1) / np.sqrt(trials)
    assert abs(ratios.mean() - random_baseline(n, p)) < 3 * sigma


def test_jaccard_symmetric():
    a = make_ability_mask([ChannelId("m", i) for i in range(4)])
    b = make_ability_mask([ChannelId("m", i) for i in range(2, 6)])
    assert jaccard(a, b) == jaccard(b, a) == pytest.approx(2 / 6)


def test_mask_file_roundtrip(tmp_path):
    mask = make_ability_mask(
        [ChannelId("model.layers.0.mlp.up_proj", 3), ChannelId("lm_head", 11)],
        tag="ar-science", p=1.0, pair=("m-trg", "m-abl"), total=448,
    )
    path = write_mask(tmp_path / "m.json", mask)
    back = read_mask(path)
    assert back == mask
    unified = union_masks([mask])
    upath = write_mask(tmp_path / "u.json", unified)
    uback = read_mask(upath)
    assert isinstance(uback, UnifiedMask)
    assert uback == unified


def test_parameter_fraction(tiny_checkpoint):
    index = open_checkpoint(tiny_checkpoint)
    mask = make_ability_mask(
        [ChannelId("model.layers.0.self_attn.q_proj", 0), ChannelId("model.norm", 3)],
        total=index.total_channels(),
    )
    elements, fraction = parameter_fraction(mask, index)
    assert elements == 16 + 1  # one q_proj row of hidden=16 plus one norm element
    assert fraction == pytest.approx(elements / index.total_elements())


def test_build_mask_size_formula_property():
    rng = np.random.default_rng(77)
    for _ in range(60):
        n = int(rng.integers(1, 4000))
        p = float(rng.uniform(0.01, 100.0))
        stats = make_stats(rng.random(n))
        assert len(build_mask(stats, p)) == reference_mask_size(n, p)
