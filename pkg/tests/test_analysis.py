import csv
import io
import math

import numpy as np
import pytest

from oracles import ideal_hits_bruteforce, percentile_inverted_cdf
from kvtrace.analysis import (
    DistributionTable,
    HeatmapTable,
    TraceView,
    block_lifespans,
    clairvoyant_capacity_curve,
    cross_user_matrix,
    ideal_hit_ratio,
    kv_size_distribution,
    lifespan_distribution,
    lifespan_timeline,
    lorenz,
    next_turn_frequency,
    per_type_contribution,
    reuse_skew,
    reuse_time_distribution,
    spatial_heatmap,
    turn_distribution,
    user_skew,
)
from kvtrace.trace import GeneratorSpec, RequestType, TraceRecord, generate_synthetic, load_profile
from kvtrace.trace.generator import zipf_weights


def rec(ts, cid, groups, out=(), user="u1", parent=None, rtype=RequestType.TEXT):
    return TraceRecord(float(ts), cid, parent, user, rtype, 4 * len(groups), 4 * len(out), tuple(groups), tuple(out))


def spec(types, **kw):
    return GeneratorSpec.from_dict({"spec_version": 1, "types": types, **kw})


def text_type(**kw):
    t = {"type": "text", "rate": 1.0, "system_prompt_tokens": 0, "suffix_tokens": 8, "output_tokens": 4,
         "next_turn_prob": 0.0, "think_time": 1.0}
    t.update(kw)
    return t


# ------------------------------------------------------------ ideal hits


def test_ideal_empty_trace():
    acc = ideal_hit_ratio([])
    assert acc.ratio == 0.0 and acc.total_blocks == 0


def test_ideal_two_identical_requests():
    recs = [rec(0, "a", range(1, 9)), rec(1, "b", range(1, 9))]
    acc = ideal_hit_ratio(recs)
    assert (acc.hit_blocks, acc.total_blocks, acc.ratio) == (8, 16, 0.5)


def test_ideal_same_request_repeats_do_not_count():
    # a block key repeated inside one request is not a reuse
    recs = [rec(0, "a", [1, 1, 1])]
    assert ideal_hit_ratio(recs).hit_blocks == 0


def test_ideal_counts_prior_outputs():
    recs = [rec(0, "a", [1], out=[2]), rec(1, "b", [1, 2], parent="a")]
    assert ideal_hit_ratio(recs).hit_blocks == 2
    assert ideal_hit_ratio(recs, include_outputs=False).hit_blocks == 1


@pytest.mark.parametrize("block_tokens", [4, 16])
def test_ideal_matches_bruteforce(sample_records, block_tokens):
    v = TraceView(sample_records, block_tokens)
    acc = ideal_hit_ratio(v)
    assert (acc.hit_blocks, acc.total_blocks) == ideal_hits_bruteforce(v.blocked)
    assert sum(h for h, _ in acc.per_user.values()) == acc.hit_blocks
    assert sum(h for h, _ in acc.per_category.values()) == acc.hit_blocks


# ----------------------------------------------------------------- skew


def test_reuse_skew_uniform_is_diagonal():
    recs = [rec(0, "a", [1, 2, 3, 4]), rec(1, "b", [1, 2, 3, 4])]
    c = reuse_skew(recs)
    np.testing.assert_allclose(c.y, c.x)


def test_reuse_skew_degenerate():
    # only block 1 is reused; the other keys are never reused
    recs = [rec(i, f"r{i}", [1, 100 + i]) for i in range(5)]
    c = reuse_skew(recs)
    assert c.y[0] == 1.0 and np.all(c.y == 1.0)


def test_reuse_skew_zipf_counts():
    rng = np.random.default_rng(3)
    n_keys = 300
    counts = 1 + rng.zipf(1.2, size=n_keys).clip(max=200)
    recs = []
    t = 0
    order = rng.permutation(np.repeat(np.arange(n_keys), counts))
    for i, k in enumerate(order):
        recs.append(rec(t, f"r{i}", [int(k) + 1]))
        t += 1
    c = reuse_skew(recs)
    ref = np.sort(counts - 1)[::-1]
    np.testing.assert_allclose(c.y, np.cumsum(ref) / ref.sum())
    np.testing.assert_allclose(c.x, np.arange(1, n_keys + 1) / n_keys)


def test_lorenz_zero_total():
    c = lorenz([0, 0, 0])
    assert list(c.y) == [0.0, 0.0, 0.0]


# ------------------------------------------------------------ decompositions


def test_per_type_all_single_turn():
    recs = [rec(0, "a", [1, 2]), rec(1, "b", [1, 2], rtype=RequestType.FILE)]
    d = per_type_contribution(recs)
    assert d["single_turn"] == 1.0 and d["multi_turn"] == 0.0
    assert d["by_type"]["file"] == 1.0


def test_per_type_multi_turn_only_hits():
    s = spec([text_type(rate=0.5, next_turn_prob=0.7)], duration=600, users=10)
    d = per_type_contribution(generate_synthetic(s, 1))
    assert d["total_hits"] > 0
    assert d["multi_turn"] == 1.0 and d["single_turn"] == 0.0


def test_per_type_shares_sum_to_one(sample_records):
    d = per_type_contribution(sample_records)
    assert sum(d["by_type"].values()) == pytest.approx(1.0)
    assert d["single_turn"] + d["multi_turn"] == pytest.approx(1.0)


def test_cross_user_single_user():
    recs = [rec(i, f"r{i}", [1, 2, 3]) for i in range(4)]
    m = cross_user_matrix(recs)
    assert m.values.shape == (1, 1) and m.meta["diagonal_mass"] == 1.0


def test_cross_user_disjoint_users():
    recs = [rec(i, f"r{i}", [1000 * (i % 3) + 1, 1000 * (i % 3) + 2], user=f"u{i % 3}") for i in range(30)]
    m = cross_user_matrix(recs)
    off = m.values - np.diag(np.diag(m.values))
    assert m.values.shape == (3, 3) and np.all(off == 0)
    assert m.meta["diagonal_mass"] == pytest.approx(1.0)


def test_cross_user_shrinks_to_available_users():
    recs = [rec(0, "a", [1], user="x"), rec(1, "b", [1], user="y")]
    m = cross_user_matrix(recs, top_k=20)
    assert m.row_labels == m.col_labels and len(m.row_labels) == 2
    assert m.cell("y", "x") == 1.0


def test_cross_user_shared_pool_share():
    # single-turn requests; 5% draw one shared prompt, the rest a private one
    s = spec(
        [text_type(rate=2.0, system_prompt_tokens=32, suffix_tokens=4, output_tokens=0)],
        duration=2000, users=20, zipf=0.0, user_prompts=1, shared_prompts=1, shared_prompt_prob=0.05,
    )
    m = cross_user_matrix(generate_synthetic(s, 7), top_k=20)
    off = 1.0 - m.meta["diagonal_mass"]
    assert abs(off - 0.05) <= 0.02


def test_user_skew_uniform_is_diagonal():
    recs = [rec(i, f"r{i}", [1], user=f"u{i % 4}") for i in range(40)]
    c = user_skew(recs)["requests"]
    np.testing.assert_allclose(c.y, c.x)


def test_user_skew_matches_zipf_partial_sums():
    n = 50
    s = spec([text_type(rate=20.0, suffix_tokens=4, output_tokens=0)], duration=1000, users=n, zipf=1.0)
    c = user_skew(generate_synthetic(s, 11))["requests"]
    assert len(c.y) == n
    ref = np.cumsum(zipf_weights(n, 1.0))
    assert np.max(np.abs(c.y - ref)) < 0.02


# ------------------------------------------------------------------ turns


def test_turns_all_single():
    recs = [rec(i, f"r{i}", [i + 1]) for i in range(10)]
    dist, stats = turn_distribution(recs)
    assert dist.p50 == dist.p90 == 1


def test_turns_geometric_mean():
    s = spec([text_type(rate=5.0, next_turn_prob=0.8, think_time=0.01)], duration=600, users=50, zipf=0.0)
    dist, stats = turn_distribution(generate_synthetic(s, 2))
    assert abs(dist.mean - 5.0) / 5.0 < 0.05


def test_turn_stats_sorted_and_csv():
    recs = [
        rec(0, "a", [1], user="x"), rec(1, "b", [1, 2], user="x", parent="a"),
        rec(2, "c", [5], user="y"),
    ]
    _, stats = turn_distribution(recs)
    assert stats.users == ["x", "y"] and list(stats.mean) == [2.0, 1.0]
    rows = list(csv.reader(io.StringIO(stats.to_csv())))
    assert rows[0] == ["user", "sessions", "mean_turns", "std_turns"] and rows[1][0] == "x"


def test_next_turn_zero():
    s = spec([text_type(rate=1.0)], duration=1800, users=10)
    h = next_turn_frequency(generate_synthetic(s, 0))
    finite = h.values[~np.isnan(h.values)]
    assert finite.size > 0 and np.all(finite == 0)


def test_next_turn_stationary():
    s = spec(
        [text_type(rate=8.0, next_turn_prob=0.6, think_time=0.01, suffix_tokens=4, output_tokens=0)],
        duration=2400, users=40,
    )
    recs = generate_synthetic(s, 4)
    # every category over the whole trace
    h = next_turn_frequency(recs, window=2400.0)
    assert np.all(np.abs(h.values - 0.6) <= 0.05)
    # per 10-minute window for the well-populated categories
    h = next_turn_frequency(recs, window=600.0, categories=["text-1", "text-2"])
    assert h.values.shape == (2, 4)
    assert np.all(np.abs(h.values - 0.6) <= 0.05)


def test_next_turn_absent_cells_nan():
    recs = [rec(0, "a", [1]), rec(1300, "b", [2])]
    h = next_turn_frequency(recs, window=600.0)
    assert h.values.shape == (1, 3) and math.isnan(h.values[0, 1])


# ------------------------------------------------------------- reuse time


def test_reuse_time_no_reuse():
    recs = [rec(i, f"r{i}", [i + 1]) for i in range(5)]
    d = reuse_time_distribution(recs)["overall"]
    assert d.empty and d.summary()["empty"] and d.summary()["p50"] is None


def test_reuse_time_exponential_median():
    s = spec([text_type(rate=2.0, next_turn_prob=0.7, think_time={"dist": "exp", "mean": 5.0})], duration=3000, users=100)
    d = reuse_time_distribution(generate_synthetic(s, 5))["overall"]
    assert abs(d.p50 - math.log(2) / 0.2) / (math.log(2) / 0.2) < 0.05


def test_reuse_time_groupings(sample_records):
    v = TraceView(sample_records)
    total = reuse_time_distribution(v)["overall"].count
    by_cat = reuse_time_distribution(v, "category")
    by_turn = reuse_time_distribution(v, "turn")
    assert sum(d.count for d in by_cat.values()) == total
    assert by_turn["single_turn"].count + by_turn["multi_turn"].count == total
    with pytest.raises(ValueError):
        reuse_time_distribution(v, "weekday")


# ---------------------------------------------------------------- spatial


def test_spatial_full_and_empty_cells(sample_records):
    v = TraceView(sample_records)
    h = spatial_heatmap(v, offsets=[0, 30, 60], strides=[0, 50, 100])
    assert h.cell(0, 100) == pytest.approx(ideal_hit_ratio(v).ratio)
    for o in (0, 30, 60):
        assert h.cell(o, 0) == 0.0
    assert "key-presence" in h.meta["note"]


def test_spatial_monotone_in_stride(sample_records):
    strides = list(range(0, 101, 10))
    h = spatial_heatmap(sample_records, offsets=[0], strides=strides)
    assert np.all(np.diff(h.values[0]) >= 0)


def test_spatial_window_example():
    # 10-block requests; caching the first half exposes exactly blocks 0..4
    recs = [rec(0, "a", range(1, 11)), rec(1, "b", range(1, 11))]
    h = spatial_heatmap(recs, offsets=[0, 50], strides=[50])
    assert h.cell(0, 50) == pytest.approx(5 / 20)
    assert h.cell(50, 50) == pytest.approx(5 / 20)


def test_spatial_rejects_bad_grid():
    with pytest.raises(ValueError):
        spatial_heatmap([], offsets=[-10])


# -------------------------------------------------------------- lifespans


def test_lifespan_definition():
    recs = [rec(0, "a", [1]), rec(5, "b", [1]), rec(9, "c", [1]), rec(9, "d", [7])]
    d = lifespan_distribution(recs)
    assert sorted(block_lifespans(recs).tolist()) == [0.0, 9.0]
    assert d.count == 2 and d.values[-1] == 9.0


def test_lifespan_timeline_means():
    recs = [rec(0, "a", [1]), rec(10, "b", [1]), rec(700, "c", [2]), rec(730, "d", [2])]
    h = lifespan_timeline(recs, window=600.0)
    assert h.values.shape == (1, 2)
    np.testing.assert_allclose(h.values[0], [10.0, 30.0])


# ---------------------------------------------------------------- kv size


def test_kv_size_hand_calculation():
    prof = load_profile("qwen2-7b")
    recs = [
        TraceRecord(0.0, "z", None, "u", RequestType.TEXT, 0, 0, (), ()),
        TraceRecord(1.0, "a", None, "u", RequestType.TEXT, 973, 0, tuple(range(1, 244)), ()),
    ]
    d = kv_size_distribution(recs, [prof])[("qwen2-7b", "single")]
    assert d.values[0] == 0.0
    assert d.values[1] == pytest.approx(973 * 28 * 2 * 4 * 128 * 2 / 62e9, rel=1e-12)
    assert d.values[1] == pytest.approx(55_795_712 / 62e9, rel=1e-12)
    assert kv_size_distribution(recs, [prof])[("qwen2-7b", "multi")].empty


# --------------------------------------------------------------- capacity


def test_capacity_no_reuse_is_zero():
    recs = [rec(i, f"r{i}", [i + 1]) for i in range(5)]
    c = clairvoyant_capacity_curve(recs, times=[0, 1, 2, 3, 4])
    assert np.all(c.blocks == 0) and c.integral() == 0.0


def test_capacity_counts_live_blocks():
    recs = [rec(0, "a", [1, 2]), rec(4, "b", [1]), rec(6, "c", [1, 2])]
    c = clairvoyant_capacity_curve(recs, times=[0, 3, 4, 5, 6, 7])
    assert c.blocks.tolist() == [2, 2, 2, 2, 0, 0]
    assert c.integral() == 12.0


def test_capacity_integral_identity():
    rng = np.random.default_rng(8)
    recs = []
    for i in range(300):
        g = [int(x) for x in rng.integers(1, 6, size=int(rng.integers(1, 6)))]
        recs.append(rec(int(rng.integers(0, 500)), f"r{i}", g))
    recs.sort(key=lambda r: r.timestamp)
    c = clairvoyant_capacity_curve(recs)
    assert c.integral() == float(block_lifespans(recs).sum())


def test_capacity_bytes_and_csv():
    prof = load_profile("qwen2-7b")
    recs = [rec(0, "a", [1, 2, 3, 4]), rec(10, "b", [1, 2, 3, 4])]
    c = clairvoyant_capacity_curve(recs, times=[0, 5], block_tokens=16)
    assert c.blocks.tolist() == [1, 1]
    assert c.bytes(prof)[0] == 16 * 57344
    rows = list(csv.reader(io.StringIO(c.to_csv(prof))))
    assert rows[0] == ["time", "blocks", "bytes", "hbm_multiple"] and len(rows) == 3


# ---------------------------------------------------------------- tables


def test_distribution_table_matches_oracle():
    rng = np.random.default_rng(0)
    for n in (1, 2, 7, 100):
        vals = rng.integers(0, 20, size=n).astype(float)
        d = DistributionTable.from_values(vals)
        for q in (50, 90, 99):
            assert d.percentile(q) == percentile_inverted_cdf(vals, q)
        assert (d.p50, d.p90, d.p99) == tuple(percentile_inverted_cdf(vals, q) for q in (50, 90, 99))
        assert np.all(np.diff(d.cdf) > 0) and d.cdf[-1] == 1.0
        assert d.cdf_at(d.values[0] - 1) == 0.0


def test_distribution_csv():
    d = DistributionTable.from_values([3.0, 1.0, 1.0, 2.0])
    rows = list(csv.reader(io.StringIO(d.to_csv())))
    assert rows == [["value", "cdf"], ["1.0", "0.5"], ["2.0", "0.75"], ["3.0", "1.0"]]


def test_heatmap_csv_and_shape_check():
    h = HeatmapTable(["a", "b"], [0, 10], np.array([[0.5, np.nan], [1.0, 0.0]]), "row\\col")
    rows = list(csv.reader(io.StringIO(h.to_csv())))
    assert rows == [["row\\col", "0", "10"], ["a", "0.5", ""], ["b", "1.0", "0.0"]]
    with pytest.raises(ValueError):
        HeatmapTable(["a"], [0, 1], np.zeros((2, 2)))
