import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stfusion.core import TARGET_UNLABELED, DomainError, InputError, InvariantError, PairInterval
from stfusion.embedder import init_model
from stfusion.stpattern import (
    BinSpec,
    StHistogram,
    correct_pattern,
    corrected_values,
    count_patterns,
    lookup,
    read_histogram,
    total_variation,
    write_histogram,
    write_plot_data,
)

from conftest import make_dataset


def test_binspec_validation():
    for kw in ({"width": 0}, {"delta_min": 5, "delta_max": 5}, {"window": -1}, {"eps": -0.1}):
        with pytest.raises(InputError):
            BinSpec(**kw)


def test_bin_index_and_overflow():
    b = BinSpec(width=10, delta_min=-20, delta_max=20)
    assert b.num_bins == 6
    assert b.bin_index(-21) == 0
    assert b.bin_index(-20) == 1
    assert b.bin_index(-1) == 2
    assert b.bin_index(0) == 3
    assert b.bin_index(19) == 4
    assert b.bin_index(20) == 5
    assert b.bin_index(10**9) == 5
    assert list(b.bin_edges()) == [-20, -10, 0, 10, 20]


def test_uneven_range_last_bin_extends():
    b = BinSpec(width=7, delta_min=0, delta_max=20)
    assert b.num_range_bins == 3
    assert b.bin_index(20) == 3  # last range bin covers [14, 21)
    assert b.bin_index(21) == 4


def _hist(bins, C, entries):
    counts = np.zeros((C, C, bins.num_bins))
    for (a, b, k), v in entries.items():
        counts[a, b, k] = v
    return StHistogram(bins, C, counts)


def test_lookup_single_bin():
    bins = BinSpec(width=10, delta_min=0, delta_max=100, eps=0.0)
    h = _hist(bins, 2, {(0, 1, bins.bin_index(65)): 40})
    assert lookup(h, PairInterval(0, 1, 65)) == 1.0
    assert lookup(h, PairInterval(1, 0, 65)) == 0.0


def test_lookup_empty_window_is_zero():
    bins = BinSpec(width=10, delta_min=0, delta_max=100, eps=0.0)
    h = _hist(bins, 2, {(0, 1, 3): 5})
    assert lookup(h, PairInterval(0, 1, 85)) == 0.0
    assert lookup(StHistogram.empty(bins, 2), PairInterval(0, 1, 5)) == 0.0


def test_lookup_window_three_bins():
    bins = BinSpec(width=10, delta_min=0, delta_max=100, window=10, eps=0.0)
    k = bins.bin_index(55)
    h = _hist(bins, 2, {(0, 1, k - 1): 2, (0, 1, k): 3, (0, 1, k + 1): 5, (1, 1, 2): 90})
    assert h.total == 100
    assert lookup(h, PairInterval(0, 1, 55)) == pytest.approx(0.10, abs=1e-15)


def test_lookup_smoothing_counts_covered_bins():
    bins = BinSpec(width=10, delta_min=0, delta_max=30, window=10, eps=0.5)
    h = _hist(bins, 1, {(0, 0, 2): 4})
    # window around 15 touches bins 1..3 -> 4 + 3 * 0.5 over 4 + 0.5 * 5
    assert lookup(h, PairInterval(0, 0, 15)) == pytest.approx(5.5 / 6.5)


@given(
    arrays(np.int64, (2, 2, 8), elements=st.integers(0, 50)),
    st.integers(0, 1), st.integers(0, 1), st.integers(-40, 40),
)
def test_lookup_monotone_in_window(counts, a, b, delta):
    bins = BinSpec(width=10, delta_min=-30, delta_max=30, eps=0.0)
    h = StHistogram(bins, 2, counts.astype(float))
    vals = [lookup(h, PairInterval(a, b, delta), window=t) for t in range(0, 80, 5)]
    assert all(x <= y for x, y in zip(vals, vals[1:]))


@given(arrays(np.int64, (3, 3, 6), elements=st.integers(0, 20)), st.floats(0, 3))
def test_probabilities_normalised(counts, eps):
    bins = BinSpec(width=10, delta_min=-20, delta_max=20)
    h = StHistogram(bins, 3, counts.astype(float))
    p = h.probabilities(eps)
    if h.total + eps * h.total_bins > 0:
        assert abs(p.sum() - 1.0) < 1e-9


def test_histogram_rejects_bad_counts():
    bins = BinSpec(width=10, delta_min=0, delta_max=20)
    with pytest.raises(InputError):
        StHistogram(bins, 2, np.zeros((2, 2, 3)))
    bad = np.zeros((2, 2, bins.num_bins))
    bad[0, 0, 0] = -1
    with pytest.raises(InvariantError):
        StHistogram(bins, 2, bad)


# -- counting ----------------------------------------------------------------


def brute_force_counts(ds, model, bins):
    from stfusion.embedder import classify

    C = ds.num_cameras
    pos = np.zeros((C, C, bins.num_bins))
    allc = np.zeros_like(pos)
    for a, b in itertools.permutations(range(len(ds)), 2):
        oa, ob = ds[a], ds[b]
        k = bins.bin_index(ob.frame - oa.frame)
        allc[oa.camera, ob.camera, k] += 1
        if classify(model, oa, ob):
            pos[oa.camera, ob.camera, k] += 1
    return pos, allc - pos, allc


def test_count_patterns_three_observations():
    ds = make_dataset(
        [("x", 0, 10, [1.0, 0.0], None), ("y", 1, 25, [1.0, 0.2], None), ("z", 1, 5, [0.0, 1.0], None)],
        num_cameras=2, split=TARGET_UNLABELED,
    )
    bins = BinSpec(width=10, delta_min=-30, delta_max=30)
    model = init_model("identity", 2, tau=0.5)
    hp, hn, hm = count_patterns(model, ds, bins)
    # Only x<->y clears the threshold (cos ~0.98); x->y is +15, y->x is -15.
    expected = np.zeros_like(hp.counts)
    expected[0, 1, bins.bin_index(15)] = 1
    expected[1, 0, bins.bin_index(-15)] = 1
    assert np.array_equal(hp.counts, expected)
    assert hm.total == 6 and hn.total == 4


@given(st.integers(2, 10), st.integers(0, 10_000), st.floats(0.05, 0.95))
def test_count_patterns_matches_enumeration(n, seed, tau):
    rng = np.random.default_rng(seed)
    rows = [(f"o{i}", int(rng.integers(0, 3)), int(rng.integers(0, 200)), rng.normal(size=3), None)
            for i in range(n)]
    ds = make_dataset(rows, 3, TARGET_UNLABELED)
    bins = BinSpec(width=25, delta_min=-100, delta_max=100)
    model = init_model("identity", 3, tau=tau)
    got = count_patterns(model, ds, bins, block=3)
    for h, want in zip(got, brute_force_counts(ds, model, bins)):
        assert np.array_equal(h.counts, want)
    assert got[0].total + got[1].total == got[2].total


def test_all_same_classifier():
    rows = [(f"o{i}", i % 2, 7 * i, [1.0, 2.0], None) for i in range(6)]
    ds = make_dataset(rows, 2, TARGET_UNLABELED)
    hp, hn, hm = count_patterns(init_model("identity", 2, tau=0.1), ds, BinSpec(width=5, delta_min=-50, delta_max=50))
    assert hn.total == 0
    assert hp.equals(hm)


def test_count_patterns_budget_and_threads():
    rng = np.random.default_rng(0)
    rows = [(f"o{i:03d}", int(rng.integers(0, 3)), int(rng.integers(0, 500)), rng.normal(size=4), None)
            for i in range(60)]
    ds = make_dataset(rows, 3, TARGET_UNLABELED)
    bins = BinSpec(width=50, delta_min=-500, delta_max=500)
    m = init_model("identity", 4, tau=0.3)
    full = count_patterns(m, ds, bins)
    threaded = count_patterns(m, ds, bins, workers=4, block=7)
    assert all(a.equals(b) for a, b in zip(full, threaded))
    # A budget at or above the pair count is exhaustive.
    assert count_patterns(m, ds, bins, pair_budget=60 * 59)[2].equals(full[2])
    s1 = count_patterns(m, ds, bins, pair_budget=500, seed=4)
    s2 = count_patterns(m, ds, bins, pair_budget=500, seed=4)
    s3 = count_patterns(m, ds, bins, pair_budget=500, seed=5)
    assert s1[2].total == 500
    assert all(a.equals(b) for a, b in zip(s1, s2))
    assert not s1[2].equals(s3[2])


def test_count_patterns_errors():
    with pytest.raises(InputError):
        count_patterns(init_model("identity", 1), make_dataset([], 1, TARGET_UNLABELED), BinSpec())


def test_count_patterns_never_reads_labels():
    rows = [(f"o{i}", 0, i, [1.0, float(i)], 99) for i in range(5)]
    ds = make_dataset(rows, 1, TARGET_UNLABELED)
    count_patterns(init_model("identity", 2), ds, BinSpec())


# -- error correction --------------------------------------------------------


def test_corrected_values_example():
    v = corrected_values(0.3, 0.1, ep=0.1, en=0.2)
    assert v == pytest.approx((0.8 * 0.3 - 0.1 * 0.1) / 0.7)
    assert v == pytest.approx(0.3286, abs=5e-5)


def test_correct_pattern_identity_is_bin_exact():
    bins = BinSpec(width=10, delta_min=0, delta_max=30)
    rng = np.random.default_rng(1)
    hp = StHistogram(bins, 2, rng.integers(0, 9, (2, 2, bins.num_bins)).astype(float))
    hn = StHistogram(bins, 2, rng.integers(0, 9, (2, 2, bins.num_bins)).astype(float))
    assert correct_pattern(hp, hn, 0.0, 0.0).equals(hp)


@pytest.mark.parametrize("ep,en", [(0.5, 0.5), (0.7, 0.6), (1.0, 0.0)])
def test_correct_pattern_rejects_large_error_sum(ep, en):
    bins = BinSpec(width=10, delta_min=0, delta_max=30)
    h = StHistogram.empty(bins, 1)
    with pytest.raises(DomainError):
        correct_pattern(h, h, ep, en)


@given(
    arrays(np.int64, (2, 2, 5), elements=st.integers(0, 30)),
    arrays(np.int64, (2, 2, 5), elements=st.integers(0, 30)),
    st.floats(0, 0.45), st.floats(0, 0.45),
)
def test_correct_pattern_is_valid_distribution(pos, neg, ep, en):
    bins = BinSpec(width=10, delta_min=0, delta_max=30)
    hp, hn = StHistogram(bins, 2, pos.astype(float)), StHistogram(bins, 2, neg.astype(float))
    out = correct_pattern(hp, hn, ep, en)
    assert np.all(out.counts >= 0)
    if out.total > 0:
        assert out.total == pytest.approx(hp.total)
        assert abs(out.probabilities(0.0).sum() - 1.0) < 1e-9


def test_correction_recovers_mixture():
    # Build p_pos and p_neg as exact mixtures of known same/different patterns.
    bins = BinSpec(width=10, delta_min=0, delta_max=40)
    same = np.zeros((1, 1, bins.num_bins))
    same[0, 0, 1:3] = [0.7, 0.3]
    diff = np.full((1, 1, bins.num_bins), 1.0 / bins.num_bins)
    ep, en = 0.2, 0.1
    p_pos = (1 - ep) * same + ep * diff
    p_neg = en * same + (1 - en) * diff
    out = correct_pattern(StHistogram(bins, 1, p_pos * 1000), StHistogram(bins, 1, p_neg * 1000), ep, en)
    assert np.allclose(out.probabilities(0.0), same, atol=1e-12)
    assert total_variation(out.probabilities(0.0), same) < total_variation(p_pos, same)


# -- file format ---------------------------------------------------------------


def test_histogram_roundtrip_bit_exact(tmp_path):
    bins = BinSpec(width=13, delta_min=-100, delta_max=77, window=3, eps=0.25)
    rng = np.random.default_rng(2)
    h = StHistogram(bins, 3, rng.random((3, 3, bins.num_bins)) * 1e5)
    p = tmp_path / "h.hist"
    write_histogram(h, p)
    back = read_histogram(p)
    assert back.equals(h) and back.bins == bins
    write_histogram(back, tmp_path / "h2.hist")
    assert (tmp_path / "h2.hist").read_bytes() == p.read_bytes()


def test_histogram_file_errors(tmp_path):
    bins = BinSpec(width=10, delta_min=0, delta_max=20)
    p = tmp_path / "h.hist"
    write_histogram(StHistogram(bins, 2, np.ones((2, 2, bins.num_bins))), p)
    lines = p.read_text().splitlines()
    (tmp_path / "short.hist").write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(InputError):
        read_histogram(tmp_path / "short.hist")
    (tmp_path / "total.hist").write_text(lines[0].replace('"total": 16.0', '"total": 3.0') + "\n"
                                         + "\n".join(lines[1:]) + "\n")
    with pytest.raises(InputError):
        read_histogram(tmp_path / "total.hist")
    (tmp_path / "nohdr.hist").write_text("hello\n")
    with pytest.raises(InputError):
        read_histogram(tmp_path / "nohdr.hist")


def test_plot_data(tmp_path):
    bins = BinSpec(width=10, delta_min=0, delta_max=30)
    h = _hist(bins, 1, {(0, 0, 1): 1, (0, 0, 2): 3})
    p = tmp_path / "plot.csv"
    write_plot_data(h, p)
    rows = p.read_text().splitlines()
    assert rows[0] == "cam_i,cam_j,delta_lo,delta_hi,probability"
    assert rows[1:] == ["0,0,0,10,0.25", "0,0,10,20,0.75", "0,0,20,30,0.0"]
