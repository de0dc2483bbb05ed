import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fleetbo.campaign import CampaignConfig, run_initial_phase
from fleetbo.decision import ThresholdConfig, vote_pair
from fleetbo.divergence import (
    DegenerateRangeError,
    HistogramPair,
    bhattacharyya,
    build_histogram_pair,
    kl_divergence,
    ks_statistic,
    pairwise_reports,
    wasserstein1,
)
from fleetbo.simulator import SimulatorOracle, preset_heterogeneous


def ks_brute_force(a, b):
    """O(l*m) oracle: evaluate both ECDFs at every sample point by counting."""
    best = 0.0
    for x in list(a) + list(b):
        f = sum(1 for v in a if v <= x) / len(a)
        g = sum(1 for v in b if v <= x) / len(b)
        best = max(best, abs(f - g))
    return best


def w1_quantile_oracle(a, b):
    """Equal-size sample oracle: mean |sorted_a - sorted_b|."""
    assert len(a) == len(b)
    return float(np.mean(np.abs(np.sort(a) - np.sort(b))))


samples = st.lists(
    st.floats(min_value=-100, max_value=100, allow_nan=False), min_size=1, max_size=60
)
# dyadic lattice values keep sample + shift exact in binary floating point
lattice_samples = st.lists(st.integers(-800, 800).map(lambda i: i / 8.0), min_size=1, max_size=60)
lattice_shift = st.integers(-80, 80).map(lambda i: i / 8.0)


class TestKs:
    def test_identical(self):
        assert ks_statistic([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 0.0

    def test_disjoint(self):
        assert ks_statistic([0.0, 0.0], [1.0, 1.0]) == 1.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            ks_statistic([], [1.0])

    def test_against_brute_force(self, rng):
        for _ in range(100):
            a = rng.normal(0, 1, size=rng.integers(1, 201))
            b = rng.normal(0.3, 1.2, size=rng.integers(1, 201))
            assert ks_statistic(a, b) == pytest.approx(ks_brute_force(a, b), abs=1e-12)

    @given(a=samples, b=samples)
    @settings(max_examples=50, deadline=None)
    def test_symmetric_and_bounded(self, a, b):
        d = ks_statistic(a, b)
        assert 0.0 <= d <= 1.0
        assert d == ks_statistic(b, a)

    @given(a=lattice_samples, b=lattice_samples, c=lattice_shift)
    @settings(max_examples=30, deadline=None)
    def test_translation_of_both_invariant(self, a, b, c):
        shifted = ks_statistic([x + c for x in a], [x + c for x in b])
        assert shifted == pytest.approx(ks_statistic(a, b), abs=1e-12)


class TestWasserstein:
    def test_identical(self):
        assert wasserstein1([1.0, 2.0], [1.0, 2.0]) == 0.0

    def test_point_mass_translation(self):
        assert wasserstein1([0.0], [1.0]) == pytest.approx(1.0, abs=1e-15)

    def test_offset_pairs(self):
        assert wasserstein1([0.0, 1.0], [0.5, 1.5]) == pytest.approx(0.5, abs=1e-15)

    def test_against_quantile_oracle(self, rng):
        for _ in range(100):
            n = int(rng.integers(1, 201))
            a = rng.normal(0, 1, size=n)
            b = rng.normal(0.5, 2.0, size=n)
            assert wasserstein1(a, b) == pytest.approx(w1_quantile_oracle(a, b), abs=1e-12)

    @given(a=samples, b=samples)
    @settings(max_examples=50, deadline=None)
    def test_symmetric_nonnegative(self, a, b):
        w = wasserstein1(a, b)
        assert w >= 0.0
        assert w == pytest.approx(wasserstein1(b, a), abs=1e-12)

    @given(a=lattice_samples, b=lattice_samples, c=lattice_shift)
    @settings(max_examples=30, deadline=None)
    def test_translation_of_both_invariant(self, a, b, c):
        shifted = wasserstein1([x + c for x in a], [x + c for x in b])
        assert shifted == pytest.approx(wasserstein1(a, b), abs=1e-9)

    @given(c=st.floats(min_value=-10, max_value=10, allow_nan=False))
    @settings(max_examples=30, deadline=None)
    def test_point_mass_shift_is_exact(self, c):
        assert wasserstein1([2.0], [2.0 + c]) == pytest.approx(abs(c), abs=1e-12)

    def test_one_sample_shift_bounded_by_c(self, rng):
        a = rng.normal(0, 1, size=40)
        b = rng.normal(0, 1, size=50)
        base = wasserstein1(a, b)
        for c in (0.1, 1.0, 5.0):
            assert wasserstein1(a, b + c) <= base + c + 1e-12


class TestHistogramPair:
    def test_equal_width_edges(self):
        hist = build_histogram_pair([0.0, 0.4, 1.0], [0.2, 0.8], bin_count=4)
        np.testing.assert_allclose(hist.bin_edges, [0.0, 0.25, 0.5, 0.75, 1.0], atol=1e-15)

    def test_degenerate_range(self):
        with pytest.raises(DegenerateRangeError):
            build_histogram_pair([2.0, 2.0], [2.0, 2.0])

    def test_masses_sum_to_one_after_smoothing(self, rng):
        for _ in range(20):
            a = rng.normal(0, 1, size=30)
            b = rng.normal(1, 1, size=40)
            hist = build_histogram_pair(a, b)
            assert hist.p_mass.sum() == pytest.approx(1.0, abs=1e-12)
            assert hist.q_mass.sum() == pytest.approx(1.0, abs=1e-12)
            assert hist.p_mass.min() > 0
            assert hist.q_mass.min() > 0

    def test_density_is_mass_over_width(self):
        hist = build_histogram_pair([0.0, 1.0], [0.5, 1.0], bin_count=4)
        np.testing.assert_allclose(hist.p_density, hist.p_mass / 0.25, atol=1e-15)


class TestKl:
    def test_identical_is_zero(self):
        hist = build_histogram_pair([0.0, 0.5, 1.0], [0.0, 0.5, 1.0])
        assert kl_divergence(hist) == pytest.approx(0.0, abs=1e-12)

    def test_single_term_log_two(self):
        hist = HistogramPair(
            bin_edges=np.array([0.0, 0.5, 1.0]),
            p_mass=np.array([1.0, 0.0]),
            q_mass=np.array([0.5, 0.5]),
        )
        assert kl_divergence(hist) == pytest.approx(math.log(2.0), abs=1e-12)

    def test_unsmoothed_zero_gives_inf_flag(self):
        hist = HistogramPair(
            bin_edges=np.array([0.0, 0.5, 1.0]),
            p_mass=np.array([0.5, 0.5]),
            q_mass=np.array([1.0, 0.0]),
        )
        assert kl_divergence(hist) == math.inf

    def test_gibbs_inequality(self, rng):
        for _ in range(50):
            a = rng.normal(0, 1, size=25)
            b = rng.normal(rng.uniform(-1, 1), 1.5, size=35)
            hist = build_histogram_pair(a, b)
            assert kl_divergence(hist) >= 0.0


class TestBhattacharyya:
    def test_identical_mass_mode_zero(self):
        hist = build_histogram_pair([0.0, 0.5, 1.0], [0.0, 0.5, 1.0])
        assert bhattacharyya(hist, "mass") == pytest.approx(0.0, abs=1e-9)

    def test_disjoint_large_positive(self):
        hist = build_histogram_pair([0.0] * 10 + [0.1] * 10, [10.0] * 10 + [10.1] * 10)
        assert bhattacharyya(hist, "mass") > 5.0

    def test_mass_mode_nonnegative(self, rng):
        for _ in range(30):
            hist = build_histogram_pair(rng.normal(0, 1, 30), rng.normal(0.5, 2, 30))
            assert bhattacharyya(hist, "mass") >= 0.0

    def test_density_mode_shifts_by_log_width(self):
        hist = build_histogram_pair([0.0, 1.0, 2.0], [0.5, 1.5], bin_count=10)
        expected = bhattacharyya(hist, "mass") + math.log(hist.bin_width)
        assert bhattacharyya(hist, "density") == pytest.approx(expected, abs=1e-12)

    def test_bad_mode(self):
        hist = build_histogram_pair([0.0, 1.0], [0.5, 1.5])
        with pytest.raises(ValueError):
            bhattacharyya(hist, "volume")


class TestPairwiseReports:
    def test_three_devices_three_reports(self, rng):
        samples = {d: rng.normal(d, 1, size=20) for d in range(3)}
        reports = pairwise_reports(samples)
        assert len(reports) == 3
        assert {(r.device_a, r.device_b) for r in reports} == {(0, 1), (0, 2), (1, 2)}

    def test_identical_two_device_fleet(self):
        sample = [5.0, 5.5, 6.0, 6.5]
        reports = pairwise_reports({0: sample, 1: list(sample)})
        r = reports[0]
        assert r.ks == 0.0
        assert r.wasserstein == 0.0
        assert r.kl == pytest.approx(0.0, abs=1e-9)
        assert r.bhattacharyya_mass == pytest.approx(0.0, abs=1e-9)

    def test_kl_symmetrization(self, rng):
        samples = {0: rng.normal(0, 1, 30), 1: rng.normal(1, 2, 30)}
        r = pairwise_reports(samples)[0]
        assert r.kl == pytest.approx(0.5 * (r.kl_ab + r.kl_ba), rel=1e-12)

    def test_needs_two_devices(self):
        with pytest.raises(ValueError):
            pairwise_reports({0: [1.0, 2.0]})

    def test_heterogeneous_fleet_all_pairs_divergent(self):
        # planted device offsets are several times the per-device noise scale
        config = CampaignConfig(fleet_size=3, initial_sets=25, replicates=3, seed=7)
        dataset = run_initial_phase(config, SimulatorOracle(preset_heterogeneous(seed=7)))
        samples = {d: dataset.device_weights(d) for d in range(3)}
        reports = pairwise_reports(samples)
        for r in reports:
            assert vote_pair(r, ThresholdConfig()).total > 0
