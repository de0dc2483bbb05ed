import math

import numpy as np
import pytest

from fleetbo.campaign import CampaignConfig, run_initial_phase
from fleetbo.noise import (
    DegenerateSampleError,
    EmptyFeatureError,
    box_summaries,
    kde,
    run_features,
    scott_bandwidth,
)
from fleetbo.simulator import SimulatorOracle, preset_heterogeneous
from tests.conftest import make_dataset, make_features


class TestRunFeatures:
    def test_constant_group(self):
        ds = make_dataset([(0, 3000, 0.4, "simultaneous", [10.0, 10.0, 10.0])])
        fm = run_features(ds)
        row = fm.rows[0]
        assert (row.mu, row.sigma, row.var) == (10.0, 0.0, 0.0)
        assert row.count == 3

    def test_two_point_group(self):
        ds = make_dataset([(0, 3000, 0.4, "simultaneous", [9.0, 11.0])])
        row = run_features(ds).rows[0]
        assert row.mu == 10.0
        assert row.sigma == pytest.approx(math.sqrt(2.0), abs=1e-12)
        assert row.var == pytest.approx(2.0, abs=1e-12)

    def test_initial_design_counting(self):
        # 25 sets x 3 devices x 3 replicates -> 75 replicate groups
        config = CampaignConfig(fleet_size=3, initial_sets=25, replicates=3, seed=5)
        dataset = run_initial_phase(config, SimulatorOracle(preset_heterogeneous(seed=5)))
        assert len(dataset) == 225
        fm = run_features(dataset)
        assert fm.n_init == 75

    def test_small_groups_skipped_with_warning(self):
        ds = make_dataset(
            [
                (0, 3000, 0.4, "simultaneous", [6.0, 6.1]),
                (1, 2000, 0.3, "simultaneous", [5.9]),
            ]
        )
        with pytest.warns(UserWarning, match="fewer than 2"):
            fm = run_features(ds)
        assert fm.n_init == 1

    def test_no_groups_is_an_error(self):
        ds = make_dataset([(0, 3000, 0.4, "simultaneous", [6.0])])
        with pytest.warns(UserWarning):
            with pytest.raises(EmptyFeatureError):
                run_features(ds)

    def test_var_is_sigma_squared(self, rng):
        weights = rng.normal(6.0, 0.2, size=9).tolist()
        ds = make_dataset([(0, 3000, 0.4, "sequential", weights)])
        row = run_features(ds).rows[0]
        assert row.var == pytest.approx(row.sigma**2, rel=1e-15)

    def test_shift_moves_mu_only(self, rng):
        weights = rng.normal(6.0, 0.2, size=5)
        shifted = weights + 2.5
        row = run_features(make_dataset([(0, 3000, 0.4, "simultaneous", weights.tolist())])).rows[0]
        row2 = run_features(make_dataset([(0, 3000, 0.4, "simultaneous", shifted.tolist())])).rows[0]
        assert row2.mu == pytest.approx(row.mu + 2.5, rel=1e-12)
        assert row2.sigma == pytest.approx(row.sigma, rel=1e-9)
        assert row2.var == pytest.approx(row.var, rel=1e-9)

    def test_modes_grouped_separately(self):
        ds = make_dataset(
            [
                (0, 3000, 0.4, "simultaneous", [6.0, 6.1]),
                (0, 3000, 0.4, "sequential", [6.3, 6.6]),
            ]
        )
        assert run_features(ds).n_init == 2


class TestKde:
    def test_symmetric_sample_gives_symmetric_density(self):
        sample = [-1.0, -0.5, -0.001, 0.001, 0.5, 1.0]
        summary = kde(sample)
        grid = np.array(summary.grid)
        dens = np.array(summary.density)
        assert grid[0] == pytest.approx(-grid[-1], abs=1e-12)
        np.testing.assert_allclose(dens, dens[::-1], atol=1e-9)

    def test_standard_normal_peak(self):
        rng = np.random.default_rng(42)
        sample = rng.standard_normal(10_000)
        summary = kde(sample)
        grid = np.array(summary.grid)
        at_zero = np.array(summary.density)[np.abs(grid).argmin()]
        assert at_zero == pytest.approx(1.0 / math.sqrt(2 * math.pi), abs=0.05)

    def test_integral_is_one(self, rng):
        sample = rng.normal(6.0, 0.3, size=50)
        summary = kde(sample)
        integral = np.trapezoid(summary.density, summary.grid)
        assert 0.99 <= integral <= 1.01
        assert min(summary.density) >= 0.0

    def test_constant_sample_degenerate(self):
        with pytest.raises(DegenerateSampleError):
            kde([5.0, 5.0, 5.0])

    def test_scott_rule(self):
        sample = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
        expected = sample.std(ddof=1) * 5 ** (-0.2)
        assert scott_bandwidth(sample) == pytest.approx(expected, rel=1e-12)
        assert kde(sample).bandwidth == pytest.approx(expected, rel=1e-12)

    def test_unknown_rule(self):
        with pytest.raises(ValueError, match="bandwidth rule"):
            kde([1.0, 2.0], bandwidth_rule="magic")


class TestBoxSummaries:
    def test_odd_count_quartiles(self):
        fm = make_features([(0, 6.0, s) for s in (1.0, 2.0, 3.0, 4.0, 5.0)])
        summary = box_summaries(fm)[0]
        assert (summary.min, summary.q1, summary.median, summary.q3, summary.max) == (
            1.0, 2.0, 3.0, 4.0, 5.0,
        )

    def test_single_value(self):
        fm = make_features([(0, 6.0, 2.0)])
        s = box_summaries(fm)[0]
        assert s.min == s.q1 == s.median == s.q3 == s.max == 2.0

    def test_order_invariant(self):
        fm = make_features([(0, 6.0, s) for s in (0.1, 0.4, 0.2, 0.9)])
        s = box_summaries(fm)[0]
        assert s.min <= s.q1 <= s.median <= s.q3 <= s.max

    def test_noisiest_device_has_largest_median_sigma(self):
        # heterogeneous preset: device 2 is configured noisiest
        config = CampaignConfig(fleet_size=3, initial_sets=25, replicates=3, seed=3)
        dataset = run_initial_phase(config, SimulatorOracle(preset_heterogeneous(seed=3)))
        summaries = box_summaries(run_features(dataset))
        medians = {s.device_id: s.median for s in summaries}
        assert medians[2] == max(medians.values())
        assert medians[0] == min(medians.values())
