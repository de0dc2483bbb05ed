import numpy as np
import pytest

from fleetbo.clustering import (
    association,
    choose_k,
    kmeans,
    normalized_mutual_information,
    silhouette_score,
)
from tests.conftest import make_features


def silhouette_brute_force(x, labels):
    """Naive per-point silhouette with explicit loops."""
    x = np.asarray(x, dtype=float)
    labels = np.asarray(labels)
    scores = []
    for i in range(len(x)):
        same = [j for j in range(len(x)) if labels[j] == labels[i] and j != i]
        if not same:
            scores.append(0.0)
            continue
        a = np.mean([np.linalg.norm(x[i] - x[j]) for j in same])
        b = min(
            np.mean([np.linalg.norm(x[i] - x[j]) for j in range(len(x)) if labels[j] == other])
            for other in set(labels.tolist())
            if other != labels[i]
        )
        scores.append((b - a) / max(a, b))
    return float(np.mean(scores))


def blob_features(rng, centers, per_blob=20, spread=0.05):
    rows = []
    for d, (mu, sigma) in enumerate(centers):
        for _ in range(per_blob):
            rows.append((d, mu + rng.normal(0, spread), abs(sigma + rng.normal(0, spread * sigma + 1e-6))))
    return make_features(rows)


class TestKmeans:
    def test_well_separated_pairs(self):
        fm = make_features(
            [(0, 0.0, 1e-4), (0, 0.01, 1e-4), (1, 10.0, 1e-4), (1, 10.01, 1e-4),
             (2, 20.0, 1e-4), (2, 20.01, 1e-4)]
        )
        result = kmeans(fm, k=3, seed=0)
        labels = result.assignments
        assert labels[0] == labels[1]
        assert labels[2] == labels[3]
        assert labels[4] == labels[5]
        assert len(set(labels.tolist())) == 3
        report = association(fm, labels)
        assert all(p == 1.0 for p in report.purity.values())

    def test_k_one(self):
        fm = make_features([(0, 1.0, 0.1), (0, 2.0, 0.2), (0, 3.0, 0.3)])
        result = kmeans(fm, k=1, seed=0)
        assert set(result.assignments.tolist()) == {0}
        np.testing.assert_allclose(result.centroids[0], fm.matrix().mean(axis=0), atol=1e-12)
        assert result.silhouette is None

    def test_k_equals_n_rows_zero_inertia(self):
        fm = make_features([(0, 1.0, 0.1), (0, 2.0, 0.4), (0, 5.0, 0.2), (0, 9.0, 0.8)])
        result = kmeans(fm, k=4, seed=0)
        assert result.inertia == pytest.approx(0.0, abs=1e-18)

    def test_k_too_large(self):
        fm = make_features([(0, 1.0, 0.1), (0, 2.0, 0.2)])
        with pytest.raises(ValueError):
            kmeans(fm, k=3)

    def test_inertia_trace_non_increasing(self, rng):
        fm = blob_features(rng, [(0.0, 0.1), (5.0, 0.3), (9.0, 0.6)], per_blob=15)
        result = kmeans(fm, k=3, seed=2, restarts=1)
        trace = result.inertia_trace
        assert all(trace[i + 1] <= trace[i] + 1e-9 for i in range(len(trace) - 1))

    def test_inertia_recomputable(self, rng):
        fm = blob_features(rng, [(0.0, 0.1), (5.0, 0.3)], per_blob=10)
        result = kmeans(fm, k=2, seed=0)
        x = result.standardization.apply(fm.matrix())
        centroids_std = np.array(
            [x[result.assignments == j].mean(axis=0) for j in range(result.k)]
        )
        recomputed = float(((x - centroids_std[result.assignments]) ** 2).sum())
        assert recomputed == pytest.approx(result.inertia, abs=1e-9)

    def test_same_seed_bit_identical(self, rng):
        fm = blob_features(rng, [(0.0, 0.1), (3.0, 0.4)], per_blob=12)
        r1 = kmeans(fm, k=2, seed=9)
        r2 = kmeans(fm, k=2, seed=9)
        assert np.array_equal(r1.assignments, r2.assignments)
        np.testing.assert_array_equal(r1.centroids, r2.centroids)
        assert r1.inertia == r2.inertia

    def test_row_permutation_equivalence(self, rng):
        fm = blob_features(rng, [(0.0, 0.1), (5.0, 0.5), (9.0, 1.0)], per_blob=10)
        perm = rng.permutation(fm.n_init)
        fm_perm = make_features(
            [(fm.rows[i].device_id, fm.rows[i].mu, fm.rows[i].sigma) for i in perm]
        )
        r1 = kmeans(fm, k=3, seed=4)
        r2 = kmeans(fm_perm, k=3, seed=4)
        c1 = np.array(sorted(r1.centroids.tolist()))
        c2 = np.array(sorted(r2.centroids.tolist()))
        np.testing.assert_allclose(c1, c2, atol=1e-9)

    def test_scaling_one_dimension_is_absorbed_by_standardization(self, rng):
        fm = blob_features(rng, [(0.0, 0.1), (5.0, 0.5)], per_blob=10)
        scaled = make_features(
            [(r.device_id, r.mu * 1000.0, r.sigma) for r in fm.rows]
        )
        r1 = kmeans(fm, k=2, seed=1)
        r2 = kmeans(scaled, k=2, seed=1)
        assert np.array_equal(r1.assignments, r2.assignments)

    def test_zero_variance_dimension_dropped(self):
        fm = make_features([(0, 5.0, 0.0), (0, 6.0, 0.0), (0, 9.0, 0.0)])
        with pytest.warns(UserWarning, match="zero-variance"):
            result = kmeans(fm, k=2, seed=0)
        assert result.k == 2


class TestSilhouette:
    def test_two_tight_clusters(self, rng):
        fm = blob_features(rng, [(0.0, 0.05), (10.0, 0.06)], per_blob=15, spread=0.01)
        result = kmeans(fm, k=2, seed=0)
        assert result.silhouette > 0.9

    def test_matches_brute_force(self, rng):
        fm = blob_features(rng, [(0.0, 0.1), (4.0, 0.4)], per_blob=8)
        labels = kmeans(fm, k=2, seed=0).assignments
        from fleetbo.clustering import _standardize

        x, _ = _standardize(fm.matrix())
        assert silhouette_score(fm, labels) == pytest.approx(
            silhouette_brute_force(x, labels), abs=1e-12
        )

    def test_random_labels_near_zero(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            fm = make_features(
                [(0, rng.normal(0, 1), abs(rng.normal(1, 0.2))) for _ in range(300)]
            )
            labels = rng.integers(0, 2, size=300)
            if len(set(labels.tolist())) < 2:
                continue
            assert abs(silhouette_score(fm, labels)) < 0.1

    def test_adversarial_interleaving_negative(self):
        fm = make_features([(0, float(i), 0.5) for i in range(40)])
        labels = [i % 2 for i in range(40)]
        assert silhouette_score(fm, labels) < 0.0

    def test_singleton_contributes_zero(self):
        fm = make_features([(0, 0.0, 0.1), (0, 0.1, 0.1), (0, 9.0, 0.1)])
        labels = [0, 0, 1]
        x, = (fm.matrix(),)
        from fleetbo.clustering import _standardize

        xs, _ = _standardize(x)
        assert silhouette_score(fm, labels) == pytest.approx(
            silhouette_brute_force(xs, labels), abs=1e-12
        )

    def test_needs_two_clusters(self):
        fm = make_features([(0, 0.0, 0.1), (0, 1.0, 0.2)])
        with pytest.raises(ValueError):
            silhouette_score(fm, [0, 0])


class TestChooseK:
    def test_three_planted_blobs(self, rng):
        fm = blob_features(rng, [(0.0, 0.05), (10.0, 0.3), (20.0, 0.9)], per_blob=20, spread=0.02)
        assert choose_k(fm, k_max=6, seed=0) == 3

    def test_single_blob_prefers_smallest_k(self):
        # a structureless blob has no silhouette gain from more clusters,
        # so the tie-toward-smaller rule lands on k=2
        rng = np.random.default_rng(7)
        fm = make_features(
            [(0, rng.normal(0, 1), abs(rng.normal(1, 0.05))) for _ in range(60)]
        )
        assert choose_k(fm, k_max=4, seed=0) == 2

    def test_bounds(self):
        fm = make_features([(0, 0.0, 0.1), (0, 1.0, 0.2), (0, 2.0, 0.3)])
        with pytest.raises(ValueError):
            choose_k(fm, k_max=1)


class TestAssociation:
    def test_perfect_match(self):
        fm = make_features([(0, 0.0, 0.1), (0, 0.1, 0.1), (1, 5.0, 0.5), (1, 5.1, 0.5)])
        report = association(fm, [0, 0, 1, 1])
        assert report.nmi == pytest.approx(1.0, abs=1e-12)
        assert report.purity == {0: 1.0, 1: 1.0}
        assert report.counts == {0: {0: 2}, 1: {1: 2}}

    def test_counts_sum_to_row_counts(self, rng):
        fm = blob_features(rng, [(0.0, 0.1), (4.0, 0.4), (8.0, 0.9)], per_blob=11)
        labels = rng.integers(0, 3, size=fm.n_init)
        report = association(fm, labels)
        for d in range(3):
            assert sum(report.counts[d].values()) == 11

    def test_independent_labels_low_nmi(self):
        rng = np.random.default_rng(0)
        devices = rng.integers(0, 3, size=3000)
        labels = rng.integers(0, 3, size=3000)
        assert normalized_mutual_information(devices, labels) < 0.1

    def test_single_cluster_zero_nmi(self):
        fm = make_features([(0, 0.0, 0.1), (1, 1.0, 0.2), (2, 2.0, 0.3)])
        report = association(fm, [0, 0, 0])
        assert report.nmi == 0.0

    def test_label_permutation_invariant(self):
        a = [0, 0, 1, 1, 2, 2]
        b = [2, 2, 0, 0, 1, 1]
        assert normalized_mutual_information(a, b) == pytest.approx(1.0, abs=1e-12)
