import numpy as np
import pytest

from mixad.components import (
    ComponentKB,
    ComponentKBError,
    ComponentMasks,
    assign_masks,
    kmeans_fit,
    masked_avg_pool,
    scatter_component_scores,
)


class TestKMeans:
    def test_identical_points_single_cluster(self):
        pts = np.tile([2.0, -1.0], (20, 1))
        res = kmeans_fit(pts, 1, seed=0)
        np.testing.assert_allclose(res.centroids[0], [2.0, -1.0])
        assert res.inertia == pytest.approx(0.0, abs=1e-12)

    def test_two_blob_analytic_recovery(self):
        # well-separated blobs: centroids must equal the sample means to 1e-6
        rng = np.random.default_rng(1)
        a = rng.normal(0.0, 0.05, size=(60, 3)) + np.array([10.0, 0.0, 0.0])
        b = rng.normal(0.0, 0.05, size=(40, 3)) + np.array([-10.0, 5.0, 0.0])
        pts = np.concatenate([a, b])
        res = kmeans_fit(pts, 2, seed=3)
        means = sorted([a.mean(axis=0), b.mean(axis=0)], key=lambda m: m[0])
        got = sorted(res.centroids, key=lambda m: m[0])
        for g, m in zip(got, means):
            np.testing.assert_allclose(g, m, atol=1e-6)

    def test_k_equals_m_zero_inertia(self):
        rng = np.random.default_rng(2)
        pts = rng.normal(size=(6, 4))
        res = kmeans_fit(pts, 6, seed=0)
        assert res.inertia == pytest.approx(0.0, abs=1e-9)

    def test_inertia_monotone_history(self):
        rng = np.random.default_rng(3)
        pts = rng.normal(size=(300, 5)) * np.array([3, 1, 1, 1, 1])
        res = kmeans_fit(pts, 7, seed=5)
        hist = res.inertia_history
        assert len(hist) >= 1
        for earlier, later in zip(hist, hist[1:]):
            assert later <= earlier + 1e-9 * max(1.0, earlier)

    def test_too_few_points_rejected(self):
        with pytest.raises(ComponentKBError):
            kmeans_fit(np.zeros((2, 3)), 4, seed=0)

    def test_deterministic_under_seed(self):
        rng = np.random.default_rng(4)
        pts = rng.normal(size=(120, 4))
        a = kmeans_fit(pts, 5, seed=9)
        b = kmeans_fit(pts, 5, seed=9)
        np.testing.assert_array_equal(a.centroids, b.centroids)


class TestAssignMasks:
    def make_kb(self, centroids):
        kb = ComponentKB(clusters_per_class=len(centroids))
        kb.centroids["c"] = np.asarray(centroids, dtype=np.float64)
        return kb

    def test_points_at_centroids(self):
        kb = self.make_kb([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [10.0, 10.0]])
        feats = kb.centroids["c"].copy()
        masks = assign_masks(feats, kb, "c", 2, 2)
        np.testing.assert_array_equal(masks.assignment, [[0, 1], [2, 3]])

    def test_single_centroid_all_zero(self):
        kb = self.make_kb([[1.0, 1.0]])
        rng = np.random.default_rng(0)
        masks = assign_masks(rng.normal(size=(9, 2)), kb, "c", 3, 3)
        assert (masks.assignment == 0).all()

    def test_tie_breaks_to_lowest_index(self):
        kb = self.make_kb([[0.0, 0.0], [2.0, 0.0]])
        feats = np.array([[1.0, 0.0]] * 4)  # exactly equidistant
        masks = assign_masks(feats, kb, "c", 2, 2)
        assert (masks.assignment == 0).all()

    def test_matches_brute_force_scan(self):
        rng = np.random.default_rng(7)
        kb = self.make_kb(rng.normal(size=(6, 5)))
        feats = rng.normal(size=(48, 5))
        masks = assign_masks(feats, kb, "c", 6, 8)
        brute = np.array([
            int(np.argmin([((f - c) ** 2).sum() for c in kb.centroids["c"]]))
            for f in feats
        ])
        np.testing.assert_array_equal(masks.flat(), brute)

    def test_unknown_class_rejected(self):
        kb = self.make_kb([[0.0, 0.0]])
        with pytest.raises(ComponentKBError):
            assign_masks(np.zeros((4, 2)), kb, "nope", 2, 2)


class TestPoolingAndScatter:
    def test_constant_map_pools_to_constant(self):
        masks = ComponentMasks(assignment=np.array([[0, 1], [1, 0]]), n_components=2)
        feats = np.full((4, 3), 2.5)
        pooled = masked_avg_pool(feats, masks)
        for k in (0, 1):
            np.testing.assert_allclose(pooled[k], [2.5, 2.5, 2.5])

    def test_singleton_component_is_that_patch(self):
        masks = ComponentMasks(assignment=np.array([[0, 1], [1, 1]]), n_components=2)
        feats = np.arange(12, dtype=np.float64).reshape(4, 3)
        pooled = masked_avg_pool(feats, masks)
        np.testing.assert_array_equal(pooled[0], feats[0])

    def test_two_patch_mean(self):
        masks = ComponentMasks(assignment=np.array([[0, 0], [1, 1]]), n_components=2)
        feats = np.array([[1.0, 3.0], [3.0, 5.0], [0.0, 0.0], [2.0, 2.0]])
        pooled = masked_avg_pool(feats, masks)
        np.testing.assert_allclose(pooled[0], [2.0, 4.0])

    def test_empty_component_omitted(self):
        masks = ComponentMasks(assignment=np.zeros((2, 2), dtype=int), n_components=3)
        pooled = masked_avg_pool(np.ones((4, 2)), masks)
        assert set(pooled) == {0}

    def test_scatter_single_component_uniform(self):
        masks = ComponentMasks(assignment=np.zeros((3, 3), dtype=int), n_components=1)
        out = scatter_component_scores({0: 0.7}, masks)
        np.testing.assert_allclose(out, np.full((3, 3), 0.7))

    def test_scatter_two_components_is_indicator(self):
        assign = np.array([[0, 1], [1, 0]])
        masks = ComponentMasks(assignment=assign, n_components=2)
        out = scatter_component_scores({0: 0.0, 1: 1.0}, masks)
        np.testing.assert_array_equal(out, assign)

    def test_scatter_matches_per_pixel_lookup_oracle(self):
        rng = np.random.default_rng(3)
        assign = rng.integers(0, 5, size=(6, 7))
        masks = ComponentMasks(assignment=assign, n_components=5)
        scores = {k: float(rng.normal()) for k in range(5)}
        out = scatter_component_scores(scores, masks)
        oracle = np.array([[scores[int(assign[i, j])] for j in range(7)] for i in range(6)])
        np.testing.assert_array_equal(out, oracle)

    def test_missing_score_rejected(self):
        masks = ComponentMasks(assignment=np.array([[0, 1]]), n_components=2)
        with pytest.raises(ComponentKBError):
            scatter_component_scores({0: 1.0}, masks)

    def test_pool_then_scatter_reconstructs_piecewise_means(self):
        rng = np.random.default_rng(8)
        assign = rng.integers(0, 4, size=(5, 5))
        masks = ComponentMasks(assignment=assign, n_components=4)
        feats = rng.normal(size=(25, 6))
        pooled = masked_avg_pool(feats, masks)
        for d in range(6):
            out = scatter_component_scores({k: v[d] for k, v in pooled.items()}, masks)
            for k, v in pooled.items():
                sel = assign == k
                np.testing.assert_allclose(out[sel], v[d])


class TestKBFit:
    def test_fit_assign_consistent_inertia(self):
        rng = np.random.default_rng(5)
        pts = rng.normal(size=(200, 4))
        kb = ComponentKB(clusters_per_class=4)
        kb.fit_class("c", pts, seed=2)
        res = kmeans_fit(pts, 4, seed=2)
        # the kb stores exactly the fit's centroids and reported inertia
        np.testing.assert_array_equal(kb.centroids["c"], res.centroids)
        assert kb.fit_stats["c"]["inertia"] == pytest.approx(res.inertia)

    def test_subsampling_is_seeded(self):
        rng = np.random.default_rng(6)
        pts = rng.normal(size=(500, 3))
        import mixad.components as comp

        old = comp.MAX_KB_POINTS
        comp.MAX_KB_POINTS = 100
        try:
            kb1 = ComponentKB(clusters_per_class=3)
            kb1.fit_class("c", pts, seed=4)
            kb2 = ComponentKB(clusters_per_class=3)
            kb2.fit_class("c", pts, seed=4)
            np.testing.assert_array_equal(kb1.centroids["c"], kb2.centroids["c"])
            assert kb1.fit_stats["c"]["n_points"] == 100
        finally:
            comp.MAX_KB_POINTS = old
