import json

import numpy as np
import pytest

from mixad.scoring import (
    AggregationConfig,
    ScoringError,
    aggregate,
    auroc,
    auroc_pairs,
    image_score_from_map,
    write_pgm,
)


class TestAuroc:
    def test_perfect_separation(self):
        scores = np.array([0.9, 0.8, 0.7, 0.2, 0.1])
        labels = np.array([1, 1, 1, 0, 0])
        assert auroc(scores, labels) == 1.0

    def test_all_equal_is_half(self):
        scores = np.ones(10)
        labels = np.array([1] * 4 + [0] * 6)
        assert auroc(scores, labels) == 0.5

    def test_reversed_is_zero(self):
        scores = np.array([0.1, 0.2, 0.9, 1.0])
        labels = np.array([1, 1, 0, 0])
        assert auroc(scores, labels) == 0.0

    def test_matches_brute_force_with_ties_1000_cases(self):
        # discrete scores force ties; rank formula must match pair counting
        # exactly, not approximately
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n = int(rng.integers(5, 201))
            scores = rng.integers(0, 12, size=n).astype(np.float64)
            labels = np.zeros(n, dtype=np.int64)
            labels[rng.choice(n, size=int(rng.integers(1, n)), replace=False)] = 1
            if labels.all() or not labels.any():
                continue
            assert auroc(scores, labels) == auroc_pairs(scores, labels)

    def test_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(1)
        scores = rng.normal(size=150)
        labels = (rng.random(150) < 0.4).astype(int)
        base = auroc(scores, labels)
        assert auroc(np.exp(scores), labels) == base
        assert auroc(3.0 * scores + 7.0, labels) == base

    def test_complement_identity_for_tie_free_scores(self):
        rng = np.random.default_rng(2)
        scores = rng.permutation(200).astype(np.float64)  # distinct
        labels = (rng.random(200) < 0.5).astype(int)
        if labels.all() or not labels.any():
            labels[0] = 1 - labels[0]
        assert auroc(scores, labels) + auroc(-scores, labels) == pytest.approx(1.0, abs=1e-12)

    def test_single_class_rejected(self):
        with pytest.raises(ScoringError):
            auroc(np.ones(5), np.ones(5, dtype=int))

    def test_random_labels_near_half(self):
        rng = np.random.default_rng(3)
        scores = rng.normal(size=20_000)
        labels = (rng.random(20_000) < 0.5).astype(int)
        assert abs(auroc(scores, labels) - 0.5) < 0.03


class TestAggregate:
    def stats(self):
        return {
            "patch": {"mean": 1.0, "std": 2.0},
            "global": {"mean": 0.0, "std": 1.0},
        }

    def test_single_group_is_standardized_map(self):
        m = np.arange(9, dtype=np.float64).reshape(3, 3)
        agg, score = aggregate({"patch": m}, {"patch": 0.4}, self.stats())
        np.testing.assert_allclose(agg, (m - 1.0) / 2.0)

    def test_identical_maps_any_weights(self):
        m = np.random.default_rng(0).normal(size=(4, 4))
        agg, _ = aggregate(
            {"patch": m.copy(), "global": m.copy()},
            {"patch": 0.9, "global": 0.1},
            None,
            AggregationConfig(normalize=False),
        )
        np.testing.assert_allclose(agg, m)

    def test_matches_direct_weighted_sum_oracle(self):
        rng = np.random.default_rng(1)
        maps = {"patch": rng.normal(size=(5, 5)), "component": rng.normal(size=(5, 5)),
                "global": rng.normal(size=(5, 5))}
        mass = {"patch": 0.5, "component": 0.3, "global": 0.2}
        agg, _ = aggregate(maps, mass, None, AggregationConfig(normalize=False))
        oracle = sum(mass[g] * maps[g] for g in maps) / sum(mass.values())
        np.testing.assert_allclose(agg, oracle, atol=1e-12)

    def test_weight_scale_invariance(self):
        # exact for power-of-two scalings (mantissas unchanged); any other
        # positive scale agrees to rounding
        rng = np.random.default_rng(2)
        maps = {"patch": rng.normal(size=(3, 3)), "global": rng.normal(size=(3, 3))}
        a, sa = aggregate(maps, {"patch": 0.2, "global": 0.6}, None,
                          AggregationConfig(normalize=False))
        b, sb = aggregate(maps, {"patch": 0.8, "global": 2.4}, None,
                          AggregationConfig(normalize=False))
        np.testing.assert_array_equal(a, b)
        assert sa == sb
        c, _ = aggregate(maps, {"patch": 0.2 * 7, "global": 0.6 * 7}, None,
                         AggregationConfig(normalize=False))
        np.testing.assert_allclose(a, c, rtol=1e-12)

    def test_max_weighting(self):
        maps = {"patch": np.zeros((2, 2)), "global": np.ones((2, 2))}
        agg, _ = aggregate(maps, {"patch": 1.0, "global": 0.0}, None,
                           AggregationConfig(normalize=False, weighting="max"))
        np.testing.assert_array_equal(agg, np.ones((2, 2)))

    def test_degenerate_std_excluded_from_normalization(self):
        m = np.full((2, 2), 5.0)
        stats = {"patch": {"mean": 1.0, "std": 0.0}}
        agg, _ = aggregate({"patch": m}, {"patch": 1.0}, stats)
        np.testing.assert_array_equal(agg, m)

    def test_image_stats(self):
        m = np.zeros((10, 10))
        m[0, 0] = 10.0
        assert image_score_from_map(m, AggregationConfig(image_stat="max")) == 10.0
        # top 1% of 100 values = 1 value
        assert image_score_from_map(m, AggregationConfig(image_stat="topq")) == 10.0
        cfg = AggregationConfig(image_stat="topq", top_q=0.05)
        assert image_score_from_map(m, cfg) == pytest.approx(2.0)

    def test_no_maps_rejected(self):
        with pytest.raises(ScoringError):
            aggregate({}, {}, None)

    def test_bad_knobs_rejected(self):
        with pytest.raises(ValueError):
            AggregationConfig(weighting="nope").validate()
        with pytest.raises(ValueError):
            AggregationConfig(image_stat="nope").validate()


class TestPgm:
    def test_p5_header_and_scaling(self, tmp_path):
        arr = np.array([[0.0, 0.5], [1.0, 0.25]])
        p = tmp_path / "m.pgm"
        write_pgm(p, arr)
        data = p.read_bytes()
        assert data.startswith(b"P5\n2 2\n255\n")
        pixels = np.frombuffer(data[-4:], dtype=np.uint8).reshape(2, 2)
        assert pixels[0, 0] == 0 and pixels[1, 0] == 255

    def test_constant_map(self, tmp_path):
        p = tmp_path / "m.pgm"
        write_pgm(p, np.full((3, 3), 7.0))
        pixels = np.frombuffer(p.read_bytes()[-9:], dtype=np.uint8)
        assert (pixels == 0).all()
