"""Metric correctness against hand values and brute-force oracles."""

from __future__ import annotations

import numpy as np
import pytest

from fewad.errors import InputError
from fewad.metrics import (
    MetricRow,
    aggregate,
    aupr,
    auroc,
    pro,
    report_csv,
    report_table,
)

from oracles import (
    aupr_threshold_sweep,
    auroc_pairwise,
    pro_threshold_sweep,
    random_pro_instance,
    random_scored_labels,
)


class TestAuroc:
    def test_perfect_separation(self):
        assert auroc([0.9, 0.8, 0.3, 0.1], [1, 1, 0, 0]) == 1.0

    def test_interleaved_pairs(self):
        """Pairs won: 3 of 4."""
        assert auroc([0.9, 0.8, 0.3, 0.1], [1, 0, 1, 0]) == pytest.approx(0.75)

    def test_all_ties_half(self):
        assert auroc([0.5] * 6, [1, 0, 1, 0, 0, 1]) == pytest.approx(0.5)

    def test_single_class_rejected(self):
        with pytest.raises(InputError):
            auroc([0.1, 0.2], [1, 1])

    def test_matches_pairwise_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            scores, labels = random_scored_labels(rng, int(rng.integers(4, 64)),
                                                  ties=bool(rng.integers(0, 2)))
            assert auroc(scores, labels) == pytest.approx(
                auroc_pairwise(scores, labels), abs=1e-12
            )

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(1)
        scores, labels = random_scored_labels(rng, 40, ties=False)
        base = auroc(scores, labels)
        assert auroc(np.exp(scores), labels) == pytest.approx(base, abs=1e-12)
        assert auroc(3.0 * scores + 7.0, labels) == pytest.approx(base, abs=1e-12)

    def test_negation_complement(self):
        rng = np.random.default_rng(2)
        scores = rng.permutation(np.linspace(0, 1, 30))  # tie-free
        labels = (rng.uniform(size=30) < 0.4).astype(int)
        labels[0], labels[1] = 0, 1
        assert auroc(scores, labels) + auroc(-scores, labels) == pytest.approx(1.0)


class TestAupr:
    def test_perfect_separation(self):
        assert aupr([0.9, 0.8, 0.3, 0.1], [1, 1, 0, 0]) == 1.0

    def test_all_ties_positive_fraction(self):
        assert aupr([0.4] * 8, [1, 1, 0, 0, 0, 0, 0, 0]) == pytest.approx(0.25)

    def test_four_point_case_matches_sweep(self):
        scores = [0.9, 0.8, 0.3, 0.1]
        labels = [1, 0, 1, 0]
        assert aupr(scores, labels) == pytest.approx(
            aupr_threshold_sweep(scores, labels), abs=1e-12
        )

    def test_no_positive_rejected(self):
        with pytest.raises(InputError):
            aupr([0.3, 0.4], [0, 0])

    def test_matches_sweep_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            scores, labels = random_scored_labels(rng, int(rng.integers(4, 64)),
                                                  ties=bool(rng.integers(0, 2)))
            assert aupr(scores, labels) == pytest.approx(
                aupr_threshold_sweep(scores, labels), abs=1e-12
            )


class TestPro:
    def test_map_equals_mask(self):
        mask = np.zeros((6, 6), dtype=int)
        mask[1:3, 1:3] = 1
        mask[4:6, 4:6] = 1
        assert pro([mask.astype(float)], [mask]) == pytest.approx(1.0)

    def test_inverted_map(self):
        mask = np.zeros((6, 6), dtype=int)
        mask[2:4, 2:4] = 1
        assert pro([1.0 - mask], [mask]) == pytest.approx(0.0)

    def test_two_component_toy_matches_oracle(self):
        rng = np.random.default_rng(4)
        score = rng.uniform(0, 1, (6, 6))
        mask = np.zeros((6, 6), dtype=int)
        mask[0:2, 0:2] = 1
        mask[4:6, 4:6] = 1
        assert pro([score], [mask]) == pytest.approx(
            pro_threshold_sweep([score], [mask]), abs=1e-9
        )

    def test_matches_oracle_random(self):
        rng = np.random.default_rng(5)
        for _ in range(15):
            maps, masks = random_pro_instance(rng)
            assert pro(maps, masks) == pytest.approx(
                pro_threshold_sweep(maps, masks), abs=1e-9
            )

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(6)
        maps, masks = random_pro_instance(rng)
        base = pro(maps, masks)
        squashed = [np.tanh(3 * m) for m in maps]
        assert pro(squashed, masks) == pytest.approx(base, abs=1e-12)

    def test_no_region_rejected(self):
        with pytest.raises(InputError):
            pro([np.ones((4, 4))], [np.zeros((4, 4), dtype=int)])

    def test_diagonal_touch_is_one_component(self):
        """8-connectivity: diagonal neighbours join into one region."""
        mask = np.zeros((4, 4), dtype=int)
        mask[0, 0] = 1
        mask[1, 1] = 1
        score = np.zeros((4, 4))
        score[0, 0] = 1.0  # half the component recovered at the top threshold
        value = pro([score], [mask])
        oracle = pro_threshold_sweep([score], [mask])
        assert value == pytest.approx(oracle, abs=1e-12)


class TestAggregate:
    def rows(self):
        return [
            MetricRow("bottle", 0, image_auroc=0.94, image_aupr=0.97,
                      pixel_auroc=0.95, pixel_pro=0.90),
            MetricRow("bottle", 1, image_auroc=0.96, image_aupr=0.99,
                      pixel_auroc=0.97, pixel_pro=0.92),
        ]

    def test_two_seed_mean_std(self):
        """{0.94, 0.96}: mean 0.95, sample std sqrt(2)/100."""
        report = aggregate(self.rows())
        stat = report.categories[0].stats["image_auroc"]
        assert stat.mean == pytest.approx(0.95)
        assert stat.std == pytest.approx(np.sqrt(2) / 100, abs=1e-12)

    def test_single_seed_no_std(self):
        report = aggregate(self.rows()[:1])
        assert report.categories[0].stats["image_auroc"].std is None

    def test_identical_seeds_zero_std(self):
        rows = [
            MetricRow("a", s, image_auroc=0.9, image_aupr=0.9) for s in range(3)
        ]
        report = aggregate(rows)
        assert report.categories[0].stats["image_auroc"].std == pytest.approx(0.0)

    def test_dataset_mean_unweighted(self):
        rows = self.rows() + [
            MetricRow("cable", 0, image_auroc=0.80, image_aupr=0.81)
        ]
        report = aggregate(rows)
        assert report.dataset_mean["image_auroc"] == pytest.approx((0.95 + 0.80) / 2)
        # cable has no pixel metrics; mean covers categories that do
        assert report.dataset_mean["pixel_auroc"] == pytest.approx(0.96)

    def test_report_rendering(self):
        report = aggregate(self.rows())
        csv_text = report_csv(report)
        assert csv_text.splitlines()[0] == "category,seed,image_auroc,image_aupr,pixel_auroc,pixel_pro"
        assert len(csv_text.splitlines()) == 3
        table = report_table(report)
        assert "bottle" in table
        assert "mean" in table.splitlines()[-1]
        assert "95.0 +- 1.4" in table
