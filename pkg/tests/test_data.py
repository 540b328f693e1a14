"""Dataset generator determinism and metric behavior."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from getam.data import (
    generate_dataset,
    load_dataset,
    miou,
    pseudo_quality_report,
    save_dataset,
)

RNG = np.random.default_rng(17)


class TestGenerator:
    def test_determinism_bitwise(self):
        a = generate_dataset(20, 3, seed=5, nonsalient_fraction=0.3)
        b = generate_dataset(20, 3, seed=5, nonsalient_fraction=0.3)
        for sa, sb in zip(a, b):
            assert np.array_equal(sa.image, sb.image)
            assert np.array_equal(sa.gt_mask, sb.gt_mask)
            assert np.array_equal(sa.saliency, sb.saliency)
            assert sa.labels == sb.labels

    def test_zero_nonsalient_fraction_saliency_covers_everything(self):
        for s in generate_dataset(15, 3, seed=2, nonsalient_fraction=0.0):
            np.testing.assert_array_equal(s.saliency, (s.gt_mask > 0).astype(int))

    def test_class_balance(self):
        samples = generate_dataset(200, 3, seed=0)
        counts = {c: sum(1 for s in samples if c in s.labels) for c in (1, 2, 3)}
        assert all(v >= 20 for v in counts.values())

    def test_every_image_has_a_salient_shape(self):
        for s in generate_dataset(30, 3, seed=9, nonsalient_fraction=0.5):
            assert s.saliency.sum() > 0

    def test_saliency_subset_of_foreground(self):
        for s in generate_dataset(30, 3, seed=4, nonsalient_fraction=0.5):
            assert np.all(s.gt_mask[s.saliency == 1] > 0)

    def test_labels_match_mask(self):
        for s in generate_dataset(25, 3, seed=3, nonsalient_fraction=0.4):
            assert s.labels == {int(c) for c in np.unique(s.gt_mask) if c}

    def test_withheld_objects_tracked(self):
        samples = generate_dataset(40, 3, seed=1, nonsalient_fraction=0.5)
        n_withheld = sum(1 for s in samples if s.withheld_classes)
        assert n_withheld == 20
        for s in samples:
            for c in s.withheld_classes:
                region = np.zeros_like(s.gt_mask, dtype=bool)
                for inst in s.spec.shapes:
                    if inst.class_id == c and not inst.salient:
                        region |= s.gt_mask == c
                assert np.all(s.saliency[region] == 0)

    def test_unsupported_class_count(self):
        with pytest.raises(ValueError):
            generate_dataset(5, 4, seed=0)
        with pytest.raises(ValueError):
            generate_dataset(0, 2, seed=0)


class TestDatasetRoundtrip:
    def test_save_load(self, tmp_path):
        samples = generate_dataset(6, 3, seed=8, nonsalient_fraction=0.3)
        save_dataset(samples, tmp_path)
        loaded = load_dataset(tmp_path)
        assert [s.image_id for s in loaded] == [s.image_id for s in samples]
        for orig, back in zip(samples, loaded):
            assert back.labels == orig.labels
            np.testing.assert_array_equal(back.gt_mask, orig.gt_mask)
            np.testing.assert_array_equal(back.saliency, orig.saliency)
            assert np.abs(back.image - orig.image).max() <= 0.5 / 255 + 1e-12

    def test_missing_index_reported_with_path(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="labels.csv"):
            load_dataset(tmp_path)


class TestMiou:
    def test_perfect_prediction(self):
        gt = RNG.integers(0, 4, size=(6, 6))
        report = miou(gt, gt, 4)
        assert report.mean == 1.0

    def test_all_unknown_is_undefined(self):
        gt = RNG.integers(0, 3, size=(4, 4))
        report = miou(np.full((4, 4), 255), gt, 3)
        assert report.mean == 0.0 and not report.defined

    def test_half_coverage_hand_count(self):
        gt = np.zeros((4, 4), int)
        gt[0] = 1  # four pixels of class 1
        pred = np.zeros((4, 4), int)
        pred[0, :2] = 1  # two of them
        report = miou(pred, gt, 2)
        assert report.per_class[1] == 0.5

    def test_unknown_addition_never_changes_intersections(self):
        gt = RNG.integers(0, 3, size=(8, 8))
        pred = RNG.integers(0, 3, size=(8, 8))
        base = miou(pred, gt, 3)
        noisy = pred.copy()
        noisy[RNG.random((8, 8)) < 0.3] = 255
        out = miou(noisy, gt, 3)
        for k, iou in out.per_class.items():
            pk = (noisy == k) & (noisy != 255)
            gk = (gt == k) & (noisy != 255)
            assert iou == (pk & gk).sum() / (pk | gk).sum()

    def test_strict_mode_penalizes_unknown(self):
        gt = np.ones((4, 4), int)
        pred = np.ones((4, 4), int)
        pred[0, 0] = 255
        assert miou(pred, gt, 2).mean == 1.0
        strict = miou(pred, gt, 2, count_unknown_as_error=True)
        assert strict.per_class[1] == 15 / 16

    def test_absent_classes_excluded(self):
        gt = np.zeros((4, 4), int)
        pred = np.zeros((4, 4), int)
        report = miou(pred, gt, 5)
        assert set(report.per_class) == {0}

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            miou(np.zeros((2, 2)), np.zeros((3, 3)), 2)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10 ** 6))
    def test_bounded(self, seed):
        rng = np.random.default_rng(seed)
        gt = rng.integers(0, 3, size=(5, 5))
        pred = rng.integers(0, 3, size=(5, 5))
        report = miou(pred, gt, 3)
        assert all(0.0 <= v <= 1.0 for v in report.per_class.values())


class TestQualityReport:
    def test_gt_with_random_unknown(self):
        gt = RNG.integers(0, 3, size=(10, 10))
        pseudo = gt.copy()
        drop = RNG.random((10, 10)) < 0.1
        pseudo[drop] = 255
        rep = pseudo_quality_report(pseudo, gt, 3)
        assert rep.miou.mean == 1.0
        assert rep.unknown_fraction == drop.mean()

    def test_all_background_pseudo_has_zero_recall(self):
        gt = np.zeros((6, 6), int)
        gt[2:4, 2:4] = 1
        rep = pseudo_quality_report(np.zeros((6, 6), int), gt, 2)
        assert rep.recall[1] == 0.0

    def test_matching_background_only(self):
        gt = np.zeros((4, 4), int)
        rep = pseudo_quality_report(np.zeros((4, 4), int), gt, 2)
        assert rep.miou.per_class[0] == 1.0
