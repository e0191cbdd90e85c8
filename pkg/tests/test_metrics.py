import itertools
import math
from fractions import Fraction
from xml.etree import ElementTree

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tvseg import metrics as M
from tvseg.errors import DimensionError, NotComputable

import oracles

confusions = st.builds(M.Confusion, *[st.integers(0, 10**6)] * 4)


def assert_matches_oracle(pred, gt):
    c = M.confusion(pred, gt)
    assert (c.tp, c.fp, c.fn, c.tn) == oracles.confusion_naive(pred, gt)
    ref = oracles.metrics_naive(pred, gt)
    got = {
        "precision": M.precision(c, exact=True),
        "recall": M.recall(c, exact=True),
        "dice": M.dice(c, exact=True),
        "iou_foreground": M.iou(c, "foreground", exact=True),
        "iou_background": M.iou(c, "background", exact=True),
        "miou": M.miou(c, exact=True),
    }
    assert got == ref


class TestBinarize:
    def test_zero_threshold_all_ones(self):
        assert M.binarize(np.random.default_rng(0).random((5, 5)), 0.0).all()

    def test_one_keeps_exact_ones(self):
        p = np.array([0.2, 1.0, 0.999999, 1.0])
        np.testing.assert_array_equal(M.binarize(p, 1.0), [False, True, False, True])

    def test_ge_semantics(self):
        assert M.binarize(np.array([0.3]), 0.3)[0]

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            M.binarize(np.zeros(2), 1.5)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31), st.floats(0, 1), st.floats(0, 1))
    def test_monotone(self, seed, a, b):
        p = np.random.default_rng(seed).random((6, 6))
        lo, hi = min(a, b), max(a, b)
        assert M.binarize(p, hi).sum() <= M.binarize(p, lo).sum()


class TestConfusion:
    def test_equal_masks(self):
        m = np.random.default_rng(0).random((6, 6)) > 0.5
        c = M.confusion(m, m)
        assert c.fp == c.fn == 0 and c.tp == m.sum()

    def test_all_ones_vs_zeros(self):
        c = M.confusion(np.ones((10, 10)), np.zeros((10, 10)))
        assert c == M.Confusion(tp=0, fp=100, fn=0, tn=0)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            M.confusion(np.zeros((2, 2)), np.zeros((2, 3)))

    def test_all_2x2_pairs(self):
        masks = [np.array(bits).reshape(2, 2) for bits in itertools.product([0, 1], repeat=4)]
        for a, b in itertools.product(masks, masks):
            assert_matches_oracle(a, b)

    @pytest.mark.parametrize("seed", range(200))
    def test_random_16x16(self, seed):
        rng = np.random.default_rng(seed)
        density = rng.choice([0.0, 0.05, 0.5, 0.95])
        assert_matches_oracle(rng.random((16, 16)) < density, rng.random((16, 16)) < density)

    @settings(max_examples=200, deadline=None)
    @given(confusions)
    def test_total(self, c):
        assert c.total == c.tp + c.fp + c.fn + c.tn


class TestScores:
    def test_precision_example(self):
        assert M.precision(M.Confusion(tp=3, fp=1)) == 0.75

    def test_both_empty(self):
        c = M.confusion(np.zeros((4, 4)), np.zeros((4, 4)))
        assert M.iou(c) == M.dice(c) == M.precision(c) == M.recall(c) == M.miou(c) == 1.0

    def test_missed_foreground(self):
        assert M.precision(M.Confusion(fn=3, tn=1)) == 0.0
        assert M.recall(M.Confusion(fp=3, tn=1)) == 0.0

    def test_miou_all_background_prediction(self):
        gt = np.zeros((10, 10), bool)
        gt[:3, :3] = True
        c = M.confusion(np.zeros_like(gt), gt)
        assert M.miou(c) == pytest.approx((0 + (100 - 9) / 100) / 2)

    def test_perfect_miou(self):
        m = np.eye(5, dtype=bool)
        assert M.miou(M.confusion(m, m)) == 1.0

    @settings(max_examples=500, deadline=None)
    @given(confusions)
    def test_dice_iou_identity_exact(self, c):
        i = M.iou(c, exact=True)
        assert M.dice(c, exact=True) == 2 * i / (1 + i)
        assert abs(M.dice(c) - 2 * M.iou(c) / (1 + M.iou(c))) < 1e-12

    @settings(max_examples=200, deadline=None)
    @given(confusions)
    def test_range(self, c):
        s = M.summary(c)
        assert all(0.0 <= v <= 1.0 for v in s.values())
        assert s["miou"] == (s["iou_foreground"] + s["iou_background"]) / 2

    def test_bad_class(self):
        with pytest.raises(ValueError):
            M.iou(M.Confusion(), "lesion")


class TestRecallCI:
    def test_identical(self):
        assert M.recall_ci([0.7, 0.7, 0.7]) == 0.0

    def test_two_values(self):
        # 1.96 * std([0.8, 1.0], ddof=1) / sqrt(2)
        hand = 1.96 * (math.sqrt(0.02) / math.sqrt(2))
        assert M.recall_ci([0.8, 1.0]) == pytest.approx(hand, abs=2e-4)
        assert M.recall_ci([0.8, 1.0]) == pytest.approx(0.196, abs=1e-3)

    def test_inverse_sqrt_n(self):
        base = [0.2, 0.9, 0.5, 0.7]
        a = M.recall_ci(base * 4)
        b = M.recall_ci(base * 16)
        s4, s16 = np.std(base * 4, ddof=1), np.std(base * 16, ddof=1)
        assert b / a == pytest.approx((s16 / s4) * math.sqrt(16 / 64), rel=1e-12)

    def test_too_few(self):
        with pytest.raises(NotComputable):
            M.recall_ci([0.9])


class TestSweep:
    def test_perfect_probs(self):
        gt = np.zeros((8, 8), bool)
        gt[2:5, 3:7] = True
        for r in M.threshold_sweep([gt.astype(float)], [gt], [0.05, 0.3, 0.5, 0.95]):
            assert r.dice == 1.0

    def test_default_grid(self):
        rng = np.random.default_rng(0)
        probs = [rng.random((8, 8)) for _ in range(3)]
        gts = [rng.random((8, 8)) > 0.6 for _ in range(3)]
        reports = M.threshold_sweep(probs, gts)
        assert [r.threshold for r in reports] == [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]
        recalls = [r.recall for r in reports]
        assert all(b <= a for a, b in zip(recalls, recalls[1:]))

    @pytest.mark.parametrize("seed", range(10))
    def test_naive_recompute(self, seed):
        rng = np.random.default_rng(seed)
        probs = [rng.random((6, 6)) for _ in range(4)]
        gts = [rng.random((6, 6)) > 0.5 for _ in range(4)]
        for r in M.threshold_sweep(probs, gts, [0.25, 0.5]):
            counts = np.sum([oracles.confusion_naive(p >= r.threshold, g) for p, g in zip(probs, gts)], axis=0)
            tp, fp, fn, tn = (int(v) for v in counts)
            assert r.confusion == M.Confusion(tp, fp, fn, tn)
            assert r.recall == tp / (tp + fn)
            assert r.precision == tp / (tp + fp)
            assert r.dice == 2 * tp / (2 * tp + fp + fn)
            assert r.miou == pytest.approx((tp / (tp + fp + fn) + tn / (tn + fp + fn)) / 2, abs=1e-15)
            per = [oracles.metrics_naive(p >= r.threshold, g) for p, g in zip(probs, gts)]
            assert [m["recall"] for m in r.per_image] == [float(m["recall"]) for m in per]
            valid = [float(m["recall"]) for m, g in zip(per, gts) if g.any()]
            assert r.recall_ci_halfwidth == pytest.approx(M.recall_ci(valid))

    def test_empty_thresholds(self):
        assert M.threshold_sweep([np.zeros((2, 2))], [np.zeros((2, 2))], []) == []

    def test_ci_missing_without_foreground(self):
        (r,) = M.threshold_sweep([np.zeros((2, 2))], [np.zeros((2, 2))], [0.5])
        assert r.recall_ci_halfwidth is None

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            M.threshold_sweep([np.zeros((2, 2))], [], [0.5])


class TestPRCurve:
    def test_perfect_separation(self):
        gt = np.zeros((4, 4), bool)
        gt[0] = True
        probs = np.where(gt, 0.9, 0.1) + np.random.default_rng(0).random((4, 4)) * 0.05
        assert M.average_precision(M.pr_curve([probs], [gt])) == 1.0

    def test_constant_probabilities(self):
        gt = np.zeros((5, 5), bool)
        gt[:2, :3] = True
        curve = M.pr_curve([np.full((5, 5), 0.4)], [gt])
        assert len(curve) == 1
        assert curve.precision[0] == pytest.approx(6 / 25)
        assert M.average_precision(curve) == pytest.approx(6 / 25)

    @pytest.mark.parametrize("seed", range(100))
    def test_exhaustive_oracle(self, seed):
        rng = np.random.default_rng(seed)
        h, w = rng.integers(1, 9, size=2)
        levels = rng.integers(1, 17)
        probs = rng.integers(0, levels, size=(h, w)) / max(levels - 1, 1)
        gt = rng.random((h, w)) < 0.4
        gt.flat[0] = True
        curve = M.pr_curve([probs], [gt])
        ap, points = oracles.average_precision_exhaustive(probs, gt)
        assert len(curve) == len(np.unique(probs))
        np.testing.assert_allclose(np.c_[curve.recall, curve.precision], points, atol=1e-15)
        assert M.average_precision(curve) == pytest.approx(ap, abs=1e-12)
        assert 0.0 <= M.average_precision(curve) <= 1.0

    def test_pooled_across_images(self):
        rng = np.random.default_rng(1)
        probs = [rng.random((3, 3)), rng.random((3, 3))]
        gts = [rng.random((3, 3)) > 0.5 for _ in range(2)]
        gts[0][0, 0] = True
        pooled = M.pr_curve([np.concatenate(probs)], [np.concatenate(gts)])
        split = M.pr_curve(probs, gts)
        np.testing.assert_array_equal(pooled.recall, split.recall)

    def test_no_foreground(self):
        with pytest.raises(NotComputable):
            M.pr_curve([np.full((2, 2), 0.5)], [np.zeros((2, 2))])

    def test_matched_recall(self):
        gt = np.array([1, 1, 1, 1, 0, 0], bool)
        probs = np.array([0.9, 0.8, 0.7, 0.2, 0.75, 0.1])
        curve = M.pr_curve([probs], [gt])
        assert M.matched_recall_threshold(curve, 0.5) == (0.8, 0.5)
        assert M.matched_recall_threshold(curve, 1.0) == (0.2, 1.0)
        assert M.matched_recall_threshold(curve, 0.6, tolerance=0.02) is None

    def test_matched_threshold_monotone(self):
        rng = np.random.default_rng(3)
        gt = rng.random((20, 20)) < 0.3
        probs = np.clip(gt * 0.4 + rng.random((20, 20)) * 0.6, 0, 1)
        curve = M.pr_curve([probs], [gt])
        thr = [M.matched_recall_threshold(curve, t, tolerance=1.0)[0] for t in (0.85, 0.91, 0.945, 0.975)]
        assert all(b <= a for a, b in zip(thr, thr[1:]))


class TestComponents:
    def test_empty(self):
        assert M.connected_components(np.zeros((4, 4))) == (0, [])

    def test_diagonal_pixels(self):
        assert M.connected_components(np.eye(2)) == (2, [1, 1])

    def test_u_shape_is_one(self):
        m = np.array([[1, 0, 1], [1, 0, 1], [1, 1, 1]])
        assert M.connected_components(m) == (1, [7])

    @pytest.mark.parametrize("seed", range(50))
    def test_union_find_oracle(self, seed):
        rng = np.random.default_rng(seed)
        m = rng.random(tuple(rng.integers(1, 20, size=2))) < rng.uniform(0.2, 0.7)
        assert M.connected_components(m) == oracles.union_find_components(m)

    def test_discovery_order(self):
        m = np.array([[0, 0, 1], [1, 0, 0], [1, 0, 0]])
        labels, count = M.label_components(m)
        assert count == 2 and labels[0, 2] == 1 and labels[1, 0] == 2


class TestWriters:
    def test_fmt(self):
        assert M.fmt(0.5) == "0.500000" and M.fmt(None) == "nan" and M.fmt(1) == "1.000000"

    def test_sweep_csv(self):
        gt = np.zeros((4, 4), bool)
        gt[1:3, 1:3] = True
        text = M.sweep_csv(M.threshold_sweep([gt * 0.8], [gt], [0.3]))
        assert text == "threshold,recall,recall_ci,precision,miou,dice\n0.300000,1.000000,nan,1.000000,1.000000,1.000000\n"

    def test_pr_csv_and_svg(self):
        gt = np.array([[1, 0], [0, 1]], bool)
        curve = M.pr_curve([np.array([[0.9, 0.2], [0.1, 0.8]])], [gt])
        lines = M.pr_csv(curve).splitlines()
        assert lines[0] == "recall,precision" and lines[-1] == "AP,1.000000" and len(lines) == 2 + len(curve)
        root = ElementTree.fromstring(M.pr_svg(curve).encode())
        assert len(root.findall("{http://www.w3.org/2000/svg}polyline")) == 1


def test_fraction_mode_types():
    c = M.Confusion(tp=1, fp=2, fn=3, tn=4)
    assert isinstance(M.dice(c, exact=True), Fraction) and M.dice(c, exact=True) == Fraction(2, 7)
