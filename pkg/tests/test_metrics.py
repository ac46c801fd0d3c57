import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bam_fss.data import split_folds
from bam_fss.generalized import GeneralizedMask, fuse_generalized, id_table
from bam_fss.metrics import (IoUAccumulator, MetricsRecord, ResultsTable, accumulate_iou,
                             fb_iou, format_flops, generalized_miou, gram_flops)


def brute_iou(preds, gts, cls):
    """Pixel-by-pixel counting."""
    inter = union = 0
    for p, g in zip(preds, gts):
        for a, b in zip(np.ravel(p), np.ravel(g)):
            if b == 255:
                continue
            inter += (a == cls) and (b == cls)
            union += (a == cls) or (b == cls)
    return inter, union


class TestIoU:
    def test_identity(self):
        g = np.array([[0, 1], [2, 2]])
        acc = accumulate_iou(g, g, IoUAccumulator(3))
        assert acc.per_class_iou() == {0: 1.0, 1: 1.0, 2: 1.0}

    def test_disjoint(self):
        acc = accumulate_iou(np.array([[1, 0]]), np.array([[0, 1]]), IoUAccumulator(2))
        assert acc.per_class_iou()[1] == 0.0

    def test_two_by_two(self):
        gt = np.array([[1, 1], [1, 0]])
        pred = np.array([[1, 1], [0, 0]])
        acc = accumulate_iou(pred, gt, IoUAccumulator(2))
        assert acc.intersection[1] == 2 and acc.union[1] == 3
        assert acc.per_class_iou()[1] == pytest.approx(2 / 3)

    def test_absent_class_excluded(self):
        acc = accumulate_iou(np.zeros((2, 2)), np.zeros((2, 2)), IoUAccumulator(4))
        assert acc.per_class_iou() == {0: 1.0}
        assert np.isnan(acc.miou())

    def test_ignore_label(self):
        acc = accumulate_iou(np.array([[1, 1]]), np.array([[1, 255]]), IoUAccumulator(2))
        assert acc.per_class_iou()[1] == 1.0

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_matches_counting_oracle(self, seed):
        rng = np.random.default_rng(seed)
        preds = [rng.integers(0, 4, size=(5, 6)) for _ in range(4)]
        gts = [np.where(rng.random((5, 6)) < 0.1, 255, rng.integers(0, 4, size=(5, 6)))
               for _ in range(4)]
        acc = IoUAccumulator(4)
        for p, g in zip(preds, gts):
            acc.update(p, g)
        for c in range(4):
            i, u = brute_iou(preds, gts, c)
            assert (acc.intersection[c], acc.union[c]) == (i, u)

    def test_order_independent_and_mergeable(self):
        rng = np.random.default_rng(1)
        pairs = [(rng.integers(0, 3, (8, 8)), rng.integers(0, 3, (8, 8))) for _ in range(10)]
        a, b = IoUAccumulator(3), IoUAccumulator(3)
        for p, g in pairs:
            a.update(p, g)
        for p, g in reversed(pairs):
            b.update(p, g)
        assert a.per_class_iou() == b.per_class_iou()
        left, right = IoUAccumulator(3), IoUAccumulator(3)
        for p, g in pairs[:4]:
            left.update(p, g)
        for p, g in pairs[4:]:
            right.update(p, g)
        assert (left + right).per_class_iou() == a.per_class_iou()

    def test_per_image_mode(self):
        acc = IoUAccumulator(2, mode="image")
        acc.update(np.array([[1, 1]]), np.array([[1, 1]]))      # IoU 1
        acc.update(np.array([[1, 0, 0, 0]]), np.array([[1, 1, 1, 1]]))  # IoU 1/4
        assert acc.per_class_iou()[1] == pytest.approx(0.625)
        pooled = IoUAccumulator(2)
        pooled.update(np.array([[1, 1]]), np.array([[1, 1]]))
        pooled.update(np.array([[1, 0, 0, 0]]), np.array([[1, 1, 1, 1]]))
        assert pooled.per_class_iou()[1] == pytest.approx(3 / 6)


class TestFBIoU:
    def test_perfect(self):
        g = np.array([[0, 1], [1, 0]])
        assert fb_iou([g], [g]) == 1.0

    def test_all_background_on_half(self):
        g = np.zeros((4, 4), int)
        g[:, :2] = 1
        p = np.zeros_like(g)
        # oracle: fg I=0,U=8 -> 0 ; bg I=8,U=16 -> 1/2
        fi, fu = brute_iou([p], [g], 1)
        bi, bu = brute_iou([p], [g], 0)
        expected = (fi / fu + bi / bu) / 2
        assert expected == pytest.approx(0.25)
        assert fb_iou([p], [g]) == pytest.approx(expected)

    def test_complement(self):
        g = np.array([[0, 1], [1, 0]])
        assert fb_iou([1 - g], [g]) == 0.0


class TestGeneralizedMiou:
    split = split_folds(8, 0, 4)     # novel {1, 2}, base {3..8}

    def _mask(self, labels, novel):
        return GeneralizedMask(np.asarray(labels), id_table(novel, self.split.base_lookup()))

    def test_perfect(self):
        # query with novel 1 and base 3, 5 ; output ids: novel -> 1, base dense d -> d+1
        gt = np.array([[1, 3], [5, 0]])
        pred = self._mask([[1, 2], [4, 0]], novel=1)
        assert generalized_miou([pred], [gt], self.split) == (1.0, 1.0, 1.0)

    def test_wrong_novel(self):
        gt = np.array([[1, 3], [5, 0]])
        pred = self._mask([[0, 2], [4, 0]], novel=1)
        n, b, a = generalized_miou([pred], [gt], self.split)
        assert (n, b) == (0.0, 1.0)
        assert min(n, b) <= a <= max(n, b)
        assert a == pytest.approx(2 / 3)   # mean over classes {1, 3, 5}

    def test_missing_table(self):
        with pytest.raises(ValueError):
            generalized_miou([GeneralizedMask(np.zeros((2, 2), int))], [np.zeros((2, 2))],
                             self.split)

    def test_fused_output_translates(self):
        p = np.array([[0.95, 0.1], [0.1, 0.1]])
        m_b = np.array([[3, 1], [0, 6]])
        g = fuse_generalized(p, m_b, 0.9, novel_class=2, base_lookup=self.split.base_lookup())
        np.testing.assert_array_equal(g.to_original(), [[2, 3], [0, 8]])


class TestFlops:
    def test_512_channels_60x60(self):
        n = gram_flops(512, 60, 60)
        assert n == 512 ** 2 * (4 * 3600 + 3) == 3_775_660_032
        assert format_flops(n) == "3.78G"
        assert isinstance(n, int)

    def test_unit(self):
        assert gram_flops(1, 1, 1) == 7

    @given(st.integers(1, 2048), st.integers(1, 128), st.integers(1, 128))
    def test_channel_scaling(self, c, h, w):
        assert gram_flops(2 * c, h, w) == 4 * gram_flops(c, h, w)

    def test_rejects_non_positive(self):
        with pytest.raises(ValueError):
            gram_flops(0, 2, 2)
        with pytest.raises(ValueError):
            gram_flops(2.0, 2, 2)


def test_results_table_roundtrip():
    t = ResultsTable("miou")
    for m, f in itertools.product(["bam", "meta-only"], range(4)):
        t.add(m, f, 0.1 * f + (0.05 if m == "bam" else 0.0) + 1 / 3)
    back = ResultsTable.from_json(t.to_json())
    assert back.rows == t.rows
    assert "Fold-3" in t.to_text() and "Mean" in t.to_text()


def test_metrics_record_roundtrip():
    r = MetricsRecord(fold=1, seed=2, miou=0.5, fb_iou=0.7, per_class_iou={4: 0.5}, miou_n=0.4)
    assert MetricsRecord.from_dict(r.to_dict()) == r
