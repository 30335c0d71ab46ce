import math

import numpy as np
import pytest

from oracles import all_labelings, ari_pairs, nmi_counts
from pdisco.errors import InputError
from pdisco.metrics import (
    ClusteringAccumulator, ari, assignment_from_attention, attention_entropy_report, centroids,
    contingency, foreground_iou, keypoint_regression_error, nmi, part_clustering_labels,
    top1_accuracy, upsample_nearest,
)


class TestAssignment:
    def test_background_is_zero(self):
        a = np.zeros((3, 2, 2))
        a[2] = 1.0
        a[0, 0, 0], a[2, 0, 0] = 1.0, 0.0
        assert assignment_from_attention(a).tolist() == [[1, 0], [0, 0]]

    def test_ties_go_to_lowest(self):
        a = np.full((3, 1, 2), 1 / 3)
        assert assignment_from_attention(a).tolist() == [[1, 1]]


class TestCentroids:
    def test_uniform(self):
        c = centroids(np.full((2, 4, 5), 0.5))[0]
        assert c == pytest.approx((2.5 / 4, 3.0 / 5))

    def test_one_hot_first_cell(self):
        a = np.zeros((2, 3, 4))
        a[0, 0, 0] = 1
        assert centroids(a)[0] == pytest.approx((1 / 3, 1 / 4))

    def test_two_masses(self):
        a = np.zeros((2, 3, 3))
        a[0, 0, 0] = a[0, 2, 2] = 0.5
        assert centroids(a)[0] == pytest.approx((2 / 3, 2 / 3), abs=1e-15)

    def test_absent(self):
        a = np.zeros((3, 2, 2))
        a[1, 0, 0] = 1e-7
        assert centroids(a)[0] is None and centroids(a)[1] is None


def kp_sample(cents, kps):
    return ([tuple(c) for c in cents], kps)


class TestKeypointRegression:
    def test_exactly_linear(self):
        rng = np.random.default_rng(0)
        data = []
        for _ in range(12):
            c = rng.random((2, 2))
            x = 0.3 * c[0, 1] + 0.5 * c[1, 0] + 0.1
            y = 0.2 * c[0, 0] - 0.4 * c[1, 1] + 0.6
            data.append(kp_sample(c, [(1, x, y, 1)]))
        assert keypoint_regression_error(data, data) < 1e-9

    def test_uninformative_centroids(self):
        rng = np.random.default_rng(1)
        train = [kp_sample([(0.5, 0.5)], [(1, *rng.random(2), 1)]) for _ in range(10)]
        mean = np.mean([kp[0][1:3] for _, kp in train], axis=0)
        expected = 100 * np.mean([math.dist(kp[0][1:3], mean) for _, kp in train])
        assert keypoint_regression_error(train, train) == pytest.approx(expected, rel=1e-6)

    def test_shift_violation(self):
        rng = np.random.default_rng(2)
        train = []
        for _ in range(6):
            r, c = rng.random(2)
            train.append(kp_sample([(r, c)], [(1, c + 0.1, r, 1)]))
        test = [kp_sample([(0.4, 0.3)], [(1, 0.3, 0.4, 1)])]
        assert keypoint_regression_error(train, test) == pytest.approx(10.0, abs=1e-9)

    def test_invisible_ignored_and_missing_filled(self):
        rng = np.random.default_rng(3)
        train = []
        for _ in range(8):
            r, c = rng.random(2)
            train.append(kp_sample([(r, c)], [(1, c, r, 1), (2, 0.0, 0.0, 0)]))
        test = [([None], [(1, 0.5, 0.5, 1), (2, 0.9, 0.9, 0)])]
        mean = np.mean([cent[0] for cent, _ in train], axis=0)
        expected = 100 * math.dist((mean[1], mean[0]), (0.5, 0.5))
        assert keypoint_regression_error(train, test) == pytest.approx(expected, abs=1e-9)

    def test_too_few_training_samples(self):
        train = [kp_sample([(0.1, 0.2)], [(1, 0.1, 0.2, 1)])] * 2
        with pytest.raises(InputError):
            keypoint_regression_error(train, train)


class TestNmiAri:
    def test_examples(self):
        assert nmi([0, 0, 1, 1], [0, 0, 1, 1]) == 1.0
        assert nmi([0, 0, 1, 1], [1, 1, 0, 0]) == 1.0
        assert abs(nmi([0, 0, 1, 1], [0, 1, 0, 1])) < 1e-12
        assert ari([0, 0, 1, 1], [0, 1, 0, 1]) == -0.5
        assert ari([3, 3, 5], [0, 0, 1]) == 1.0

    def test_degenerate_conventions(self):
        assert nmi([2, 2, 2], [0, 0, 0]) == 1.0
        assert nmi([2, 2, 2], [0, 1, 0]) == 0.0
        assert ari([1, 1, 1], [0, 0, 0]) == 1.0

    def test_length_mismatch(self):
        with pytest.raises(InputError):
            nmi([0, 1], [0, 1, 1])
        with pytest.raises(InputError):
            ari([0, 1], [0])
        with pytest.raises(InputError):
            ari([0], [0])

    def test_contingency(self):
        t = contingency(["a", "b", "a"], [1, 1, 2])
        assert t.tolist() == [[1, 1], [1, 0]]

    @pytest.mark.parametrize("n", range(2, 9))
    def test_oracle_exhaustive(self, n):
        labs = all_labelings(n)
        m = len(labs)
        for i, a in enumerate(labs):
            # every labeling against a scrambled partner and against its own reversal
            for b in (labs[(i * 7919 + 3) % m], a[::-1]):
                assert abs(nmi(a, b) - nmi_counts(a, b)) <= 1e-9
                assert abs(ari(a, b) - ari_pairs(a, b)) <= 1e-9

    @pytest.mark.parametrize("n", range(2, 5))
    def test_oracle_all_pairs(self, n):
        labs = all_labelings(n)
        for a in labs:
            for b in labs:
                assert abs(nmi(a, b) - nmi_counts(a, b)) <= 1e-9
                assert abs(ari(a, b) - ari_pairs(a, b)) <= 1e-9

    def test_symmetry_and_relabeling(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            a, b = rng.integers(0, 4, 12), rng.integers(0, 3, 12)
            perm = rng.permutation(4)
            assert nmi(a, b) == pytest.approx(nmi(b, a), abs=1e-12)
            assert ari(a, b) == pytest.approx(ari(b, a), abs=1e-12)
            assert nmi(perm[a], b) == pytest.approx(nmi(a, b), abs=1e-12)
            assert ari(perm[a], b) == pytest.approx(ari(a, b), abs=1e-12)
            if len(set(a)) > 1:
                assert nmi(a, a) == pytest.approx(1.0, abs=1e-12) and ari(a, a) == 1.0

    def test_ari_chance_level(self):
        rng = np.random.default_rng(5)
        values = [ari(rng.integers(0, 3, 10), rng.integers(0, 3, 10)) for _ in range(10_000)]
        assert abs(np.mean(values)) <= 0.02


class TestPartClustering:
    def test_identical_masks(self):
        gt = np.array([[0, 1], [2, 2]])
        nm, ar = _scores(gt, gt)
        assert nm == 1.0 and ar == 1.0

    def test_constant_prediction(self):
        gt = np.array([[1, 1], [2, 2]])
        assert _scores(np.ones((2, 2), int), gt)[0] == 0.0

    def test_checkerboard(self):
        gt = np.array([[1, 1], [2, 2]])
        pred = np.array([[1, 2], [1, 2]])
        assert _scores(pred, gt)[1] == -0.5

    def test_upsampled(self):
        gt = np.array([[1, 1, 2, 2]] * 4)
        pred = np.array([[3, 4], [3, 4]])
        pred_px, gt_px = part_clustering_labels(pred, gt)
        assert pred_px.size == 16
        assert nmi(pred_px, gt_px) == 1.0

    def test_empty_foreground_skipped(self):
        acc = ClusteringAccumulator()
        acc.add(np.ones((2, 2), int), np.zeros((4, 4), int))
        assert acc.skipped == 1
        with pytest.raises(InputError):
            acc.result()


def _scores(pred, gt):
    acc = ClusteringAccumulator()
    acc.add(pred, gt)
    return acc.result()


class TestForegroundIou:
    def test_perfect(self):
        m = np.array([[0, 1], [1, 1]])
        assert foreground_iou(m, m > 0) == 1.0

    def test_disjoint(self):
        assert foreground_iou(np.array([[1, 0]]), np.array([[0, 1]])) == 0.0

    def test_half_covered(self):
        fg = np.array([[1, 1, 0, 0]])
        assert foreground_iou(np.array([[2, 0, 0, 0]]), fg) == 0.5

    def test_both_empty(self):
        assert foreground_iou(np.zeros((2, 2), int), np.zeros((4, 4), bool)) == 1.0

    def test_monotone(self):
        rng = np.random.default_rng(6)
        fg = rng.random((6, 6)) > 0.5
        pred = np.zeros((6, 6), int)
        last = foreground_iou(pred, fg)
        for i, j in zip(*np.nonzero(fg)):
            pred[i, j] = 1
            now = foreground_iou(pred, fg)
            assert now >= last
            last = now
        assert last == 1.0

    def test_nearest_upsampling(self):
        assert upsample_nearest(np.array([[1, 2]]), (2, 4)).tolist() == [[1, 1, 2, 2], [1, 1, 2, 2]]


class TestEntropyReport:
    def test_one_hot(self):
        a = np.zeros((3, 2, 2))
        a[1] = 1
        assert attention_entropy_report([a, a]) == 0.0

    def test_uniform(self):
        assert attention_entropy_report([np.full((4, 3, 3), 0.25)]) == pytest.approx(math.log(4))

    def test_half_and_half(self):
        a = np.zeros((4, 2, 2))
        a[0, 0] = 1
        a[:, 1] = 0.25
        assert attention_entropy_report([a]) == pytest.approx(math.log(4) / 2)

    def test_empty_stream(self):
        with pytest.raises(InputError):
            attention_entropy_report([])


def test_top1():
    scores = np.array([[0.1, 0.9], [2.0, 1.0], [0.0, 3.0]])
    assert top1_accuracy(scores, [1, 0, 0]) == pytest.approx(2 / 3)
