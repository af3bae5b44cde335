from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from a2fpn.errors import DataError, UndefinedMetricError
from a2fpn.metrics import (
    ConfusionMatrix,
    confusion_update,
    f1_scores,
    iou_scores,
    mean_iou,
    metric_report,
    overall_accuracy,
    precision_recall,
    predictions_from_logits,
    write_metric_csv,
)

EXAMPLE = [[3, 1], [2, 4]]


def counting_oracle(counts):
    """Exact-rational OA, mIoU and mean F1 from a nested-list confusion matrix."""
    k = len(counts)
    total = sum(map(sum, counts))
    tp = [Fraction(counts[i][i]) for i in range(k)]
    fp = [sum(counts[r][i] for r in range(k)) - tp[i] for i in range(k)]
    fn = [sum(counts[i]) - tp[i] for i in range(k)]
    oa = sum(tp) / total
    ious, f1s = [], []
    for i in range(k):
        if tp[i] + fp[i] + fn[i] == 0:
            continue
        ious.append(tp[i] / (tp[i] + fp[i] + fn[i]))
        p = tp[i] / (tp[i] + fp[i]) if tp[i] + fp[i] else Fraction(0)
        r = tp[i] / (tp[i] + fn[i]) if tp[i] + fn[i] else Fraction(0)
        f1s.append(2 * p * r / (p + r) if p + r else Fraction(0))
    return float(oa), float(sum(ious) / len(ious)), float(sum(f1s) / len(f1s))


def test_oracle_reproduces_hand_values():
    oa, miou, mf1 = counting_oracle(EXAMPLE)
    assert oa == 0.7
    assert miou == pytest.approx((3 / 6 + 4 / 7) / 2, abs=1e-15)
    assert mf1 == pytest.approx(0.69697, abs=1e-5)


def test_example_matrix_metrics():
    cm = ConfusionMatrix(2, EXAMPLE)
    oa, miou, mf1 = counting_oracle(EXAMPLE)
    assert abs(overall_accuracy(cm) - oa) <= 1e-9
    assert abs(mean_iou(cm) - miou) <= 1e-9
    per, mean = f1_scores(cm)
    assert abs(mean - mf1) <= 1e-9
    assert per[0] == pytest.approx(2 / 3, abs=1e-12)
    assert per[1] == pytest.approx(0.8 / 1.1, abs=1e-12)


def test_mixed_pixels_count_to_example():
    labels = np.array([0, 0, 0, 0, 1, 1, 1, 1, 1, 1])
    preds = np.array([0, 0, 0, 1, 0, 0, 1, 1, 1, 1])
    cm = confusion_update(ConfusionMatrix(2), preds, labels)
    direct = [[sum(1 for g, p in zip(labels, preds) if g == i and p == j) for j in range(2)] for i in range(2)]
    assert direct == EXAMPLE
    np.testing.assert_array_equal(cm.counts, EXAMPLE)


def test_perfect_prediction_diagonal():
    labels = np.full(10, 2)
    cm = confusion_update(ConfusionMatrix(3), labels, labels)
    expected = np.zeros((3, 3), dtype=int)
    expected[2, 2] = 10
    np.testing.assert_array_equal(cm.counts, expected)


@pytest.mark.parametrize("diag", [[5, 7, 2], [1, 1, 1, 1]])
def test_perfect_case_is_exactly_one(diag):
    cm = ConfusionMatrix(len(diag), np.diag(diag))
    assert overall_accuracy(cm) == 1.0
    assert mean_iou(cm) == 1.0
    assert f1_scores(cm)[1] == 1.0


def test_all_ignored_leaves_matrix_unchanged():
    cm = ConfusionMatrix(2, EXAMPLE)
    confusion_update(cm, np.zeros((3, 3), int), np.full((3, 3), 255), ignore_label=255)
    np.testing.assert_array_equal(cm.counts, EXAMPLE)


def test_out_of_range_class_is_data_error():
    with pytest.raises(DataError):
        confusion_update(ConfusionMatrix(2), np.array([0, 2]), np.array([0, 1]))
    with pytest.raises(DataError):
        confusion_update(ConfusionMatrix(2), np.array([0, 1]), np.array([-1, 1]))


def test_zero_diagonal_accuracy():
    assert overall_accuracy(ConfusionMatrix(2, [[0, 3], [4, 0]])) == 0.0


def test_empty_matrix_is_undefined():
    for fn in (overall_accuracy, mean_iou, lambda c: f1_scores(c)):
        with pytest.raises(UndefinedMetricError):
            fn(ConfusionMatrix(3))


def test_absent_class_excluded_from_means():
    cm = ConfusionMatrix(3, [[4, 0, 0], [0, 0, 0], [0, 0, 6]])
    assert mean_iou(cm) == 1.0
    per, mean = f1_scores(cm)
    assert np.isnan(per[1]) and mean == 1.0


def test_never_predicted_class_has_zero_f1():
    cm = ConfusionMatrix(2, [[5, 0], [3, 0]])
    per, _ = f1_scores(cm)
    assert per[1] == 0.0


def test_argmax_ties_go_to_lowest_index():
    logits = np.zeros((1, 3, 2, 2))
    logits[0, 1] = 1.0
    logits[0, 2] = 1.0
    np.testing.assert_array_equal(predictions_from_logits(logits), np.ones((1, 2, 2)))


def random_cm(k, seed):
    return ConfusionMatrix(k, np.random.default_rng(seed).integers(0, 50, (k, k)))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_metrics_match_rational_oracle(k, seed):
    cm = random_cm(k, seed)
    oa, miou, mf1 = counting_oracle(cm.counts.tolist())
    assert abs(overall_accuracy(cm) - oa) <= 1e-12
    assert abs(mean_iou(cm) - miou) <= 1e-12
    assert abs(f1_scores(cm)[1] - mf1) <= 1e-12


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_iou_bounded_by_f1(k, seed):
    cm = random_cm(k, seed)
    iou = iou_scores(cm)
    f1 = np.array(f1_scores(cm)[0])
    present = ~np.isnan(iou)
    assert np.all(iou[present] <= f1[present] + 1e-15)
    assert np.all(f1[present] <= 1.0)
    for v in (overall_accuracy(cm), mean_iou(cm), f1_scores(cm)[1]):
        assert 0.0 <= v <= 1.0


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 5), st.integers(0, 2**32 - 1))
def test_class_relabelling_invariance(k, seed):
    rng = np.random.default_rng(seed)
    gt, pred = rng.integers(0, k, 200), rng.integers(0, k, 200)
    perm = rng.permutation(k)
    a = confusion_update(ConfusionMatrix(k), pred, gt)
    b = confusion_update(ConfusionMatrix(k), perm[pred], perm[gt])
    assert overall_accuracy(a) == overall_accuracy(b)
    assert mean_iou(a) == pytest.approx(mean_iou(b), abs=1e-15)
    assert f1_scores(a)[1] == pytest.approx(f1_scores(b)[1], abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(arrays(np.int64, st.tuples(st.integers(1, 8), st.integers(1, 8)), elements=st.integers(0, 3)), st.integers(0, 2**16))
def test_accuracy_is_pixel_agreement(gt, seed):
    pred = np.random.default_rng(seed).integers(0, 4, gt.shape)
    cm = confusion_update(ConfusionMatrix(4), pred, gt)
    agree = sum(int(p == g) for p, g in zip(pred.ravel(), gt.ravel()))
    assert overall_accuracy(cm) == agree / gt.size
    assert cm.total == gt.size


def test_tile_merge_equals_sequential():
    rng = np.random.default_rng(3)
    gt, pred = rng.integers(0, 4, (8, 8)), rng.integers(0, 4, (8, 8))
    whole = confusion_update(ConfusionMatrix(4), pred, gt)
    parts = [confusion_update(ConfusionMatrix(4), pred[i : i + 4], gt[i : i + 4]) for i in (0, 4)]
    np.testing.assert_array_equal(parts[0].merge(parts[1]).counts, whole.counts)


def test_counts_never_decrease():
    cm = ConfusionMatrix(3)
    rng = np.random.default_rng(4)
    prev = cm.counts.copy()
    for _ in range(5):
        confusion_update(cm, rng.integers(0, 3, 10), rng.integers(0, 3, 10))
        assert np.all(cm.counts >= prev)
        prev = cm.counts.copy()


def test_csv_layout(tmp_path):
    text = write_metric_csv(ConfusionMatrix(2, EXAMPLE), tmp_path / "m.csv")
    lines = text.splitlines()
    assert lines[0] == "kind,name,precision,recall,f1,iou,value"
    assert lines[1] == "class,0,0.6000000000,0.7500000000,0.6666666667,0.5000000000,"
    assert lines[-3:] == [
        "summary,OA,,,,,0.7000000000",
        "summary,mean_F1,,,,,0.6969696970",
        "summary,mIoU,,,,,0.5357142857",
    ]
    assert (tmp_path / "m.csv").read_text() == text


def test_report_precision_recall_consistent():
    cm = ConfusionMatrix(2, EXAMPLE)
    p, r = precision_recall(cm)
    np.testing.assert_allclose(p, [0.6, 0.8])
    np.testing.assert_allclose(r, [0.75, 4 / 6])
    assert metric_report(cm)["OA"] == 0.7
