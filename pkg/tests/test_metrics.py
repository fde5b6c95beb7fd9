"""Metric oracle and property tests."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vasculab import metrics as mx


def counting_oracle(preds, labels, positive):
    tp = fp = fn = tn = 0
    for p, t in zip(preds, labels):
        if p == positive and t == positive:
            tp += 1
        elif p == positive:
            fp += 1
        elif t == positive:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def pair_auc_oracle(scores, labels, positive=1):
    pos = [s for s, y in zip(scores, labels) if y == positive]
    neg = [s for s, y in zip(scores, labels) if y != positive]
    wins = ties = 0
    for sp in pos:
        for sn in neg:
            if sp > sn:
                wins += 1
            elif sp == sn:
                ties += 1
    return (wins + 0.5 * ties) / (len(pos) * len(neg))


class TestConfusion:
    def test_worked_example(self):
        cm = mx.confusion([1, 0, 1, 0, 1], [1, 1, 1, 0, 0], positive=1)
        assert (cm.tp, cm.fn, cm.tn, cm.fp) == (2, 1, 1, 1)

    def test_perfect_predictions(self):
        cm = mx.confusion([0, 1, 1], [0, 1, 1], positive=1)
        assert cm.fp == 0 and cm.fn == 0

    def test_all_positive_predictions(self):
        cm = mx.confusion([1, 1, 1], [0, 1, 0], positive=1)
        assert cm.fn == 0 and cm.tn == 0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            mx.confusion([1, 0], [1], positive=1)


class TestDerivedMetrics:
    def test_worked_example_values(self):
        cm = mx.confusion([1, 0, 1, 0, 1], [1, 1, 1, 0, 0], positive=1)
        assert mx.accuracy(cm) == pytest.approx(0.6)
        assert mx.precision(cm) == pytest.approx(2 / 3)
        assert mx.recall(cm) == pytest.approx(2 / 3)
        assert mx.f1(cm) == pytest.approx(2 / 3)

    def test_reported_f1_consistency(self):
        # precision 0.516 with recall 0.110 must give F1 0.182 within rounding.
        p, r = 0.516, 0.110
        f1 = 2 * p * r / (p + r)
        assert f1 == pytest.approx(0.182, abs=2e-3)

    def test_perfect_classifier(self):
        cm = mx.ConfusionMatrix(tp=10, fp=0, fn=0, tn=15)
        for fn in (mx.accuracy, mx.precision, mx.recall, mx.f1):
            assert fn(cm) == 1.0

    def test_degenerate_denominators_return_zero(self):
        assert mx.precision(mx.ConfusionMatrix(0, 0, 5, 5)) == 0.0
        assert mx.recall(mx.ConfusionMatrix(0, 5, 0, 5)) == 0.0
        assert mx.f1(mx.ConfusionMatrix(0, 0, 0, 5)) == 0.0

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=60))
    def test_matches_counting_oracle(self, pairs):
        preds = [p for p, _ in pairs]
        labels = [t for _, t in pairs]
        cm = mx.confusion(preds, labels, positive=1)
        tp, fp, fn, tn = counting_oracle(preds, labels, 1)
        assert (cm.tp, cm.fp, cm.fn, cm.tn) == (tp, fp, fn, tn)
        assert cm.total == len(pairs)
        assert mx.accuracy(cm) == pytest.approx((tp + tn) / len(pairs))
        if tp + fp:
            assert mx.precision(cm) == pytest.approx(tp / (tp + fp))
        if tp + fn:
            assert mx.recall(cm) == pytest.approx(tp / (tp + fn))
        for fn_ in (mx.accuracy, mx.precision, mx.recall, mx.f1):
            assert 0.0 <= fn_(cm) <= 1.0

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 20), st.integers(0, 20), st.integers(0, 20), st.integers(0, 20))
    def test_class_swap_symmetry(self, tp, fp, fn, tn):
        preds = [1] * tp + [1] * fp + [0] * fn + [0] * tn
        labels = [1] * tp + [0] * fp + [1] * fn + [0] * tn
        if not preds:
            return
        cm_pos = mx.confusion(preds, labels, positive=1)
        cm_neg = mx.confusion(preds, labels, positive=0)
        assert mx.accuracy(cm_pos) == pytest.approx(mx.accuracy(cm_neg))
        # Swapping the designated positive class transposes the counts.
        assert (cm_neg.tp, cm_neg.fp, cm_neg.fn, cm_neg.tn) == (cm_pos.tn, cm_pos.fn, cm_pos.fp, cm_pos.tp)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 30), st.integers(1, 30), st.integers(0, 30), st.integers(0, 30))
    def test_f1_harmonic_mean(self, tp, fp, fn, tn):
        cm = mx.ConfusionMatrix(tp, fp, fn, tn)
        p, r = mx.precision(cm), mx.recall(cm)
        if p + r > 0:
            assert mx.f1(cm) == pytest.approx(2 * p * r / (p + r))


class TestAuc:
    def test_enumerated_pairs(self):
        scores = [0.9, 0.4, 0.5, 0.1]
        labels = [1, 1, 0, 0]
        assert mx.roc_auc(scores, labels) == pytest.approx(0.75)

    def test_perfect_separation(self):
        assert mx.roc_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0

    def test_all_ties(self):
        assert mx.roc_auc([0.5, 0.5, 0.5, 0.5], [1, 1, 0, 0]) == 0.5

    def test_single_class_errors(self):
        with pytest.raises(ValueError):
            mx.roc_auc([0.5, 0.6], [1, 1])

    @settings(max_examples=150, deadline=None)
    @given(
        st.lists(st.integers(0, 10), min_size=1, max_size=25),
        st.lists(st.integers(0, 10), min_size=1, max_size=25),
    )
    def test_pair_statistic_oracle(self, pos_scores, neg_scores):
        scores = [s / 10 for s in pos_scores + neg_scores]
        labels = [1] * len(pos_scores) + [0] * len(neg_scores)
        assert mx.roc_auc(scores, labels) == pytest.approx(pair_auc_oracle(scores, labels), abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1), st.integers(2, 200), st.booleans())
    def test_trapezoid_equals_pair_statistic(self, seed, n, with_ties):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 2, n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        scores = rng.random(n)
        if with_ties:
            scores = np.round(scores, 1)
        points = mx.roc_points(scores, labels)
        assert abs(mx.auc_trapezoid(points) - mx.roc_auc(scores, labels)) < 1e-9

    def test_roc_points_boundaries(self):
        points = mx.roc_points([0.9, 0.4, 0.5, 0.1], [1, 1, 0, 0])
        assert tuple(points[0][:2]) == (0.0, 0.0)
        assert tuple(points[-1][:2]) == (1.0, 1.0)
        assert np.all(np.diff(points[:, 0]) >= 0)
        assert np.all(np.diff(points[:, 1]) >= 0)

    def test_label_permutation_drives_auc_to_half(self):
        rng = np.random.default_rng(123)
        n = 500
        scores = rng.random(n)
        labels = rng.permutation(np.r_[np.ones(250, dtype=int), np.zeros(250, dtype=int)])
        assert abs(mx.roc_auc(scores, labels) - 0.5) < 0.1


class TestReport:
    def test_all_metrics_in_range(self):
        rng = np.random.default_rng(7)
        labels = rng.integers(0, 2, 100)
        labels[:2] = [0, 1]
        preds = rng.integers(0, 2, 100)
        scores = rng.random(100)
        report = mx.report_from_predictions(preds, labels, scores)
        for key, value in report.metric_values().items():
            assert 0.0 <= value <= 1.0, key
        assert report.n_samples == 100
