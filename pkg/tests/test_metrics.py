import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from liber.errors import UndefinedMetricError
from liber.metrics import auc, log_loss


def pairwise_auc(scores, labels):
    """Brute-force reference: fraction of (pos, neg) pairs ranked correctly."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p, n in itertools.product(pos, neg):
        total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


class TestAuc:
    @pytest.mark.parametrize("scores,labels,expected", [
        ([0.9, 0.1], [1, 0], 1.0),
        ([0.5, 0.5, 0.5], [1, 0, 1], 0.5),
        ([0.1, 0.9], [1, 0], 0.0),
        # frozen from pairwise_auc
        ([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1], 0.75),
        ([0.5, 0.5, 0.2, 0.7], [1, 0, 0, 1], 0.875),
    ])
    def test_examples(self, scores, labels, expected):
        assert pairwise_auc(scores, labels) == expected
        assert auc(scores, labels) == pytest.approx(expected, abs=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 1)), min_size=2, max_size=40))
    def test_matches_pairwise(self, rows):
        scores = [s / 6 for s, _ in rows]
        labels = [y for _, y in rows]
        if len(set(labels)) < 2:
            with pytest.raises(UndefinedMetricError):
                auc(scores, labels)
            return
        assert auc(scores, labels) == pytest.approx(pairwise_auc(scores, labels), abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 1000))
    def test_monotone_invariance(self, seed):
        rng = np.random.default_rng(seed)
        s = rng.random(30)
        y = np.r_[np.ones(15, int), np.zeros(15, int)]
        base = auc(s, y)
        assert auc(np.exp(3 * s) - 7, y) == pytest.approx(base, abs=1e-12)
        assert auc(np.log(s + 1e-3), y) == pytest.approx(base, abs=1e-12)

    @pytest.mark.parametrize("labels", [[1, 1], [0, 0], []])
    def test_single_class(self, labels):
        with pytest.raises(UndefinedMetricError):
            auc([0.5] * len(labels), labels)


class TestLogLoss:
    def test_constant_predictor(self):
        assert log_loss([0.5, 0.5], [0, 1]) == pytest.approx(math.log(2), abs=1e-12)

    def test_exact_predictions_clipped(self):
        value = log_loss([1.0, 0.0], [1, 0])
        assert 0 < value <= 1e-6
        assert value == pytest.approx(-math.log(1 - 1e-7), rel=1e-9)

    def test_direct_evaluation(self):
        # -(ln 0.8 + ln 0.8) / 2, evaluated independently
        assert log_loss([0.8, 0.2], [1, 0]) == pytest.approx(0.22314355131420976, abs=1e-12)

    def test_empty(self):
        with pytest.raises(UndefinedMetricError):
            log_loss([], [])
