import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gasmil.errors import ParameterError, UndefinedMetricError
from gasmil.metrics import (
    accuracy,
    auc_binary,
    balanced_accuracy,
    confusion_matrix,
    metrics_report,
    quadratic_weighted_kappa,
    weighted_f1,
)
from gasmil.numerics import make_rng


# brute-force definitional oracles (pure Python, exact fractions where possible)


def oracle_accuracy(t, p):
    return sum(a == b for a, b in zip(t, p)) / len(t)


def oracle_balanced(t, p, c):
    recalls = []
    for k in range(c):
        idx = [i for i in range(len(t)) if t[i] == k]
        if idx:
            recalls.append(sum(p[i] == k for i in idx) / len(idx))
    return sum(recalls) / len(recalls)


def oracle_qwk(t, p, c):
    n = len(t)
    num = Fraction(0)
    den = Fraction(0)
    for i in range(c):
        for j in range(c):
            w = Fraction((i - j) ** 2, (c - 1) ** 2)
            o = sum(1 for a, b in zip(t, p) if a == i and b == j)
            e = Fraction(sum(a == i for a in t) * sum(b == j for b in p), n)
            num += w * o
            den += w * e
    return float(1 - num / den)


def oracle_f1(t, p, c):
    total = 0.0
    for k in range(c):
        tp = sum(1 for a, b in zip(t, p) if a == k and b == k)
        fp = sum(1 for a, b in zip(t, p) if a != k and b == k)
        fn = sum(1 for a, b in zip(t, p) if a == k and b != k)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        total += (tp + fn) / len(t) * f1
    return total


def oracle_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a in pos for b in neg)
    return wins / (len(pos) * len(neg))


def random_instance(rng):
    c = int(rng.integers(2, 7))
    n = int(rng.integers(2, 51))
    return c, rng.integers(0, c, n).tolist(), rng.integers(0, c, n).tolist()


class TestExamples:
    def test_accuracy(self):
        assert accuracy([0, 1, 2, 3], [0, 1, 0, 0]) == 0.5
        assert accuracy([1, 2], [1, 2]) == 1.0
        assert accuracy([1, 2], [0, 0]) == 0.0

    def test_balanced(self):
        assert balanced_accuracy([0, 0, 1], [0, 1, 1], 2) == 0.75
        assert balanced_accuracy([0, 1, 2, 2], [0, 1, 2, 2], 3) == 1.0
        assert balanced_accuracy([0, 1, 2, 0, 1, 2], [1] * 6, 3) == pytest.approx(1 / 3, abs=1e-15)

    def test_balanced_excludes_absent_classes(self):
        assert balanced_accuracy([0, 0, 1], [0, 0, 1], 5) == 1.0

    def test_qwk(self):
        assert quadratic_weighted_kappa([0, 1, 2, 1], [0, 1, 2, 1], 3) == 1.0
        assert quadratic_weighted_kappa([0, 1, 2], [2, 1, 0], 3) == -1.0

    def test_qwk_undefined(self):
        with pytest.raises(UndefinedMetricError):
            quadratic_weighted_kappa([1, 1], [1, 1], 3)
        assert metrics_report([1, 1], [1, 1], 3).qwk is None

    def test_f1(self):
        assert weighted_f1([0, 1, 2], [0, 1, 2], 4) == 1.0
        assert weighted_f1([0, 0], [1, 1], 2) == 0.0

    def test_auc(self):
        assert auc_binary([0.9, 0.8, 0.3, 0.2], [1, 0, 1, 0]) == 0.75
        assert auc_binary([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0
        assert auc_binary([0.4] * 4, [1, 0, 1, 0]) == 0.5

    def test_auc_single_class(self):
        with pytest.raises(UndefinedMetricError):
            auc_binary([0.1, 0.2], [1, 1])

    def test_errors(self):
        with pytest.raises(ParameterError):
            accuracy([0, 1], [0])
        with pytest.raises(ParameterError):
            balanced_accuracy([], [], 2)
        with pytest.raises(ParameterError):
            weighted_f1([], [], 2)


def test_oracles_on_random_instances():
    rng = make_rng(2024)
    for _ in range(1000):
        c, t, p = random_instance(rng)
        assert abs(accuracy(t, p) - oracle_accuracy(t, p)) <= 1e-12
        assert abs(balanced_accuracy(t, p, c) - oracle_balanced(t, p, c)) <= 1e-12
        assert abs(weighted_f1(t, p, c) - oracle_f1(t, p, c)) <= 1e-12
        try:
            q = quadratic_weighted_kappa(t, p, c)
        except UndefinedMetricError:
            assert len(set(t)) == 1 and set(t) == set(p)
        else:
            assert abs(q - oracle_qwk(t, p, c)) <= 1e-12
        y = rng.integers(0, 2, len(t))
        if 0 < y.sum() < len(y):
            scores = rng.integers(0, 5, len(t)) / 4.0
            assert abs(auc_binary(scores, y) - oracle_auc(scores.tolist(), y.tolist())) <= 1e-12


labels = st.integers(2, 6).flatmap(
    lambda c: st.tuples(
        st.just(c),
        st.lists(st.tuples(st.integers(0, c - 1), st.integers(0, c - 1)), min_size=1, max_size=50),
    )
)


class TestProperties:
    @given(labels)
    def test_confusion_invariants(self, case):
        c, pairs = case
        t, p = zip(*pairs)
        cm = confusion_matrix(t, p, c)
        np.testing.assert_array_equal(cm.sum(axis=1), np.bincount(t, minlength=c))
        assert cm.trace() / len(t) == accuracy(t, p)

    @given(labels)
    def test_qwk_symmetric(self, case):
        c, pairs = case
        t, p = zip(*pairs)
        try:
            a = quadratic_weighted_kappa(t, p, c)
        except UndefinedMetricError:
            return
        assert abs(a - quadratic_weighted_kappa(p, t, c)) <= 1e-12
        assert -1.0 - 1e-12 <= a <= 1.0 + 1e-12

    @given(st.integers(2, 5), st.integers(1, 8), st.integers(0, 2**32 - 1))
    def test_balanced_equals_accuracy_on_balanced_data(self, c, per_class, seed):
        t = np.repeat(np.arange(c), per_class)
        p = make_rng(seed).integers(0, c, t.size)
        assert abs(balanced_accuracy(t, p, c) - accuracy(t, p)) <= 1e-12

    @settings(max_examples=50)
    @given(st.lists(st.tuples(st.integers(-40, 40).map(lambda k: k / 8), st.integers(0, 1)), min_size=2, max_size=30))
    def test_auc_monotone_transform(self, pairs):
        s, y = (np.array(v) for v in zip(*pairs))
        if y.min() == y.max():
            return
        assert auc_binary(s, y) == auc_binary(np.exp(s) * 3 + 1, y)


def test_report_json_keys():
    report = metrics_report([0, 1, 1, 0], [0, 1, 0, 0], 2, scores=[0.1, 0.9, 0.4, 0.2])
    obj = json.loads(report.dumps())
    assert set(obj) == {"accuracy", "balanced_accuracy", "qwk", "weighted_f1", "auc", "confusion"}
    assert obj["auc"] == 1.0
    assert metrics_report([0, 1, 2], [0, 1, 2], 3, scores=None).auc is None
