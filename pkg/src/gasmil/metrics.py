"""Classification metrics: accuracy, balanced accuracy, QWK, weighted F1, AUC.

Conventions where definitions differ between libraries:

* balanced accuracy averages recall over the classes that occur in ``y_true``;
* a class whose precision and recall are both zero has F1 = 0;
* QWK marginals run over all ``c`` nominal classes, present or not.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, UndefinedMetricError

REPORT_KEYS = ("accuracy", "balanced_accuracy", "qwk", "weighted_f1")


def _labels(y_true, y_pred, c=None):
    y_true = np.asarray(y_true, dtype=np.int64).reshape(-1)
    y_pred = np.asarray(y_pred, dtype=np.int64).reshape(-1)
    if y_true.size == 0:
        raise ParameterError("metrics need at least one sample")
    if y_true.shape != y_pred.shape:
        raise ParameterError(f"length mismatch: {y_true.size} true labels, {y_pred.size} predictions")
    if c is not None and (
        y_true.min() < 0 or y_pred.min() < 0 or y_true.max() >= c or y_pred.max() >= c
    ):
        raise ParameterError(f"labels must lie in [0, {c})")
    return y_true, y_pred


def confusion_matrix(y_true, y_pred, c):
    """``c x c`` counts; rows are true classes, columns predictions."""
    y_true, y_pred = _labels(y_true, y_pred, c)
    return np.bincount(y_true * c + y_pred, minlength=c * c).reshape(c, c)


def accuracy(y_true, y_pred):
    y_true, y_pred = _labels(y_true, y_pred)
    return float(np.mean(y_true == y_pred))


def balanced_accuracy(y_true, y_pred, c):
    cm = confusion_matrix(y_true, y_pred, c)
    support = cm.sum(axis=1)
    present = support > 0
    return float(np.mean(np.diag(cm)[present] / support[present]))


def quadratic_weighted_kappa(y_true, y_pred, c):
    """Quadratic weighted kappa over all ``c`` classes.

    With integer counts ``O``, marginals ``r`` and ``p`` and ``d = i - j``::

        kappa = 1 - n * sum(d^2 O) / sum(d^2 r_i p_j)

    which equals the usual ``1 - sum(w O) / sum(w E)`` form; both sums are
    exact integers so the only rounding is the final division.
    """
    if c < 2:
        raise ParameterError("QWK needs at least two classes")
    observed = confusion_matrix(y_true, y_pred, c).astype(object)
    total = int(observed.sum())
    i, j = np.indices((c, c))
    d2 = ((i - j) ** 2).astype(object)
    num = total * int(np.sum(d2 * observed))
    den = int(np.sum(d2 * np.outer(observed.sum(axis=1), observed.sum(axis=0))))
    if den == 0:
        raise UndefinedMetricError(
            "QWK is undefined: true and predicted labels are both concentrated on one class"
        )
    return 1.0 - num / den


def weighted_f1(y_true, y_pred, c):
    cm = confusion_matrix(y_true, y_pred, c).astype(np.float64)
    tp = np.diag(cm)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    # F1 = 2TP / (support + predicted); zero when both precision and recall are zero
    denom = support + predicted
    f1 = np.divide(2.0 * tp, denom, out=np.zeros(c), where=denom > 0)
    return float(np.sum(support / support.sum() * f1))


def auc_binary(scores, y_true):
    """ROC AUC as the Mann-Whitney statistic, using mid-ranks for ties."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    y_true = np.asarray(y_true).reshape(-1)
    if scores.shape != y_true.shape:
        raise ParameterError(f"{scores.size} scores for {y_true.size} labels")
    pos = y_true == 1
    n_pos = int(pos.sum())
    n_neg = int((y_true == 0).sum())
    if n_pos + n_neg != y_true.size:
        raise ParameterError("AUC labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC is undefined unless both classes are present")
    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    ranks = np.empty(scores.size)
    # average 1-based rank over each run of equal scores
    starts = np.flatnonzero(np.r_[True, sorted_scores[1:] != sorted_scores[:-1]])
    ends = np.r_[starts[1:], scores.size]
    for a, b in zip(starts, ends):
        ranks[order[a:b]] = (a + b + 1) / 2.0
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class MetricsReport:
    accuracy: float
    balanced_accuracy: float
    qwk: float | None
    weighted_f1: float
    confusion: np.ndarray
    auc: float | None = None

    def to_json(self):
        out = {k: getattr(self, k) for k in REPORT_KEYS}
        out["auc"] = self.auc
        out["confusion"] = np.asarray(self.confusion).tolist()
        return out

    def dumps(self):
        return json.dumps(self.to_json(), indent=1, sort_keys=False)

    def get(self, key):
        value = getattr(self, key)
        return float("nan") if value is None else value


def metrics_report(y_true, y_pred, c, scores=None):
    """All metrics for one prediction vector.

    QWK is reported as ``None`` when undefined.  AUC is computed only for
    binary tasks and only when ``scores`` (positive-class scores) are given.
    """
    try:
        qwk = quadratic_weighted_kappa(y_true, y_pred, c)
    except UndefinedMetricError:
        qwk = None
    auc = None
    if c == 2 and scores is not None:
        try:
            auc = auc_binary(scores, y_true)
        except UndefinedMetricError:
            auc = None
    return MetricsReport(
        accuracy=accuracy(y_true, y_pred),
        balanced_accuracy=balanced_accuracy(y_true, y_pred, c),
        qwk=qwk,
        weighted_f1=weighted_f1(y_true, y_pred, c),
        confusion=confusion_matrix(y_true, y_pred, c),
        auc=auc,
    )


def mean_absolute_error(y_true, y_pred):
    y_true, y_pred = _labels(y_true, y_pred)
    return float(np.mean(np.abs(y_true - y_pred)))


def is_nan(value):
    return value is None or (isinstance(value, float) and math.isnan(value))
