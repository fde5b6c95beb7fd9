"""Binary classification metrics: confusion counts, precision/recall/F1, ROC/AUC.

All metrics live in [0, 1]; 0/0 denominators return 0 so degenerate runs
(e.g. a classifier that never predicts the positive class) stay comparable.
roc_auc is the Mann-Whitney pair statistic; auc_trapezoid integrates the ROC
curve and must agree with it to near machine precision.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import model as modellib
from .ops import softmax

BENIGN, MALIGNANT = 0, 1


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass
class MetricsReport:
    accuracy: float
    precision_benign: float
    precision_malignant: float
    recall_benign: float
    recall_malignant: float
    f1_benign: float
    f1_malignant: float
    auc: float
    n_samples: int
    seed: int = 0
    wall_time_s: float = 0.0

    METRIC_FIELDS = (
        "accuracy",
        "precision_benign",
        "precision_malignant",
        "recall_benign",
        "recall_malignant",
        "f1_benign",
        "f1_malignant",
        "auc",
    )

    def metric_values(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in self.METRIC_FIELDS}


def confusion(preds, labels, positive: int) -> ConfusionMatrix:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape or preds.ndim != 1 or preds.size == 0:
        raise ValueError(f"preds/labels must be equal-length 1-d and non-empty, got {preds.shape} vs {labels.shape}")
    p = preds == positive
    t = labels == positive
    return ConfusionMatrix(
        tp=int(np.sum(p & t)),
        fp=int(np.sum(p & ~t)),
        fn=int(np.sum(~p & t)),
        tn=int(np.sum(~p & ~t)),
    )


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise ValueError("accuracy of an empty confusion matrix")
    return (cm.tp + cm.tn) / cm.total


def precision(cm: ConfusionMatrix) -> float:
    denom = cm.tp + cm.fp
    return cm.tp / denom if denom else 0.0


def recall(cm: ConfusionMatrix) -> float:
    denom = cm.tp + cm.fn
    return cm.tp / denom if denom else 0.0


def f1(cm: ConfusionMatrix) -> float:
    p, r = precision(cm), recall(cm)
    return 2 * p * r / (p + r) if p + r else 0.0


def roc_auc(scores, labels, positive: int = MALIGNANT) -> float:
    """Mann-Whitney pair statistic: P(score_pos > score_neg) + 0.5 P(tie)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == positive]
    neg = scores[labels != positive]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("roc_auc requires both classes present")
    combined = np.concatenate([pos, neg])
    order = np.argsort(combined, kind="mergesort")
    sorted_vals = combined[order]
    ranks_sorted = np.empty(combined.size, dtype=np.float64)
    # Average 1-based ranks over tied groups.
    i = 0
    while i < combined.size:
        j = i
        while j + 1 < combined.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks_sorted[i : j + 1] = 0.5 * (i + j) + 1.0
        i = j + 1
    ranks = np.empty_like(ranks_sorted)
    ranks[order] = ranks_sorted
    pos_rank_sum = ranks[: pos.size].sum()
    return float((pos_rank_sum - pos.size * (pos.size + 1) / 2.0) / (pos.size * neg.size))


def roc_points(scores, labels, positive: int = MALIGNANT) -> np.ndarray:
    """ROC curve rows (fpr, tpr, threshold), threshold descending from +inf."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos_mask = labels == positive
    n_pos = int(pos_mask.sum())
    n_neg = int((~pos_mask).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_points requires both classes present")
    order = np.argsort(-scores, kind="mergesort")
    sorted_scores = scores[order]
    sorted_pos = pos_mask[order].astype(np.int64)
    tp = np.cumsum(sorted_pos)
    fp = np.cumsum(1 - sorted_pos)
    # Keep only the last index of each tied-score run.
    keep = np.r_[sorted_scores[1:] != sorted_scores[:-1], True]
    rows = [(0.0, 0.0, np.inf)]
    rows.extend((fp[i] / n_neg, tp[i] / n_pos, sorted_scores[i]) for i in np.flatnonzero(keep))
    return np.array(rows, dtype=np.float64)


def auc_trapezoid(points: np.ndarray) -> float:
    fpr, tpr = points[:, 0], points[:, 1]
    return float(np.trapz(tpr, fpr))


def report_from_predictions(preds, labels, scores, seed: int = 0, wall_time_s: float = 0.0) -> MetricsReport:
    cm_m = confusion(preds, labels, positive=MALIGNANT)
    cm_b = confusion(preds, labels, positive=BENIGN)
    return MetricsReport(
        accuracy=accuracy(cm_m),
        precision_benign=precision(cm_b),
        precision_malignant=precision(cm_m),
        recall_benign=recall(cm_b),
        recall_malignant=recall(cm_m),
        f1_benign=f1(cm_b),
        f1_malignant=f1(cm_m),
        auc=roc_auc(scores, labels),
        n_samples=len(labels),
        seed=seed,
        wall_time_s=wall_time_s,
    )


@dataclass
class EvalResult:
    report: MetricsReport
    preds: np.ndarray
    scores: np.ndarray
    labels: np.ndarray
    roc: np.ndarray
    ids: list[str] = field(default_factory=list)


def evaluate(net: "modellib.MiniResNet", images: np.ndarray, labels, ids=None, seed: int = 0, batch_size: int = 64) -> EvalResult:
    """Score a two-class model on normalized CHW images.

    Softmax scores for the malignant class drive AUC; argmax drives the
    confusion counts.
    """
    labels = np.asarray(labels)
    if images.shape[0] == 0:
        raise ValueError("evaluate: empty test split")
    if net.num_classes != 2:
        raise ValueError(f"evaluate expects a two-class model, got {net.num_classes} classes")
    t0 = time.perf_counter()
    all_scores = []
    for start in range(0, images.shape[0], batch_size):
        logits, _ = modellib.forward(net, images[start : start + batch_size], mode="eval")
        all_scores.append(softmax(logits)[:, MALIGNANT])
    scores = np.concatenate(all_scores)
    preds = (scores > 0.5).astype(np.int64)
    wall = time.perf_counter() - t0
    report = report_from_predictions(preds, labels, scores, seed=seed, wall_time_s=wall)
    return EvalResult(
        report=report,
        preds=preds,
        scores=scores,
        labels=labels,
        roc=roc_points(scores, labels),
        ids=list(ids) if ids is not None else [str(i) for i in range(len(labels))],
    )
