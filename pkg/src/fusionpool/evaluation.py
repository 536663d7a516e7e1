"""Confusion matrices and the four headline metrics.

Accuracy, recall, precision, and F1 are computed from TP/TN/FP/FN counts;
F1 is the harmonic mean of precision and recall.  Binary reports score one
declared positive class of a two-class matrix; multiclass reports use macro
averaging (unweighted mean of one-vs-rest per-class values).  Metrics are
percentages in [0, 100]; a zero denominator yields 0 with an explicit
"undefined" flag rather than NaN.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import LabelError, ValidationError
from .fusion_pool import FeaturePool
from .heads import TrainedHead, predict


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (C, C) ints; rows = true class, columns = predicted

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValidationError(f"confusion matrix must be square, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise ValidationError("confusion matrix entries must be >= 0")

    @property
    def class_count(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def class_counts(self, class_index: int) -> tuple[int, int, int, int]:
        """One-vs-rest (TP, FP, FN, TN) for a class."""
        tp = int(self.counts[class_index, class_index])
        fp = int(self.counts[:, class_index].sum()) - tp
        fn = int(self.counts[class_index, :].sum()) - tp
        tn = self.total - tp - fp - fn
        return tp, fp, fn, tn

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        for row in self.counts:
            writer.writerow([int(v) for v in row])
        return out.getvalue()


@dataclass
class ClassMetrics:
    name: str
    recall: float
    precision: float
    f1: float
    undefined: list[str] = field(default_factory=list)


@dataclass
class MetricsReport:
    accuracy: float
    recall: float
    precision: float
    f1: float
    per_class: list[ClassMetrics]
    averaging: str                      # "binary_positive" | "macro"
    sample_count: int
    undefined: list[str] = field(default_factory=list)

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["metric", "scope", "value"])
        for name, value in [("accuracy", self.accuracy), ("recall", self.recall),
                            ("precision", self.precision), ("f1", self.f1)]:
            writer.writerow([name, "overall", f"{value:.6f}"])
        for cm in self.per_class:
            writer.writerow(["recall", cm.name, f"{cm.recall:.6f}"])
            writer.writerow(["precision", cm.name, f"{cm.precision:.6f}"])
            writer.writerow(["f1", cm.name, f"{cm.f1:.6f}"])
        return out.getvalue()

    def to_text(self) -> str:
        lines = [
            f"samples: {self.sample_count}   averaging: {self.averaging}",
            f"accuracy:  {self.accuracy:6.2f}",
            f"recall:    {self.recall:6.2f}",
            f"precision: {self.precision:6.2f}",
            f"f1:        {self.f1:6.2f}",
        ]
        if self.per_class:
            width = max(len(c.name) for c in self.per_class)
            lines.append(f"{'class'.ljust(width)}  recall  precis      f1")
            for c in self.per_class:
                lines.append(
                    f"{c.name.ljust(width)}  {c.recall:6.2f}  {c.precision:6.2f}  {c.f1:6.2f}"
                )
        if self.undefined:
            lines.append("undefined (zero denominator, reported as 0): "
                         + ", ".join(self.undefined))
        return "\n".join(lines)


def confusion(true_labels: Sequence[int], predicted_labels: Sequence[int],
              class_count: int) -> ConfusionMatrix:
    """counts[i][j] = number of samples with true class i predicted as j."""
    true_arr = np.asarray(true_labels, dtype=np.int64)
    pred_arr = np.asarray(predicted_labels, dtype=np.int64)
    if true_arr.shape != pred_arr.shape or true_arr.ndim != 1:
        raise ValidationError(
            f"label lists must be equal-length vectors, got {true_arr.shape} and {pred_arr.shape}"
        )
    if class_count < 1:
        raise ValidationError("class_count must be >= 1")
    for name, arr in (("true", true_arr), ("predicted", pred_arr)):
        if arr.size and (arr.min() < 0 or arr.max() >= class_count):
            raise ValidationError(f"{name} labels outside [0, {class_count})")
    counts = np.zeros((class_count, class_count), dtype=np.int64)
    np.add.at(counts, (true_arr, pred_arr), 1)
    return ConfusionMatrix(counts=counts)


def f1_score(precision: float, recall: float) -> float:
    """Harmonic mean of precision and recall (percent in, percent out)."""
    if precision + recall <= 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def _ratio(numerator: int, denominator: int, metric: str, scope: str,
           undefined: list[str]) -> float:
    if denominator == 0:
        undefined.append(f"{metric}/{scope}")
        return 0.0
    return 100.0 * numerator / denominator


def metrics(cm: ConfusionMatrix, positive_class: int | None = None,
            class_names: Sequence[str] | None = None) -> MetricsReport:
    """Accuracy, recall, precision, F1 from a confusion matrix.

    positive_class selects binary mode and requires a 2x2 matrix; without it
    the report macro-averages one-vs-rest per-class values.  In both modes
    accuracy is trace/total.
    """
    if cm.total == 0:
        raise ValidationError("cannot compute metrics on an empty confusion matrix")
    c = cm.class_count
    names = list(class_names) if class_names is not None else [f"class_{i}" for i in range(c)]
    if len(names) != c:
        raise ValidationError(f"got {len(names)} class names for {c} classes")

    undefined: list[str] = []
    accuracy = 100.0 * float(np.trace(cm.counts)) / cm.total

    if positive_class is not None:
        if c != 2:
            raise ValidationError(
                f"binary mode needs a 2-class matrix, got {c} classes"
            )
        if positive_class not in (0, 1):
            raise ValidationError(f"positive_class must be 0 or 1, got {positive_class}")
        tp, fp, fn, _tn = cm.class_counts(positive_class)
        recall = _ratio(tp, tp + fn, "recall", names[positive_class], undefined)
        precision = _ratio(tp, tp + fp, "precision", names[positive_class], undefined)
        f1 = f1_score(precision, recall)
        if precision + recall <= 0:
            undefined.append(f"f1/{names[positive_class]}")
        per_class = [ClassMetrics(name=names[positive_class], recall=recall,
                                  precision=precision, f1=f1)]
        return MetricsReport(accuracy=accuracy, recall=recall, precision=precision,
                             f1=f1, per_class=per_class, averaging="binary_positive",
                             sample_count=cm.total, undefined=undefined)

    per_class = []
    for i in range(c):
        tp, fp, fn, _tn = cm.class_counts(i)
        rec = _ratio(tp, tp + fn, "recall", names[i], undefined)
        prec = _ratio(tp, tp + fp, "precision", names[i], undefined)
        f1 = f1_score(prec, rec)
        if prec + rec <= 0:
            undefined.append(f"f1/{names[i]}")
        per_class.append(ClassMetrics(name=names[i], recall=rec, precision=prec, f1=f1))
    return MetricsReport(
        accuracy=accuracy,
        recall=float(np.mean([m.recall for m in per_class])),
        precision=float(np.mean([m.precision for m in per_class])),
        f1=float(np.mean([m.f1 for m in per_class])),
        per_class=per_class,
        averaging="macro",
        sample_count=cm.total,
        undefined=undefined,
    )


def evaluate(head: TrainedHead, test_pool: FeaturePool,
             positive_class: int | None = None) -> tuple[MetricsReport, ConfusionMatrix]:
    """Predict every record of the pool and score against its labels."""
    if test_pool.feature_dim != head.feature_dim:
        raise ValidationError(
            f"pool D={test_pool.feature_dim} does not match head D={head.feature_dim}"
        )
    head_names = {n.casefold() for n in head.class_names}
    unknown = [n for n in test_pool.label_space.global_classes
               if n.casefold() not in head_names]
    if unknown:
        raise LabelError(f"test pool classes unknown to the head: {unknown}")
    if len(test_pool) == 0:
        raise ValidationError("cannot evaluate on an empty pool")

    # Map pool class indices onto the head's index space by class name.
    head_index = {n.casefold(): i for i, n in enumerate(head.class_names)}
    remap = np.asarray(
        [head_index[n.casefold()] for n in test_pool.label_space.global_classes],
        dtype=np.int64,
    )
    true_labels = remap[test_pool.class_vector()]
    predicted = predict(head, test_pool.feature_matrix())
    cm = confusion(true_labels, predicted, head.class_count)
    if positive_class is None and head.class_count == 2:
        positive_class = 1
    report = metrics(cm, positive_class=positive_class, class_names=head.class_names)
    return report, cm
