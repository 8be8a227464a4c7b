"""Confusion matrices and the metric suite.

accuracy           trace / total
balanced accuracy  unweighted mean of per-class recalls
precision/recall/F1 per class, aggregated weighted by class support

Weighted recall is algebraically identical to accuracy; the property is
asserted in tests. Per-class rates with a zero denominator follow the
0-convention and increment a warning counter instead of producing NaN.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import EmptyMatrix, LengthMismatch


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (k, k); cell (i, j) = true class i predicted as j
    class_names: tuple[str, ...]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class PerClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class EvaluationReport:
    accuracy: float
    balanced_accuracy: float
    precision_weighted: float
    recall_weighted: float
    f1_weighted: float
    per_class: list[PerClassMetrics]
    class_names: tuple[str, ...]
    zero_division_warnings: int = 0
    wall_time_seconds: float = 0.0

    def to_json(self) -> str:
        doc = {
            "accuracy": self.accuracy,
            "balanced_accuracy": self.balanced_accuracy,
            "precision_weighted": self.precision_weighted,
            "recall_weighted": self.recall_weighted,
            "f1_weighted": self.f1_weighted,
            "per_class": {
                name: {
                    "precision": pc.precision,
                    "recall": pc.recall,
                    "f1": pc.f1,
                    "support": pc.support,
                }
                for name, pc in zip(self.class_names, self.per_class)
            },
            "zero_division_warnings": self.zero_division_warnings,
        }
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    def write(self, path: Path) -> None:
        Path(path).write_bytes(self.to_json().encode("utf-8"))

    def csv_row(self, model: str, task: str) -> str:
        """Percent-scaled row in table order: Acc, Bal. Acc, Pre, Re, F1, Time."""
        values = (
            self.accuracy,
            self.balanced_accuracy,
            self.precision_weighted,
            self.recall_weighted,
            self.f1_weighted,
        )
        cells = ",".join(f"{100.0 * v:.2f}" for v in values)
        return f"{model},{task},{cells},{self.wall_time_seconds:.2f}"


CSV_HEADER = "model,task,acc,bal_acc,precision,recall,f1,time"


def confusion(
    y_true: np.ndarray,
    y_pred: np.ndarray,
    n_classes: int,
    class_names: Optional[Sequence[str]] = None,
) -> ConfusionMatrix:
    yt = np.asarray(y_true, dtype=np.int64)
    yp = np.asarray(y_pred, dtype=np.int64)
    if yt.shape != yp.shape:
        raise LengthMismatch(f"y_true has {yt.shape}, y_pred has {yp.shape}")
    if yt.size and (yt.min() < 0 or yt.max() >= n_classes or yp.min() < 0 or yp.max() >= n_classes):
        raise LengthMismatch("label outside [0, n_classes)")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (yt, yp), 1)
    names = tuple(class_names) if class_names else tuple(str(i) for i in range(n_classes))
    return ConfusionMatrix(counts, names)


def binary_confusion(tn: int, fp: int, fn: int, tp: int) -> ConfusionMatrix:
    """Class 1 is the positive class (row/column order: negative, positive)."""
    return ConfusionMatrix(
        np.asarray([[tn, fp], [fn, tp]], dtype=np.int64), ("negative", "positive")
    )


def metrics(cm: ConfusionMatrix, wall_time_seconds: float = 0.0) -> EvaluationReport:
    counts = cm.counts.astype(np.float64)
    total = counts.sum()
    if total <= 0:
        raise EmptyMatrix("confusion matrix has no observations")
    k = counts.shape[0]
    diag = np.diag(counts)
    support = counts.sum(axis=1)
    predicted = counts.sum(axis=0)

    warnings = 0
    precision = np.zeros(k)
    recall = np.zeros(k)
    f1 = np.zeros(k)
    for i in range(k):
        if predicted[i] > 0:
            precision[i] = diag[i] / predicted[i]
        else:
            warnings += 1
        if support[i] > 0:
            recall[i] = diag[i] / support[i]
        else:
            warnings += 1
        if precision[i] + recall[i] > 0:
            f1[i] = 2.0 * precision[i] * recall[i] / (precision[i] + recall[i])

    weights = support / total
    report = EvaluationReport(
        accuracy=float(diag.sum() / total),
        balanced_accuracy=float(recall.mean()),
        precision_weighted=float((weights * precision).sum()),
        recall_weighted=float((weights * recall).sum()),
        f1_weighted=float((weights * f1).sum()),
        per_class=[
            PerClassMetrics(float(precision[i]), float(recall[i]), float(f1[i]), int(support[i]))
            for i in range(k)
        ],
        class_names=cm.class_names,
        zero_division_warnings=warnings,
        wall_time_seconds=wall_time_seconds,
    )
    return report
