"""Classification metrics shared by training (validation) and evaluation."""

from typing import List, Sequence

import numpy as np
from pydantic import BaseModel, Field
from sklearn.metrics import confusion_matrix, precision_recall_fscore_support

from .error_handler import ValidationError


class Metrics(BaseModel):
    """Accuracy, per-class precision/recall/F1 and the confusion matrix (rows = true class)."""

    n: int = Field(..., description="Number of evaluated users")
    num_classes: int = Field(..., description="K")
    accuracy: float = Field(..., description="trace(confusion) / n")
    f1: float = Field(..., description="Positive-class F1 when K=2, macro F1 otherwise")
    macro_f1: float
    weighted_f1: float
    precision: List[float]
    recall: List[float]
    f1_per_class: List[float]
    confusion: List[List[int]]


def compute_metrics(y_true: Sequence[int], y_pred: Sequence[int], num_classes: int) -> Metrics:
    """Metrics from true and predicted class indices.

    Raises:
        ValidationError: on empty input or mismatched lengths.
    """
    y_true = np.asarray(y_true, dtype=int)
    y_pred = np.asarray(y_pred, dtype=int)
    if y_true.size == 0:
        raise ValidationError("評価データが空です")
    if y_true.shape != y_pred.shape:
        raise ValidationError("正解と予測の長さが一致しません")

    labels = list(range(num_classes))
    matrix = confusion_matrix(y_true, y_pred, labels=labels)
    precision, recall, f1, _ = precision_recall_fscore_support(
        y_true, y_pred, labels=labels, zero_division=0
    )
    support = matrix.sum(axis=1)
    macro_f1 = float(np.mean(f1))
    weighted_f1 = float(np.average(f1, weights=support)) if support.sum() else 0.0
    return Metrics(
        n=int(y_true.size),
        num_classes=num_classes,
        accuracy=float(np.trace(matrix) / y_true.size),
        f1=float(f1[1]) if num_classes == 2 else macro_f1,
        macro_f1=macro_f1,
        weighted_f1=weighted_f1,
        precision=[float(v) for v in precision],
        recall=[float(v) for v in recall],
        f1_per_class=[float(v) for v in f1],
        confusion=matrix.astype(int).tolist(),
    )
