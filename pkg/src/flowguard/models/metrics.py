"""Classification metrics derived from a confusion matrix."""

from dataclasses import dataclass, field

import numpy as np

from ..errors import ArityMismatch


@dataclass
class MetricsReport:
    accuracy: float
    precision: list
    recall: list
    f1: list
    macro_f1: float
    confusion: np.ndarray  # rows: true class, cols: predicted class

    def to_dict(self):
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "macro_f1": self.macro_f1,
            "confusion": self.confusion.tolist(),
        }


def report_from_confusion(confusion):
    confusion = np.asarray(confusion, dtype=np.int64)
    total = confusion.sum()
    tp = np.diag(confusion).astype(np.float64)
    predicted = confusion.sum(axis=0).astype(np.float64)
    actual = confusion.sum(axis=1).astype(np.float64)
    # zero-support classes get 0, never NaN
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, actual, out=np.zeros_like(tp), where=actual > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom,
                   out=np.zeros_like(tp), where=denom > 0)
    return MetricsReport(
        accuracy=float(tp.sum() / total) if total else 0.0,
        precision=precision.tolist(),
        recall=recall.tolist(),
        f1=f1.tolist(),
        macro_f1=float(f1.mean()),
        confusion=confusion,
    )


def evaluate(model, test):
    """Confusion-matrix metrics; predicted label is argmax of predict_proba
    with ties broken toward the lowest class index."""
    if model.num_features != test.num_features:
        raise ArityMismatch(
            f"model expects {model.num_features} features, "
            f"dataset has {test.num_features}")
    predicted = model.predict_batch(test.X)
    k = max(model.num_classes, test.num_classes)
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (test.y, predicted), 1)
    return report_from_confusion(confusion)
