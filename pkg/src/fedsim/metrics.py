"""Confusion matrices, accuracy / F1 reports and convergence summaries."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Federation
from .numerics import MlpConfig, predict, unflatten


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # rows = true class, cols = predicted class

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class EvalReport:
    accuracy: float
    macro_f1: float
    weighted_f1: float
    per_class_f1: tuple[float, ...]


def confusion(preds, truths, num_classes: int) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=np.int64)
    truths = np.asarray(truths, dtype=np.int64)
    if preds.shape != truths.shape:
        raise MetricError("preds and truths must have equal length")
    if preds.size and (min(preds.min(), truths.min()) < 0 or max(preds.max(), truths.max()) >= num_classes):
        raise MetricError(f"class indices must lie in [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (truths, preds), 1)
    return ConfusionMatrix(counts)


def report(cm: ConfusionMatrix) -> EvalReport:
    """Accuracy, macro F1 and support-weighted F1, all in percent.

    A class with P + R = 0 gets F1 = 0. Macro F1 averages over every class of
    the matrix; weighted F1 weights by true-class support, so absent classes
    carry no weight there.
    """
    counts = cm.counts.astype(np.float64)
    total = counts.sum()
    if total <= 0:
        raise MetricError("confusion matrix is empty")
    tp = np.diag(counts)
    support = counts.sum(axis=1)
    predicted = counts.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(predicted > 0, tp / predicted, 0.0)
        recall = np.where(support > 0, tp / support, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2.0 * precision * recall / denom, 0.0)
    return EvalReport(
        accuracy=100.0 * float(tp.sum() / total),
        macro_f1=100.0 * float(f1.mean()),
        weighted_f1=100.0 * float((support / total) @ f1),
        per_class_f1=tuple(float(v) * 100.0 for v in f1),
    )


def predictions_on(weights: np.ndarray, fed: Federation, model_config: MlpConfig,
                   view: str = "test") -> tuple[np.ndarray, np.ndarray]:
    model = unflatten(weights, model_config)
    preds, truths = [], []
    for ds in fed.clients:
        x, y = ds.view(view)
        preds.append(predict(model, x))
        truths.append(y)
    return np.concatenate(preds), np.concatenate(truths)


def global_eval(weights: np.ndarray, fed: Federation, model_config: MlpConfig) -> EvalReport:
    """Report over the union of every client's test view."""
    preds, truths = predictions_on(weights, fed, model_config)
    return report(confusion(preds, truths, fed.num_classes))


def rounds_to_threshold(trace: Sequence, threshold: float) -> int | None:
    """First traced round whose global accuracy reaches ``threshold`` percent."""
    for entry in trace:
        if entry.global_acc >= threshold:
            return entry.round
    return None
