"""Per-group accuracy, loss and generalization-gap metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from groupdro.core import GroupedDataset
from groupdro.errors import InvalidArgument
from groupdro.models import ModelParams, batch_loss, batch_predict


@dataclass(frozen=True)
class GroupMetrics:
    """Metrics of one model on one dataset.

    ``average_accuracy`` is weighted by ``train_fractions`` when those were
    supplied to :func:`evaluate`, otherwise it is the plain fraction of
    correct predictions. ``mean_group_accuracy`` is always the unweighted mean
    over groups.
    """

    per_group_accuracy: np.ndarray
    per_group_loss: np.ndarray
    group_sizes: np.ndarray
    worst_group_accuracy: float
    average_accuracy: float
    mean_group_accuracy: float

    @property
    def m(self) -> int:
        return self.per_group_accuracy.size

    @property
    def worst_group(self) -> int:
        return int(np.argmin(self.per_group_accuracy))

    def binomial_std(self) -> np.ndarray:
        """sqrt(p (1 - p) / n_g) for each group's accuracy."""
        p = self.per_group_accuracy
        return np.sqrt(p * (1.0 - p) / self.group_sizes)

    def to_dict(self) -> dict:
        return {
            "per_group_accuracy": self.per_group_accuracy.tolist(),
            "per_group_loss": self.per_group_loss.tolist(),
            "group_sizes": self.group_sizes.tolist(),
            "worst_group_accuracy": self.worst_group_accuracy,
            "average_accuracy": self.average_accuracy,
            "mean_group_accuracy": self.mean_group_accuracy,
        }


@dataclass(frozen=True)
class GapReport:
    accuracy_gap: np.ndarray
    loss_gap: np.ndarray
    worst_group_accuracy_gap: float
    worst_group_loss_gap: float


def evaluate(params: ModelParams, dataset: GroupedDataset, train_fractions=None) -> GroupMetrics:
    correct = batch_predict(params, dataset.X) == dataset.y
    losses = batch_loss(params, dataset.X, dataset.y)
    acc = np.array([correct[idx].mean() for idx in dataset.group_index])
    loss = np.array([losses[idx].mean() for idx in dataset.group_index])
    if train_fractions is None:
        average = float(correct.mean())
    else:
        average = weighted_average_accuracy(acc, train_fractions)
    return GroupMetrics(
        per_group_accuracy=acc,
        per_group_loss=loss,
        group_sizes=np.array(dataset.group_sizes),
        worst_group_accuracy=float(acc.min()),
        average_accuracy=average,
        mean_group_accuracy=float(acc.mean()),
    )


def weighted_average_accuracy(metrics, train_fractions) -> float:
    """Group accuracies averaged with the training group proportions."""
    acc = metrics.per_group_accuracy if isinstance(metrics, GroupMetrics) else np.asarray(metrics, dtype=np.float64)
    w = np.asarray(train_fractions, dtype=np.float64).reshape(-1)
    if w.shape != acc.shape:
        raise InvalidArgument(f"{w.size} fractions for {acc.size} groups")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise InvalidArgument("fractions must lie on the simplex")
    return float(np.dot(w, acc))


def gap_report(train: GroupMetrics, test: GroupMetrics) -> GapReport:
    """Train-minus-test accuracy per group and the worst-group loss gap.

    The loss gap is worst-group test loss minus worst-group train loss and
    may be negative.
    """
    if train.m != test.m:
        raise InvalidArgument(f"train has {train.m} groups, test has {test.m}")
    acc_gap = train.per_group_accuracy - test.per_group_accuracy
    loss_gap = test.per_group_loss - train.per_group_loss
    return GapReport(
        accuracy_gap=acc_gap,
        loss_gap=loss_gap,
        worst_group_accuracy_gap=float(acc_gap.max()),
        worst_group_loss_gap=float(test.per_group_loss.max() - train.per_group_loss.max()),
    )
