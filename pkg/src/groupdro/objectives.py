"""Average, worst-group, group-adjusted and reweighted risks.

All values are data losses only; the l2 penalty used during training is
never included here.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from groupdro.core import GroupedDataset, GroupWeights
from groupdro.errors import InvalidArgument
from groupdro.models import ModelParams, batch_loss


@dataclass(frozen=True)
class RiskReport:
    per_group_loss: np.ndarray
    value: float
    argmax_group: int | None = None
    adjusted: np.ndarray | None = None

    def to_dict(self) -> dict:
        out = {
            "value": float(self.value),
            "argmax_group": self.argmax_group,
            "per_group_loss": [float(v) for v in self.per_group_loss],
        }
        if self.adjusted is not None:
            out["adjusted"] = [float(v) for v in self.adjusted]
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def group_mean_losses(params: ModelParams, dataset: GroupedDataset) -> np.ndarray:
    """Mean loss within each group, in group order."""
    losses = batch_loss(params, dataset.X, dataset.y)
    return np.array([losses[idx].mean() for idx in dataset.group_index])


def erm_risk(params: ModelParams, dataset: GroupedDataset) -> float:
    return float(batch_loss(params, dataset.X, dataset.y).mean())


def _argmax_first(values) -> int:
    # np.argmax returns the first maximal index
    return int(np.argmax(values))


def worst_group_risk(params: ModelParams, dataset: GroupedDataset) -> RiskReport:
    per_group = group_mean_losses(params, dataset)
    g = _argmax_first(per_group)
    return RiskReport(per_group, float(per_group[g]), g)


def adjusted_worst_group_risk(params: ModelParams, dataset: GroupedDataset, C: float) -> RiskReport:
    """Worst group after adding ``C / sqrt(n_g)`` to each group's loss."""
    if C < 0:
        raise InvalidArgument("C must be nonnegative")
    per_group = group_mean_losses(params, dataset)
    adjusted = per_group + group_adjustments(dataset.group_sizes, C)
    g = _argmax_first(adjusted)
    return RiskReport(per_group, float(adjusted[g]), g, adjusted)


def group_adjustments(group_sizes, C: float) -> np.ndarray:
    if C < 0:
        raise InvalidArgument("C must be nonnegative")
    sizes = np.asarray(group_sizes, dtype=np.float64)
    return C / np.sqrt(sizes)


def mixture_risk(params: ModelParams, q, dataset: GroupedDataset) -> float:
    q = q.q if isinstance(q, GroupWeights) else np.asarray(q, dtype=np.float64)
    if q.shape != (dataset.m,):
        raise InvalidArgument(f"q has {q.size} entries, dataset has m={dataset.m}")
    return float(np.dot(q, group_mean_losses(params, dataset)))


def weighted_risk(params: ModelParams, w, dataset: GroupedDataset) -> float:
    """(1/n) sum_i w[g_i] * loss_i."""
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    if w.shape != (dataset.m,):
        raise InvalidArgument(f"w has {w.size} entries, dataset has m={dataset.m}")
    if np.any(w <= 0):
        raise InvalidArgument("weights must be positive")
    losses = batch_loss(params, dataset.X, dataset.y)
    return float(np.mean(w[dataset.g] * losses))
