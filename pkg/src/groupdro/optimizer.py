"""Stochastic training for ERM, group upweighting and online group DRO.

All three modes share one update. Each step draws a group ``g`` from a
sampling distribution ``s``, then an example uniformly from ``g``. The
example's gradient is weighted by ``q_g / s_g``, which makes the batch
gradient an unbiased estimate of ``sum_g q_g grad L_g``:

* ``erm``: ``q = s = n_g / n`` (plain uniform-example SGD);
* ``upweight``: ``q = s = 1/m`` (equal-probability group sampling);
* ``group_dro``: ``s = 1/m`` and ``q`` follows exponentiated-gradient ascent
  on the observed group losses, updated before the parameter step.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from groupdro.analysis import evaluate
from groupdro.core import Example, GroupedDataset, GroupWeights, group_fractions, uniform_weights
from groupdro.errors import ConfigError, InvalidArgument, NumericalError
from groupdro.models import Arch, ModelParams, _trusted, init_params, loss_and_backward
from groupdro.objectives import group_adjustments

MODES = ("erm", "upweight", "group_dro")
VARIANTS = ("per_example", "minibatch")
DISTRIBUTIONS = ("uniform", "proportional")


@dataclass
class OptimizerConfig:
    """Hyperparameters of one training run.

    ``q_init`` and ``group_sampling`` only apply to ``group_dro`` and default
    to uniform. ``eta_q = 0`` freezes ``q`` at its initial value.
    """

    mode: str = "group_dro"
    variant: str = "minibatch"
    eta_theta: float = 0.01
    eta_q: float = 0.01
    momentum: float = 0.9
    lam: float = 0.0
    adjustment_c: float = 0.0
    batch_size: int = 64
    epochs: int = 10
    seed: int = 0
    q_init: str | None = None
    group_sampling: str | None = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.mode not in MODES:
            raise InvalidArgument(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.variant not in VARIANTS:
            raise InvalidArgument(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not self.eta_theta >= 0:
            raise InvalidArgument("eta_theta must be nonnegative")
        if not self.eta_q >= 0:
            raise InvalidArgument("eta_q must be nonnegative")
        if not 0 <= self.momentum < 1:
            raise InvalidArgument("momentum must lie in [0, 1)")
        if not self.lam >= 0:
            raise InvalidArgument("lambda must be nonnegative")
        if not self.adjustment_c >= 0:
            raise InvalidArgument("adjustment C must be nonnegative")
        if self.batch_size < 1 or self.epochs < 1:
            raise InvalidArgument("batch_size and epochs must be positive")
        for name in ("q_init", "group_sampling"):
            value = getattr(self, name)
            if value is not None and value not in DISTRIBUTIONS:
                raise InvalidArgument(f"{name} must be one of {DISTRIBUTIONS}")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["lambda"] = out.pop("lam")
        out["C"] = out.pop("adjustment_c")
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "OptimizerConfig":
        data = dict(data)
        if "lambda" in data:
            data["lam"] = data.pop("lambda")
        if "C" in data:
            data["adjustment_c"] = data.pop("C")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown optimizer field(s): {sorted(unknown)}")
        return cls(**data)


def _eg(q: np.ndarray, increments: np.ndarray) -> np.ndarray:
    # multiplicative update in log space; never overflows
    with np.errstate(divide="ignore"):
        logits = np.log(q) + increments
    logits -= logits.max()
    out = np.exp(logits)
    return out / out.sum()


def eg_update(q, g: int, observed_loss: float, eta_q: float, adjustment: float = 0.0) -> GroupWeights:
    """Scale ``q_g`` by ``exp(eta_q * (loss + adjustment))`` and renormalize."""
    qa = q.q if isinstance(q, GroupWeights) else np.asarray(q, dtype=np.float64)
    if not math.isfinite(observed_loss):
        raise NumericalError("non-finite loss in weight update", group=g, loss=observed_loss)
    if not 0 <= g < qa.size:
        raise InvalidArgument(f"group {g} out of range for m={qa.size}")
    inc = np.zeros(qa.size)
    inc[g] = eta_q * (observed_loss + adjustment)
    return GroupWeights(_eg(qa, inc))


def sgd_momentum_update(theta, velocity, data_grad, lam, eta, momentum):
    """Heavy-ball step on data gradient plus the gradient of ``lam * |theta|^2``."""
    effective = data_grad + 2.0 * lam * theta
    velocity = momentum * velocity + effective
    return theta - eta * velocity, velocity


class GroupSampler:
    """Draws a group from ``probs`` then an example uniformly within it."""

    def __init__(self, dataset: GroupedDataset, probs, rng: np.random.Generator):
        self.probs = np.asarray(probs, dtype=np.float64)
        self.rng = rng
        self.sizes = np.asarray(dataset.group_sizes)
        self.order = np.concatenate(dataset.group_index)
        self.starts = np.concatenate([[0], np.cumsum(self.sizes)[:-1]])

    def draw_groups(self, size: int) -> np.ndarray:
        return self.rng.choice(self.probs.size, size=size, p=self.probs)

    def draw(self, size: int) -> np.ndarray:
        groups = self.draw_groups(size)
        within = np.floor(self.rng.random(size) * self.sizes[groups]).astype(np.int64)
        return self.order[self.starts[groups] + within]


@dataclass
class TrainState:
    theta: np.ndarray
    q: np.ndarray
    velocity: np.ndarray


def _step(state, arch, X, y, g, cfg, q_learned, adjustments, sample_probs):
    """One update on a batch of sampled rows. Mutates and returns ``state``."""
    # overflow is caught by the finiteness checks below, so silence numpy's warning
    with np.errstate(over="ignore", invalid="ignore"):
        losses, backward = loss_and_backward(_trusted(state.theta, arch), X, y)
    if not np.all(np.isfinite(losses)):
        raise NumericalError("non-finite training loss", max_abs_theta=float(np.abs(state.theta).max()))
    if q_learned and cfg.eta_q > 0:
        present = np.unique(g)
        inc = np.zeros(state.q.size)
        for gid in present:
            inc[gid] = cfg.eta_q * (losses[g == gid].mean() + adjustments[gid])
        state.q = _eg(state.q, inc)
    weights = state.q[g] / sample_probs[g] / len(y)
    data_grad = backward(weights)
    state.theta, state.velocity = sgd_momentum_update(
        state.theta, state.velocity, data_grad, cfg.lam, cfg.eta_theta, cfg.momentum
    )
    if not np.all(np.isfinite(state.theta)):
        raise NumericalError("non-finite parameters after update", eta_theta=cfg.eta_theta, lam=cfg.lam)
    return state


def dro_step(state: TrainState, sample: Example, config: OptimizerConfig, group_sizes, arch: Arch,
             sampling_probs=None) -> TrainState:
    """One per-example group DRO update (weights first, then parameters).

    ``sampling_probs`` defaults to uniform, giving the parameter step
    ``eta_theta * m * q_g * grad``.
    """
    m = len(group_sizes)
    s = np.full(m, 1.0 / m) if sampling_probs is None else np.asarray(sampling_probs, dtype=np.float64)
    new = TrainState(np.array(state.theta, dtype=np.float64), np.array(state.q, dtype=np.float64),
                     np.array(state.velocity, dtype=np.float64))
    adjustments = group_adjustments(group_sizes, config.adjustment_c)
    X = np.atleast_2d(np.asarray(sample.features, dtype=np.float64))
    return _step(new, arch, X, np.array([sample.label]), np.array([sample.group]),
                 config, True, adjustments, s)


@dataclass
class GroupStats:
    loss: np.ndarray
    acc: np.ndarray

    @property
    def worst_acc(self) -> float:
        return float(self.acc.min())


@dataclass
class Checkpoint:
    index: int
    epoch: int
    step: int
    q: np.ndarray
    splits: dict
    theta: np.ndarray | None = None
    theta_bar: np.ndarray | None = None


@dataclass
class TrainHistory:
    checkpoints: list = field(default_factory=list)
    theta_bar: np.ndarray | None = None
    steps: int = 0

    def __len__(self):
        return len(self.checkpoints)

    def worst_group_acc(self, split: str) -> np.ndarray:
        try:
            return np.array([c.splits[split].worst_acc for c in self.checkpoints])
        except KeyError:
            raise InvalidArgument(f"history has no {split!r} metrics") from None

    def to_csv(self, stream=None) -> str:
        """Rows ``checkpoint,split,group,loss,acc,q_g``; floats via repr for exactness."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["checkpoint", "split", "group", "loss", "acc", "q_g"])
        for c in self.checkpoints:
            for split, stats in c.splits.items():
                for gid in range(stats.loss.size):
                    writer.writerow([c.index, split, gid, repr(float(stats.loss[gid])),
                                     repr(float(stats.acc[gid])), repr(float(c.q[gid]))])
        text = buf.getvalue()
        if stream is not None:
            stream.write(text)
        return text

    def summary(self) -> dict:
        rows = []
        for c in self.checkpoints:
            row = {"checkpoint": c.index, "epoch": c.epoch, "step": c.step, "q": c.q.tolist()}
            for split, stats in c.splits.items():
                row[f"worst_group_{split}_acc"] = stats.worst_acc
                row[f"{split}_group_acc"] = stats.acc.tolist()
                row[f"{split}_group_loss"] = stats.loss.tolist()
            rows.append(row)
        out = {"steps": self.steps, "checkpoints": rows}
        if self.checkpoints and "val" in self.checkpoints[0].splits:
            out["best_checkpoint"] = early_stop_select(self)
        return out


def early_stop_select(history: TrainHistory) -> int:
    """Checkpoint with the best worst-group validation accuracy (earliest on ties)."""
    if not history.checkpoints:
        raise InvalidArgument("history is empty")
    return int(np.argmax(history.worst_group_acc("val")))


def mode_distributions(config: OptimizerConfig, dataset: GroupedDataset):
    """Initial ``q`` and group sampling probabilities for ``config.mode``."""
    fractions = group_fractions(dataset)
    uniform = uniform_weights(dataset.m).q
    pick = {"uniform": uniform, "proportional": fractions}
    if config.mode == "erm":
        return fractions, fractions
    if config.mode == "upweight":
        return uniform, uniform
    return pick[config.q_init or "uniform"], pick[config.group_sampling or "uniform"]


def train(config: OptimizerConfig, train_set: GroupedDataset, val_set: GroupedDataset | None,
          arch: Arch, eval_sets: dict | None = None, snapshot_every: int = 1,
          init: ModelParams | None = None, on_step=None):
    """Run ``config`` on ``train_set``; returns ``(final ModelParams, TrainHistory)``.

    A checkpoint is recorded after every epoch (``n`` steps in the
    per-example variant, ``ceil(n / batch_size)`` steps otherwise) with
    per-group metrics on train, val and every entry of ``eval_sets``.
    Parameter snapshots are kept every ``snapshot_every`` checkpoints
    (0 keeps none). ``on_step(t, theta)`` is called after each step.
    """
    config.validate()
    n = train_set.n
    if arch.d != train_set.d or arch.K < train_set.K:
        raise InvalidArgument(f"{arch} does not fit data with d={train_set.d}, K={train_set.K}")
    sets = {"train": train_set}
    if val_set is not None:
        sets["val"] = val_set
    sets.update(eval_sets or {})
    for name, ds in sets.items():
        if ds.m != train_set.m or ds.d != train_set.d:
            raise InvalidArgument(f"{name} set has m={ds.m}, d={ds.d}; train has m={train_set.m}, d={train_set.d}")
    if config.variant == "per_example":
        batch, steps_per_epoch = 1, n
    else:
        if config.batch_size > n:
            raise InvalidArgument(f"batch_size {config.batch_size} exceeds n={n}")
        batch, steps_per_epoch = config.batch_size, math.ceil(n / config.batch_size)

    params = init if init is not None else init_params(arch, config.seed)
    q0, sample_probs = mode_distributions(config, train_set)
    state = TrainState(np.array(params.theta), np.array(q0), np.zeros(arch.n_params))
    q_learned = config.mode == "group_dro"
    adjustments = group_adjustments(train_set.group_sizes, config.adjustment_c if q_learned else 0.0)
    rng = np.random.default_rng(config.seed)
    sampler = GroupSampler(train_set, sample_probs, rng)
    history = TrainHistory()
    theta_bar = np.zeros(arch.n_params)
    t = 0
    for epoch in range(1, config.epochs + 1):
        for _ in range(steps_per_epoch):
            idx = sampler.draw(batch)
            try:
                _step(state, arch, train_set.X[idx], train_set.y[idx], train_set.g[idx],
                      config, q_learned, adjustments, sample_probs)
            except NumericalError as exc:
                exc.diagnostics.update(epoch=epoch, step=t + 1)
                raise
            t += 1
            theta_bar += (state.theta - theta_bar) / t
            if on_step is not None:
                on_step(t, state.theta)
        current = ModelParams(state.theta, arch)
        splits = {}
        for name, ds in sets.items():
            metrics = evaluate(current, ds)
            splits[name] = GroupStats(metrics.per_group_loss, metrics.per_group_accuracy)
        keep = snapshot_every > 0 and (epoch - 1) % snapshot_every == 0
        history.checkpoints.append(Checkpoint(
            index=epoch - 1, epoch=epoch, step=t, q=state.q.copy(), splits=splits,
            theta=state.theta.copy() if keep else None,
            theta_bar=theta_bar.copy() if keep else None,
        ))
    history.theta_bar = theta_bar.copy()
    history.steps = t
    return ModelParams(state.theta, arch), history
