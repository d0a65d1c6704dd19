"""Spurious-correlation study comparing ERM, upweighting and group DRO.

Two regimes on the synthetic task: a nearly unregularized network that
interpolates the training set, and the same network under a strong l2
penalty. Each (regime, mode, seed) is trained once; outcomes record both
the final-epoch model and the early-stopped checkpoint (best worst-group
validation accuracy).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from groupdro.core import group_fractions
from groupdro.datagen import SyntheticSpec, generate_splits
from groupdro.models import Arch
from groupdro.optimizer import OptimizerConfig, early_stop_select, train

SPURIOUS_SPEC = dict(d_core=2, mu_core=1.0, sigma=1.0, n_total=1000, p_align=0.95,
                     d_spu=1, mu_spu=3.0, d_noise=1000)


@dataclass(frozen=True)
class SpuriousStudy:
    """Settings for the two-regime comparison.

    ``dataset`` is a synthetic spec without its seed; run ``s`` uses seed
    ``s`` for both the data draw and training.
    """

    dataset: dict = field(default_factory=lambda: dict(SPURIOUS_SPEC))
    hidden: int = 100
    eta_theta: float = 0.05
    eta_q: float = 0.01
    momentum: float = 0.9
    batch_size: int = 100
    weak_lambda: float = 1e-4
    weak_epochs: int = 150
    strong_lambda: float = 0.3
    strong_epochs: int = 60
    n_val: int = 1000
    n_test: int = 2000
    seeds: tuple = (0, 1, 2, 3, 4)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Outcome:
    """Accuracies of one trained model, at the last epoch and the early-stopped one."""

    regime: str
    mode: str
    seed: int
    train_worst: float
    test_worst: float
    test_avg: float
    es_epoch: int
    es_test_worst: float
    es_test_avg: float


@dataclass(frozen=True)
class Verdict:
    passed: bool
    measured: str


def _run(study: SpuriousStudy, regime: str, mode: str, seed: int, splits) -> Outcome:
    train_set, val_set, test_set = splits
    lam, epochs = ((study.weak_lambda, study.weak_epochs) if regime == "weak"
                   else (study.strong_lambda, study.strong_epochs))
    cfg = OptimizerConfig(mode=mode, eta_theta=study.eta_theta, eta_q=study.eta_q, momentum=study.momentum,
                          lam=lam, batch_size=study.batch_size, epochs=epochs, seed=seed)
    _, history = train(cfg, train_set, val_set, Arch.mlp1(train_set.d, study.hidden),
                       eval_sets={"test": test_set}, snapshot_every=0)
    # test split is group-balanced; average accuracy is taken under the training mix
    frac = group_fractions(train_set)
    last = history.checkpoints[-1]
    best_epoch = early_stop_select(history)
    best = history.checkpoints[best_epoch]
    return Outcome(
        regime, mode, seed,
        train_worst=last.splits["train"].worst_acc,
        test_worst=last.splits["test"].worst_acc,
        test_avg=float(frac @ last.splits["test"].acc),
        es_epoch=best_epoch,
        es_test_worst=best.splits["test"].worst_acc,
        es_test_avg=float(frac @ best.splits["test"].acc),
    )


def run_study(study: SpuriousStudy, progress=None) -> list:
    """Train every (regime, mode, seed); returns a list of ``Outcome``.

    The weak regime runs ERM and group DRO, the strong regime adds upweighting.
    """
    outcomes = []
    for seed in study.seeds:
        spec = SyntheticSpec(seed=seed, **study.dataset)
        splits = generate_splits(spec, study.n_val, study.n_test)
        for regime, modes in (("weak", ("erm", "group_dro")), ("strong", ("erm", "upweight", "group_dro"))):
            for mode in modes:
                outcome = _run(study, regime, mode, seed, splits)
                outcomes.append(outcome)
                if progress is not None:
                    progress(outcome)
    return outcomes


def _pick(outcomes, regime, mode):
    chosen = sorted((o for o in outcomes if o.regime == regime and o.mode == mode), key=lambda o: o.seed)
    if not chosen:
        raise ValueError(f"no outcomes for {mode} in the {regime} regime")
    return chosen


def _fmt(values) -> str:
    return "[" + ", ".join(f"{v:.3f}" for v in values) + "]"


def _needed(n_seeds: int) -> int:
    # "4 of 5" scaled to the number of seeds actually run
    return int(np.ceil(0.8 * n_seeds))


def interpolating_verdict(outcomes) -> Verdict:
    """Weak penalty: ERM and DRO both fit every training group and generalize alike."""
    erm, dro = _pick(outcomes, "weak", "erm"), _pick(outcomes, "weak", "group_dro")
    fits = min(o.train_worst for o in erm) >= 0.99
    per_seed = [abs(d.test_worst - e.test_worst) <= 0.05
                and e.test_avg - e.test_worst >= 0.15 and d.test_avg - d.test_worst >= 0.15
                for e, d in zip(erm, dro)]
    passed = fits and sum(per_seed) >= _needed(len(erm))
    measured = (f"ERM train worst {_fmt(o.train_worst for o in erm)}; test worst ERM {_fmt(o.test_worst for o in erm)} "
                f"DRO {_fmt(o.test_worst for o in dro)}; avg ERM {_fmt(o.test_avg for o in erm)} "
                f"DRO {_fmt(o.test_avg for o in dro)}; {sum(per_seed)}/{len(erm)} seeds ok")
    return Verdict(passed, measured)


def strong_regularization_verdict(outcomes) -> Verdict:
    """Strong penalty, final models: DRO beats ERM on the worst group without losing average accuracy."""
    erm, dro = _pick(outcomes, "strong", "erm"), _pick(outcomes, "strong", "group_dro")
    per_seed = [d.test_worst - e.test_worst >= 0.10 and abs(d.test_avg - e.test_avg) <= 0.05
                for e, d in zip(erm, dro)]
    passed = sum(per_seed) >= _needed(len(erm))
    measured = (f"test worst ERM {_fmt(o.test_worst for o in erm)} DRO {_fmt(o.test_worst for o in dro)}; "
                f"avg ERM {_fmt(o.test_avg for o in erm)} DRO {_fmt(o.test_avg for o in dro)}; "
                f"{sum(per_seed)}/{len(erm)} seeds ok")
    return Verdict(passed, measured)


def upweighting_verdict(outcomes) -> Verdict:
    """Strong penalty, early-stopped models: UW at least matches ERM and DRO keeps up with UW."""
    erm, uw, dro = (_pick(outcomes, "strong", m) for m in ("erm", "upweight", "group_dro"))
    uw_beats_erm = sum(u.es_test_worst >= e.es_test_worst for u, e in zip(uw, erm))
    dro_mean = float(np.mean([o.es_test_worst for o in dro]))
    uw_mean = float(np.mean([o.es_test_worst for o in uw]))
    passed = uw_beats_erm >= _needed(len(erm)) and dro_mean >= uw_mean - 0.02
    measured = (f"early-stopped test worst ERM {_fmt(o.es_test_worst for o in erm)} "
                f"UW {_fmt(o.es_test_worst for o in uw)} DRO {_fmt(o.es_test_worst for o in dro)}; "
                f"UW >= ERM on {uw_beats_erm}/{len(erm)}; mean DRO {dro_mean:.3f} vs UW {uw_mean:.3f}")
    return Verdict(passed, measured)
