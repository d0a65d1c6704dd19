import pytest

from groupdro.studies import (
    Outcome,
    SpuriousStudy,
    interpolating_verdict,
    run_study,
    strong_regularization_verdict,
    upweighting_verdict,
)


def outcome(regime, mode, seed, worst, avg=0.95, train_worst=1.0, es_worst=None):
    es_worst = worst if es_worst is None else es_worst
    return Outcome(regime, mode, seed, train_worst, worst, avg, 0, es_worst, avg)


def test_interpolating_verdict_counts_seeds():
    good = [outcome("weak", m, s, 0.20) for s in range(5) for m in ("erm", "group_dro")]
    assert interpolating_verdict(good).passed
    # one seed where DRO is far better is tolerated, two are not
    one_off = good[:-1] + [outcome("weak", "group_dro", 4, 0.40)]
    assert interpolating_verdict(one_off).passed
    two_off = [o for o in one_off if not (o.mode == "group_dro" and o.seed == 3)] + [outcome("weak", "group_dro", 3, 0.40)]
    assert not interpolating_verdict(two_off).passed


def test_interpolating_verdict_requires_erm_to_fit():
    outcomes = [outcome("weak", m, s, 0.20, train_worst=0.98 if s == 0 else 1.0)
                for s in range(5) for m in ("erm", "group_dro")]
    assert not interpolating_verdict(outcomes).passed


def test_interpolating_verdict_requires_a_generalization_gap():
    outcomes = [outcome("weak", m, s, 0.85) for s in range(5) for m in ("erm", "group_dro")]
    assert not interpolating_verdict(outcomes).passed


def test_strong_verdict_checks_average_accuracy():
    ok = [outcome("strong", "erm", s, 0.05) for s in range(5)] + [outcome("strong", "group_dro", s, 0.30)
                                                                  for s in range(5)]
    assert strong_regularization_verdict(ok).passed
    costly = ok[:5] + [outcome("strong", "group_dro", s, 0.30, avg=0.85) for s in range(5)]
    assert not strong_regularization_verdict(costly).passed


@pytest.mark.parametrize("dro_mean, expected", [(0.49, True), (0.47, False)])
def test_upweighting_verdict_margin(dro_mean, expected):
    outcomes = ([outcome("strong", "erm", s, 0.0, es_worst=0.05) for s in range(5)]
                + [outcome("strong", "upweight", s, 0.0, es_worst=0.50) for s in range(5)]
                + [outcome("strong", "group_dro", s, 0.0, es_worst=dro_mean) for s in range(5)])
    assert upweighting_verdict(outcomes).passed is expected


def test_missing_mode_is_an_error():
    with pytest.raises(ValueError):
        upweighting_verdict([outcome("strong", "erm", 0, 0.1)])


def test_run_study_small():
    spec = dict(d_core=2, mu_core=1.0, sigma=1.0, n_total=200, p_align=0.9, d_spu=1, mu_spu=3.0, d_noise=5)
    study = SpuriousStudy(dataset=spec, hidden=8, weak_epochs=2, strong_epochs=2, n_val=100, n_test=100,
                          seeds=(0, 1))
    seen = []
    outcomes = run_study(study, progress=seen.append)
    assert outcomes == seen
    assert [(o.regime, o.mode) for o in outcomes[:5]] == [
        ("weak", "erm"), ("weak", "group_dro"), ("strong", "erm"), ("strong", "upweight"), ("strong", "group_dro")]
    assert len(outcomes) == 10
    for o in outcomes:
        assert 0 <= o.test_worst <= o.test_avg + 1e-12
        assert 0 <= o.es_epoch < 2
    assert run_study(study) == outcomes
