import csv
import math
from datetime import timedelta

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poolid.data import DatasetSplit, make_window_batch
from poolid.hyperopt import (CvPlan, SearchError, TrialResult, lss_space, make_cv_plan, nlarx_config, nlarx_space,
                             read_ledger, run_search, run_trial, sample_trials, select_best)

from conftest import T0, make_frame

FAST_LSS = lss_space(refine_max_nfev=5).restrict(focus=("prediction",), block_horizon=(24,), n_x=(2, 3))
FAST_NLARX = nlarx_space(epochs=2, patience=2, train_stride=8, val_stride=8).restrict(
    layers=(1,), units=(8,), horizon=(3,), l2=(0.0, 1e-4), learning_rate=(1e-3, 1e-2), batch_size=(32, 64))


def _sections(n_sections, length=300, gap=10):
    sp = DatasetSplit()
    rng = np.random.default_rng(0)
    t = 0
    for i in range(n_sections):
        f = make_frame(rng.normal(size=(length, 3)), n_out=1, start=T0 + timedelta(minutes=t))
        sp.train_sections.append((f"train_{i}", f))
        t += length + gap
    return sp


def _intervals(frames):
    return [(f.start_time, f.time_at(f.n_samples - 1)) for f in frames]


def _disjoint(a, b):
    return all(x1 < y0 or y1 < x0 for x0, x1 in a for y0, y1 in b)


# ---------------------------------------------------------------- plans

def test_rotation_four_sections_four_folds():
    plan = make_cv_plan(_sections(4), 4)
    vals = [va for _, va in plan.folds]
    assert sorted(l for va in vals for l in va) == [f"train_{i}" for i in range(4)]
    assert all(len(va) == 1 for va in vals)
    for tr, va in plan.folds:
        assert set(tr) | set(va) == set(plan.sections) and not set(tr) & set(va)


@pytest.mark.parametrize("n,k", [(3, 3), (7, 4), (12, 5), (2, 4)])
def test_validation_sets_pairwise_disjoint(n, k):
    plan = make_cv_plan(_sections(n, length=900), k)
    vals = [set(va) for _, va in plan.folds]
    assert len(vals) == k
    for i in range(k):
        for j in range(i + 1, k):
            assert not vals[i] & vals[j]
    assert set().union(*vals) == set(plan.sections)


def test_insufficient_data():
    with pytest.raises(SearchError):
        make_cv_plan(_sections(1, length=300), 4)
    with pytest.raises(SearchError):
        make_cv_plan(_sections(4), 1)


def test_no_window_in_both_train_and_validation():
    plan = make_cv_plan(_sections(2, length=800), 4)  # forces section halving
    for i in range(len(plan.folds)):
        tr, va = plan.fold_frames(i)

        def rows(frames):
            out = set()
            for f in frames:
                b = make_window_batch(f, 20, 48)
                base = int((f.start_time - T0).total_seconds() // 60)
                for a in b.anchors:
                    out.update(range(base + a - 19, base + a + 49))
            return out
        assert not rows(tr) & rows(va)


def test_suite_plan_excludes_test_and_scenarios(small_suite):
    split, _ = small_suite
    plan = make_cv_plan(split, 4)
    held = _intervals([f for _, f in split.test_sections + split.scenario_sections])
    assert _disjoint(_intervals(plan.sections.values()), held)
    for i in range(4):
        tr, va = plan.fold_frames(i)
        assert _disjoint(_intervals(tr), _intervals(va))


# ---------------------------------------------------------------- sampling

@settings(max_examples=30, deadline=None)
@given(st.integers(1, 40), st.integers(0, 2**31 - 1), st.booleans())
def test_samples_within_domain_and_reproducible(budget, seed, lags):
    space = nlarx_space(lags=lags)
    trials = sample_trials(space, budget, seed)
    assert len(trials) == budget and all(space.contains(t) for t in trials)
    assert trials == sample_trials(space, budget, seed)
    assert trials[:5] == sample_trials(space, min(budget, 5), seed)
    assert all(isinstance(t["batch_size"], int) for t in trials)


def test_grid_is_enumerated_before_repeating():
    trials = sample_trials(lss_space(), 36, 3)
    assert len({tuple(sorted(t.items())) for t in trials}) == 36


def test_space_validation():
    with pytest.raises(SearchError):
        nlarx_space().restrict(units=(7,))
    with pytest.raises(SearchError):
        nlarx_space().restrict(learning_rate=(1e-6, 1e-3))
    with pytest.raises(SearchError):
        lss_space().restrict(bogus=(1,))
    with pytest.raises(SearchError):
        sample_trials(lss_space(), 0, 0)
    assert nlarx_config({"layers": 2, "units": 16, "epochs": 3}, 10, 2).hidden_layers == (16, 16)


# ---------------------------------------------------------------- selection

def test_planted_best_and_ties():
    trials = [TrialResult(0, {"a": 1}, [1.0], 1.0, 10), TrialResult(1, {"a": 2}, [0.0], 0.0, 500),
              TrialResult(2, {"a": 3}, [math.inf], math.inf, 1)]
    assert select_best(trials).trial_id == 1
    tied = [TrialResult(0, {"a": 2}, [1.0], 1.0, 10), TrialResult(1, {"a": 1}, [1.0], 1.0, 10),
            TrialResult(2, {"a": 0}, [1.0], 1.0, 20)]
    assert select_best(tied).trial_id == 1
    with pytest.raises(SearchError):
        select_best([])


@pytest.fixture(scope="module")
def plan(small_suite):
    return make_cv_plan(small_suite[0], 3)


def test_budget_one_returns_that_config(plan):
    res = run_search(FAST_LSS, plan, 1, seed=5)
    assert len(res.trials) == 1 and res.best is res.trials[0]
    assert res.best_params == sample_trials(FAST_LSS, 1, 5)[0]
    assert np.isfinite(res.best.mean_score)
    assert res.best.mean_score == pytest.approx(np.mean(res.best.fold_scores))
    assert all(res.best.mean_score <= t.mean_score for t in res.trials)


def test_diverged_trial_recorded_not_raised(plan, monkeypatch):
    import poolid.hyperopt as ho
    from poolid.nlarx import TrainingDivergedError

    def diverge(*a, **k):
        raise TrainingDivergedError("non-finite loss at epoch 0", [])
    monkeypatch.setattr(ho, "train_model", diverge)
    res = run_search(FAST_NLARX, plan, 2, seed=0)
    assert all(t.mean_score == math.inf and t.status.startswith("diverged") for t in res.trials)
    assert res.best in res.trials


@pytest.mark.slow
def test_parallelism_does_not_change_results(plan, tmp_path):
    a = run_search(FAST_NLARX, plan, 4, seed=2, parallelism=1, ledger=tmp_path / "a.csv")
    b = run_search(FAST_NLARX, plan, 4, seed=2, parallelism=4, ledger=tmp_path / "b.csv")
    assert a.best.trial_id == b.best.trial_id and a.best_params == b.best_params
    assert [(t.params, t.fold_scores) for t in a.trials] == [(t.params, t.fold_scores) for t in b.trials]
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_resume_skips_completed_trials(plan, tmp_path, monkeypatch):
    ledger = tmp_path / "trials.csv"
    first = run_search(FAST_LSS, plan, 2, seed=1, ledger=ledger)
    calls = []
    import poolid.hyperopt as ho
    real = ho.run_trial
    monkeypatch.setattr(ho, "run_trial", lambda *a, **k: calls.append(a[1]) or real(*a, **k))
    second = run_search(FAST_LSS, plan, 4, seed=1, ledger=ledger)
    assert calls == [2, 3]
    assert [t.fold_scores for t in second.trials[:2]] == [t.fold_scores for t in first.trials]
    with ledger.open() as fh:
        rows = list(csv.DictReader(fh))
    assert [r["trial_id"] for r in rows] == ["0", "1", "2", "3"]
    assert sorted(read_ledger(ledger, FAST_LSS, 3)) == [0, 1, 2, 3]
    with pytest.raises(SearchError, match="does not match"):
        run_search(FAST_LSS, plan, 4, seed=99, ledger=ledger)
