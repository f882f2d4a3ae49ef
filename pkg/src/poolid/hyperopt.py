"""Hyperparameter search with section-based cross-validation.

Discrete dimensions are enumerated as a grid; continuous ones are sampled
from a per-trial seed stream, so a trial's configuration depends only on
``(space, seed, trial_id)``. Trials run in a process pool and are merged by
trial id, which keeps results independent of the degree of parallelism.
"""
from __future__ import annotations

import csv
import itertools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import DatasetSplit, NormalizationStats, SignalFrame
from .eval import H_DEFAULT, PAST_LEN_DEFAULT, criterion, pooled_horizon_rmse
from .linid import IdentificationError, SubspaceOptions, estimate_subspace
from .nlarx import NlarxConfig, TrainingDivergedError, train_model

FAMILIES = ("lss", "nlarx")

log = logging.getLogger(__name__)


class SearchError(ValueError):
    pass


# ---------------------------------------------------------------------------
# search spaces

@dataclass(frozen=True)
class Continuous:
    low: float
    high: float
    log: bool = False
    integer: bool = False

    def sample(self, rng: np.random.Generator):
        if self.log:
            v = math.exp(rng.uniform(math.log(self.low), math.log(self.high)))
        else:
            v = rng.uniform(self.low, self.high)
        if self.integer:
            return int(min(max(round(v), self.low), self.high))
        return float(v)

    def contains(self, v) -> bool:
        return self.low <= v <= self.high


@dataclass(frozen=True)
class SearchSpace:
    family: str
    discrete: dict = field(default_factory=dict)     # name -> tuple of choices
    continuous: dict = field(default_factory=dict)   # name -> Continuous
    fixed: dict = field(default_factory=dict)        # passed to every trial unchanged

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise SearchError(f"unknown model family {self.family!r}; expected one of {FAMILIES}")

    def grid(self) -> list[dict]:
        names = sorted(self.discrete)
        return [dict(zip(names, combo)) for combo in itertools.product(*(self.discrete[n] for n in names))]

    def restrict(self, **dims) -> "SearchSpace":
        """Narrow dimensions; discrete ones take tuples, continuous ones ``(low, high)``."""
        discrete, continuous = dict(self.discrete), dict(self.continuous)
        for name, value in dims.items():
            if name in discrete:
                bad = [v for v in value if v not in discrete[name]]
                if bad:
                    raise SearchError(f"{name}: {bad} outside {discrete[name]}")
                discrete[name] = tuple(value)
            elif name in continuous:
                c = continuous[name]
                lo, hi = value
                if not (c.contains(lo) and c.contains(hi) and lo <= hi):
                    raise SearchError(f"{name}: ({lo}, {hi}) outside [{c.low}, {c.high}]")
                continuous[name] = replace(c, low=lo, high=hi)
            else:
                raise SearchError(f"unknown dimension {name!r}")
        return replace(self, discrete=discrete, continuous=continuous)

    def with_fixed(self, **kw) -> "SearchSpace":
        return replace(self, fixed={**self.fixed, **kw})

    def contains(self, params: dict) -> bool:
        return (all(params[n] in c for n, c in self.discrete.items())
                and all(d.contains(params[n]) for n, d in self.continuous.items()))

    def to_dict(self) -> dict:
        return {"family": self.family,
                "discrete": {k: list(v) for k, v in self.discrete.items()},
                "continuous": {k: [c.low, c.high, c.log, c.integer] for k, c in self.continuous.items()},
                "fixed": self.fixed}


def lss_space(**fixed) -> SearchSpace:
    return SearchSpace("lss", {"n_x": (2, 3, 4), "focus": ("simulation", "prediction"),
                               "block_horizon": (48, 24, -1), "noise_model": ("none", "estimate")},
                       {}, fixed)


def nlarx_space(lags: bool = False, **fixed) -> SearchSpace:
    """Layer count, width, l2 and loss horizon on a grid; learning rate and batch size sampled.

    ``lags=True`` adds n_a, n_b as extra discrete dimensions.
    """
    discrete = {"layers": (1, 2, 3), "units": (8, 16, 32, 64), "l2": (0.0, 1e-4, 1e-3),
                "horizon": (3, 5, 8, 15)}
    if lags:
        discrete.update(n_a=(2, 5, 10), n_b=(2, 5, 10))
    continuous = {"learning_rate": Continuous(1e-5, 1e-2, log=True),
                  "batch_size": Continuous(16, 256, log=True, integer=True)}
    return SearchSpace("nlarx", discrete, continuous, fixed)


def default_space(family: str, **fixed) -> SearchSpace:
    if family == "lss":
        return lss_space(**fixed)
    if family == "nlarx":
        return nlarx_space(**fixed)
    raise SearchError(f"unknown model family {family!r}")


def sample_trials(space: SearchSpace, budget: int, seed: int) -> list[dict]:
    """Trial configurations, fully determined by (space, budget, seed).

    With ``budget`` below the grid size a seeded subset of grid points is
    used; above it, the grid is cycled and continuous dimensions resampled.
    """
    if budget < 1:
        raise SearchError("budget must be >= 1")
    grid = space.grid()
    order = np.random.default_rng([seed, 0]).permutation(len(grid))
    trials = []
    for t in range(budget):
        params = dict(grid[order[t % len(grid)]])
        rng = np.random.default_rng([seed, 1, t])
        for name in sorted(space.continuous):
            params[name] = space.continuous[name].sample(rng)
        trials.append(params)
    return trials


# ---------------------------------------------------------------------------
# cross-validation plan

@dataclass(frozen=True)
class CvPlan:
    sections: dict                     # label -> SignalFrame (normalized)
    folds: tuple                       # ((train labels, validation labels), ...)

    def fold_frames(self, i: int) -> tuple[list[SignalFrame], list[SignalFrame]]:
        tr, va = self.folds[i]
        return [self.sections[l] for l in tr], [self.sections[l] for l in va]


def _halve(label: str, frame: SignalFrame) -> list[tuple[str, SignalFrame]]:
    mid = frame.n_samples // 2
    return [(f"{label}a", frame.slice(0, mid)), (f"{label}b", frame.slice(mid, frame.n_samples))]


def make_cv_plan(split: DatasetSplit, n_folds: int = 4, min_samples: int = 200) -> CvPlan:
    """Contiguous k-fold rotation over the train and validation sections.

    Test and scenario sections never enter the plan. When there are fewer
    sections than folds the longest section is halved in time until there
    are enough.
    """
    if n_folds < 2:
        raise SearchError("need at least 2 folds")
    pool = sorted(split.train_sections + split.validation_sections, key=lambda lf: lf[1].start_time)
    while len(pool) < n_folds:
        i = max(range(len(pool)), key=lambda j: pool[j][1].n_samples) if pool else None
        if i is None or pool[i][1].n_samples < 2 * min_samples:
            raise SearchError(f"not enough data for {n_folds} folds of at least {min_samples} samples")
        pool[i:i + 1] = _halve(*pool[i])
    labels = [l for l, _ in pool]
    if len(set(labels)) != len(labels):
        raise SearchError("duplicate section labels")
    blocks = np.array_split(np.arange(len(pool)), n_folds)
    folds = []
    for b in blocks:
        va = tuple(labels[i] for i in b)
        tr = tuple(l for l in labels if l not in va)
        folds.append((tr, va))
    return CvPlan(dict(pool), tuple(folds))


# ---------------------------------------------------------------------------
# model construction

def lss_options(params: dict) -> SubspaceOptions:
    keys = ("n_x", "focus", "block_horizon", "noise_model", "stabilize", "past_len", "refine_max_nfev")
    return SubspaceOptions(**{k: params[k] for k in keys if k in params})


def nlarx_config(params: dict, n_u: int, n_y: int, seed: int = 0) -> NlarxConfig:
    """Map search parameters (``layers`` x ``units`` or ``hidden_layers``) onto a config."""
    p = {"seed": seed, **params, "n_u": n_u, "n_y": n_y}
    if "layers" in p or "units" in p:
        p["hidden_layers"] = (int(p.pop("units", 32)),) * int(p.pop("layers", 1))
    allowed = set(NlarxConfig.__dataclass_fields__)
    return NlarxConfig(**{k: v for k, v in p.items() if k in allowed})


def build_model(family: str, params: dict, train_frames: Sequence[SignalFrame],
                val_frames: Sequence[SignalFrame], stats: NormalizationStats | None = None, seed: int = 0):
    """Fit one model. LSS uses train and validation data for estimation; NLARX
    trains on ``train_frames`` and early-stops on ``val_frames``."""
    if family == "lss":
        return estimate_subspace(list(train_frames) + list(val_frames), lss_options(params), stats)
    if family == "nlarx":
        f0 = train_frames[0]
        return train_model(nlarx_config(params, f0.n_u, f0.n_y, seed), train_frames, val_frames, stats)
    raise SearchError(f"unknown model family {family!r}")


def model_n_params(model) -> int:
    return int(model.n_params() if callable(getattr(model, "n_params", None)) else model.n_params)


# ---------------------------------------------------------------------------
# trials

@dataclass
class TrialResult:
    trial_id: int
    params: dict
    fold_scores: list[float]
    mean_score: float
    n_params: int = 0
    seed: int = 0
    status: str = "ok"
    logs: list = field(default_factory=list)

    def key(self):
        return (self.mean_score, self.n_params, config_key(self.params))


def config_key(params: dict) -> str:
    return json.dumps(params, sort_keys=True)


def _trial_params(space: SearchSpace, params: dict) -> dict:
    return {**space.fixed, **params}


def run_trial(family: str, trial_id: int, params: dict, plan: CvPlan, seed: int,
              H: int = H_DEFAULT, past_len: int = PAST_LEN_DEFAULT) -> TrialResult:
    """Train once per fold and score full-horizon accuracy on the fold's validation sections.

    For NLARX the latest train section of each fold is held out for early
    stopping, so the fold's validation sections only ever score.
    """
    scores, logs, n_params, status = [], [], 0, "ok"
    for i in range(len(plan.folds)):
        tr, va = plan.fold_frames(i)
        try:
            if family == "nlarx":
                if len(tr) < 2:
                    raise SearchError("NLARX folds need at least two train sections")
                fit_tr, stop = tr[:-1], tr[-1:]
                model = build_model(family, params, fit_tr, stop, seed=seed)
                logs.append(model.info.get("log", []))
            else:
                model = build_model(family, params, tr, [], seed=seed)
            n_params = model_n_params(model)
            score = criterion(pooled_horizon_rmse(model, va, H, past_len), 1, H)
            if not np.isfinite(score):
                raise FloatingPointError("non-finite validation score")
        except (TrainingDivergedError, IdentificationError, FloatingPointError, np.linalg.LinAlgError) as exc:
            status = f"diverged: {type(exc).__name__}: {exc}"
            score = math.inf
        scores.append(float(score))
        if not np.isfinite(score):
            break
    while len(scores) < len(plan.folds):
        scores.append(math.inf)
    mean = float(np.mean(scores)) if all(np.isfinite(scores)) else math.inf
    return TrialResult(trial_id, params, scores, mean, n_params, seed, status, logs)


def _run_trial_job(args):
    return run_trial(*args)


# ---------------------------------------------------------------------------
# ledger

def _ledger_columns(space: SearchSpace, n_folds: int) -> list[str]:
    dims = sorted(set(space.discrete) | set(space.continuous))
    return ["trial_id"] + dims + [f"fold_{i + 1}" for i in range(n_folds)] + ["mean", "n_params", "status"]


def _fmt(column: str, v) -> str:
    return v if column == "status" else json.dumps(v)


def _parse(v: str):
    return json.loads(v)


def read_ledger(path, space: SearchSpace, n_folds: int) -> dict[int, TrialResult]:
    path = Path(path)
    if not path.exists():
        return {}
    with path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    cols = _ledger_columns(space, n_folds)
    done = {}
    for row in rows:
        if list(row) != cols:
            raise SearchError(f"ledger {path} has columns {list(row)}, expected {cols}")
        dims = [c for c in cols if c in space.discrete or c in space.continuous]
        params = {d: _parse(row[d]) for d in dims}
        scores = [_parse(row[f"fold_{i + 1}"]) for i in range(n_folds)]
        tid = int(row["trial_id"])
        done[tid] = TrialResult(tid, params, [float(s) for s in scores], float(_parse(row["mean"])),
                                int(row["n_params"]), status=row["status"])
    return done


def _append_ledger(path: Path, space: SearchSpace, n_folds: int, result: TrialResult):
    cols = _ledger_columns(space, n_folds)
    new = not path.exists()
    with path.open("a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(cols)
        row = {"trial_id": result.trial_id, "mean": result.mean_score, "n_params": result.n_params,
               "status": result.status, **result.params}
        row.update({f"fold_{i + 1}": s for i, s in enumerate(result.fold_scores)})
        w.writerow([_fmt(c, row[c]) for c in cols])


# ---------------------------------------------------------------------------
# search driver

@dataclass
class SearchResult:
    best: TrialResult
    trials: list[TrialResult]

    @property
    def best_params(self) -> dict:
        return self.best.params


def select_best(trials: Sequence[TrialResult]) -> TrialResult:
    if not trials:
        raise SearchError("no trials to select from")
    return min(trials, key=TrialResult.key)


def run_search(space: SearchSpace, plan: CvPlan, budget: int, seed: int = 0, parallelism: int = 1,
               ledger: str | Path | None = None, H: int = H_DEFAULT,
               past_len: int = PAST_LEN_DEFAULT) -> SearchResult:
    """Evaluate ``budget`` trials; returns the argmin of mean validation full-horizon accuracy.

    Ties go to fewer parameters, then lexicographic configuration order. With
    a ``ledger`` path, finished trials are appended in trial-id order and
    skipped when the search is resumed.
    """
    trials = sample_trials(space, budget, seed)
    n_folds = len(plan.folds)
    done = read_ledger(ledger, space, n_folds) if ledger else {}
    for tid, res in done.items():
        if tid < budget and config_key(res.params) != config_key(trials[tid]):
            raise SearchError(f"ledger trial {tid} does not match the sampled configuration; "
                              "was it written with another seed or space?")
    pending = [t for t in range(budget) if t not in done]
    if done:
        log.info("resuming from %s: %d of %d trials already complete", ledger, budget - len(pending), budget)
    jobs = [(space.family, t, _trial_params(space, trials[t]), plan, seed, H, past_len) for t in pending]
    results: dict[int, TrialResult] = {}
    next_id = 0

    def flush():
        nonlocal next_id
        while next_id < budget and (next_id in results or next_id in done):
            if next_id in results and ledger:
                _append_ledger(Path(ledger), space, n_folds, results[next_id])
            next_id += 1

    def collect(res: TrialResult):
        res.params = {k: v for k, v in res.params.items() if k not in space.fixed}
        results[res.trial_id] = res
        flush()

    flush()
    if parallelism > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            for res in pool.map(_run_trial_job, jobs):
                collect(res)
    else:
        for job in jobs:
            collect(_run_trial_job(job))
    merged = [results.get(t) or done[t] for t in range(budget)]
    return SearchResult(select_best(merged), merged)
