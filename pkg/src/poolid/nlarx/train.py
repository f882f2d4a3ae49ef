"""Mini-batch Adam training of the NLARX rollout loss with early stopping."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..data import DatasetSplit, NormalizationStats, SignalFrame, WindowBatch, make_window_batch
from .model import MlpParams, NlarxConfig, NlarxModel, loss_and_grad, rollout_batch

EVAL_PAST_LEN = 20


class TrainingDivergedError(FloatingPointError):
    """Loss or parameters became non-finite; carries the log up to that point."""

    def __init__(self, message: str, log: list[dict]):
        super().__init__(message)
        self.log = log


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n))

    def step(self, theta: np.ndarray, grad: np.ndarray, lr: float) -> None:
        """In-place Adam update of ``theta``."""
        self.t += 1
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * grad * grad
        mhat = self.m / (1.0 - self.beta1 ** self.t)
        vhat = self.v / (1.0 - self.beta2 ** self.t)
        theta -= lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class TrainResult:
    params: MlpParams
    log: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_score: float = float("inf")
    stopped_early: bool = False


def _batches(frames: Sequence[SignalFrame], past_len: int, P: int, stride: int) -> WindowBatch | None:
    parts = [make_window_batch(f, past_len, P, stride) for f in frames]
    parts = [b for b in parts if len(b)]
    return WindowBatch.concat(parts) if parts else None


def full_horizon_score(params: MlpParams, config: NlarxConfig, batch: WindowBatch,
                       chunk: int = 8192) -> float:
    """Pooled L(1, H) on a batch of H-step windows (aggregate over channels)."""
    sq = np.zeros(batch.future_outputs.shape[1])
    for s in range(0, len(batch), chunk):
        b = batch.take(slice(s, s + chunk))
        yhat = rollout_batch(params, config, b.past_inputs, b.past_outputs, b.future_inputs)
        sq += ((yhat - b.future_outputs) ** 2).sum(axis=(0, 2))
    return float(np.mean(np.sqrt(sq / len(batch))))


def fit(config: NlarxConfig, train_frames: Sequence[SignalFrame], val_frames: Sequence[SignalFrame]) -> TrainResult:
    """Train on normalized frames; early stopping on validation full-horizon accuracy."""
    past_len = config.past_len
    train = _batches(train_frames, past_len, config.horizon, config.train_stride)
    if train is None:
        raise ValueError("training sections too short for a single window")
    val = _batches(val_frames, max(EVAL_PAST_LEN, past_len), config.eval_horizon, config.val_stride)
    if val is None:
        raise ValueError("validation sections too short for a single evaluation window")
    if train.future_inputs.shape[2] != config.n_u or train.future_outputs.shape[2] != config.n_y:
        raise ValueError(f"data has n_u={train.future_inputs.shape[2]}, n_y={train.future_outputs.shape[2]}; "
                         f"config says {config.n_u}, {config.n_y}")
    pu = np.ascontiguousarray(train.past_inputs)
    py = np.ascontiguousarray(train.past_outputs)
    fu, fy = train.future_inputs, train.future_outputs

    rng = np.random.default_rng(config.seed)
    params = MlpParams.init(config, rng)
    adam = AdamState.zeros(params.theta.size)
    best = TrainResult(params.copy())
    K = len(train)
    bs = max(1, min(config.batch_size, K))
    wait = 0
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(config.epochs):
            order = rng.permutation(K)
            total = 0.0
            for s in range(0, K, bs):
                idx = np.sort(order[s:s + bs])
                value, g = loss_and_grad(params, config, _Arrays(pu[idx], py[idx], fu[idx], fy[idx]))
                if not (np.isfinite(value) and np.all(np.isfinite(g))):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch}, batch {s // bs} (loss={value})", best.log)
                adam.step(params.theta, g, config.learning_rate)
                total += value * len(idx)
            score = full_horizon_score(params, config, val)
            if not np.isfinite(score):
                raise TrainingDivergedError(f"non-finite validation score at epoch {epoch}", best.log)
            best.log.append({"epoch": epoch, "train_loss": total / K, "val_full": score})
            if score < best.best_score:
                best.best_score, best.best_epoch = score, epoch
                best.params = params.copy()
                wait = 0
            else:
                wait += 1
                if wait >= config.patience:
                    best.stopped_early = True
                    break
    return best


class _Arrays:
    """Minimal batch view accepted by :func:`loss_and_grad` (arrays already split)."""

    def __init__(self, pu, py, fu, fy):
        self.past_inputs, self.past_outputs, self.future_inputs, self.future_outputs = pu, py, fu, fy


def train(config: NlarxConfig, split: DatasetSplit, stats: NormalizationStats | None = None):
    """Fit on the split's train sections, early-stop on its validation sections.

    Returns ``(params, log)``; sections must already be normalized.
    """
    if not split.train_sections or not split.validation_sections:
        raise ValueError("split needs train and validation sections")
    res = fit(config, [f for _, f in split.train_sections], [f for _, f in split.validation_sections])
    return res.params, res.log


def train_model(config: NlarxConfig, train_frames, val_frames,
                stats: NormalizationStats | None = None) -> NlarxModel:
    res = fit(config, train_frames, val_frames)
    info = {"best_epoch": res.best_epoch, "best_val_full": res.best_score,
            "epochs_run": len(res.log), "stopped_early": res.stopped_early, "log": res.log}
    return NlarxModel(config, res.params, stats, info)
