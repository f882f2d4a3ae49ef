"""MLP-based NLARX predictor, recursive rollout, rollout loss and its exact gradient.

One-step map::

    y[k+1] = f(y[k], ..., y[k-n_a], u[k], ..., u[k-n_b])

The regressor is the row-major flattening of the lag buffers with the most
recent sample first: ``[y[k], y[k-1], ..., u[k], u[k-1], ...]``. Hidden layers
use tanh, the output layer is affine.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..data import AnchorWindow, NormalizationStats, WindowBatch

FORMAT_TAG = "poolid.nlarx/1"


@dataclass(frozen=True)
class NlarxConfig:
    n_a: int = 5
    n_b: int = 5
    hidden_layers: tuple[int, ...] = (32,)
    l2: float = 0.0
    horizon: int = 8               # rollout length P of the training loss
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 200
    patience: int = 20
    seed: int = 0
    n_u: int = 10
    n_y: int = 2
    train_stride: int = 1
    val_stride: int = 1
    eval_horizon: int = 48

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(w) for w in self.hidden_layers))
        if self.n_a < 0 or self.n_b < 0:
            raise ValueError("lag counts must be >= 0")
        if self.horizon < 1:
            raise ValueError("loss horizon must be >= 1")

    @property
    def input_width(self) -> int:
        return (self.n_a + 1) * self.n_y + (self.n_b + 1) * self.n_u

    @property
    def past_len(self) -> int:
        return max(self.n_a, self.n_b) + 1

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_width, *self.hidden_layers, self.n_y]

    def n_params(self) -> int:
        sizes = self.layer_sizes
        return sum(o * i + o for i, o in zip(sizes[:-1], sizes[1:]))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_layers"] = list(self.hidden_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NlarxConfig":
        return cls(**{**d, "hidden_layers": tuple(d.get("hidden_layers", (32,)))})


class MlpParams:
    """Weights and biases backed by one flat vector ``theta``.

    ``layers[i] = (W, b)`` are views into ``theta`` with ``W`` shaped
    ``[out, in]``, so optimisers can update ``theta`` in place.
    """

    def __init__(self, sizes: Sequence[int], theta: np.ndarray | None = None):
        self.sizes = list(sizes)
        total = sum(o * i + o for i, o in zip(self.sizes[:-1], self.sizes[1:]))
        self.theta = np.zeros(total) if theta is None else np.array(theta, dtype=float)
        if self.theta.shape != (total,):
            raise ValueError(f"theta has {self.theta.size} entries, layer sizes need {total}")
        self.layers: list[tuple[np.ndarray, np.ndarray]] = []
        self.weight_mask = np.zeros(total, dtype=bool)
        pos = 0
        for i, o in zip(self.sizes[:-1], self.sizes[1:]):
            W = self.theta[pos:pos + o * i].reshape(o, i)
            self.weight_mask[pos:pos + o * i] = True
            pos += o * i
            b = self.theta[pos:pos + o]
            pos += o
            self.layers.append((W, b))

    @classmethod
    def init(cls, config: NlarxConfig, rng: np.random.Generator) -> "MlpParams":
        p = cls(config.layer_sizes)
        for W, b in p.layers:
            a = np.sqrt(3.0 / W.shape[1])
            W[...] = rng.uniform(-a, a, size=W.shape)
        return p

    @classmethod
    def from_layers(cls, layers: Sequence[tuple[np.ndarray, np.ndarray]]) -> "MlpParams":
        sizes = [layers[0][0].shape[1]] + [W.shape[0] for W, _ in layers]
        theta = np.concatenate([np.concatenate([np.ravel(W), np.ravel(b)]) for W, b in layers])
        return cls(sizes, theta)

    def copy(self) -> "MlpParams":
        return MlpParams(self.sizes, self.theta.copy())

    def with_theta(self, theta: np.ndarray) -> "MlpParams":
        return MlpParams(self.sizes, theta)


# ---------------------------------------------------------------------------
# forward pass

def _forward(params: MlpParams, x: np.ndarray, keep: bool = False):
    acts = [x]
    h = x
    last = len(params.layers) - 1
    for li, (W, b) in enumerate(params.layers):
        z = h @ W.T + b
        h = z if li == last else np.tanh(z)
        if keep:
            acts.append(h)
    return h, acts


def _check_config(params: MlpParams, config: NlarxConfig):
    if params.sizes != config.layer_sizes:
        raise ValueError(f"parameter layer sizes {params.sizes} do not match config {config.layer_sizes}")


def predict_one_step(params: MlpParams, config: NlarxConfig, lagged_y: np.ndarray,
                     lagged_u: np.ndarray) -> np.ndarray:
    """``lagged_y`` is [(n_a+1) x n_y] and ``lagged_u`` [(n_b+1) x n_u], most recent row first."""
    lagged_y = np.asarray(lagged_y, dtype=float)
    lagged_u = np.asarray(lagged_u, dtype=float)
    if lagged_y.shape != (config.n_a + 1, config.n_y) or lagged_u.shape != (config.n_b + 1, config.n_u):
        raise ValueError(f"lag shapes {lagged_y.shape}, {lagged_u.shape} do not match config")
    _check_config(params, config)
    x = np.concatenate([lagged_y.ravel(), lagged_u.ravel()])[None]
    return _forward(params, x)[0][0]


def _initial_buffers(config: NlarxConfig, past_u: np.ndarray, past_y: np.ndarray):
    na1, nb1 = config.n_a + 1, config.n_b + 1
    if past_y.shape[1] < na1 or past_u.shape[1] < nb1:
        raise ValueError(f"window past has {past_y.shape[1]} rows, model needs {config.past_len}")
    ybuf = past_y[:, ::-1][:, :na1].reshape(len(past_y), -1)
    ubuf = past_u[:, ::-1][:, :nb1].reshape(len(past_u), -1)
    return np.ascontiguousarray(ybuf), np.ascontiguousarray(ubuf)


def rollout_batch(params: MlpParams, config: NlarxConfig, past_u: np.ndarray, past_y: np.ndarray,
                  future_u: np.ndarray, steps: int | None = None, _trace: list | None = None) -> np.ndarray:
    """Recursive multi-step prediction for a batch of windows, [K x steps x n_y].

    Predicted outputs replace measurements in the lag buffer; step ``p >= 1``
    consumes ``future_u[:, p-1]``.
    """
    _check_config(params, config)
    steps = future_u.shape[1] if steps is None else steps
    ny, nu = config.n_y, config.n_u
    ybuf, ubuf = _initial_buffers(config, past_u, past_y)
    out = np.empty((len(ybuf), steps, ny))
    for p in range(steps):
        if p > 0:
            ybuf = np.concatenate([out[:, p - 1], ybuf[:, :-ny]], axis=1)
            ubuf = np.concatenate([future_u[:, p - 1], ubuf[:, :-nu]], axis=1)
        x = np.concatenate([ybuf, ubuf], axis=1)
        yhat, acts = _forward(params, x, keep=_trace is not None)
        out[:, p] = yhat
        if _trace is not None:
            _trace.append(acts)
    return out


def rollout(params: MlpParams, config: NlarxConfig, window: AnchorWindow) -> np.ndarray:
    """P-step rollout of a single window whose ``past`` holds inputs then outputs."""
    past = np.asarray(window.past, dtype=float)
    past_u, past_y = past[None, :, :config.n_u], past[None, :, config.n_u:config.n_u + config.n_y]
    P = window.future_inputs.shape[0]
    return rollout_batch(params, config, past_u, past_y, np.asarray(window.future_inputs)[None], P)[0]


def _windows_to_arrays(config: NlarxConfig, batch):
    if hasattr(batch, "past_outputs"):
        return (batch.past_inputs, batch.past_outputs, batch.future_inputs, batch.future_outputs)
    past = np.stack([w.past for w in batch])
    return (past[:, :, :config.n_u], past[:, :, config.n_u:config.n_u + config.n_y],
            np.stack([w.future_inputs for w in batch]), np.stack([w.future_outputs for w in batch]))


def loss(params: MlpParams, config: NlarxConfig, batch) -> float:
    """Mean squared rollout error over windows, steps and channels plus l2 on weights."""
    pu, py, fu, fy = _windows_to_arrays(config, batch)
    if len(py) == 0:
        raise ValueError("empty batch")
    P = fy.shape[1]
    yhat = rollout_batch(params, config, pu, py, fu, P)
    data = float(np.mean((yhat - fy) ** 2))
    w = params.theta[params.weight_mask]
    return data + config.l2 * float(w @ w)


def loss_and_grad(params: MlpParams, config: NlarxConfig, batch) -> tuple[float, np.ndarray]:
    """Rollout loss and its exact gradient by backpropagation through time."""
    pu, py, fu, fy = _windows_to_arrays(config, batch)
    K, P, ny = fy.shape
    trace: list = []
    yhat = rollout_batch(params, config, pu, py, fu, P, _trace=trace)
    err = yhat - fy
    w = params.theta[params.weight_mask]
    value = float(np.mean(err ** 2)) + config.l2 * float(w @ w)

    grad = MlpParams(params.sizes)
    gl = grad.layers
    dY = err * (2.0 / err.size)              # dL/dyhat, accumulates feedback terms below
    na1 = config.n_a + 1
    last = len(params.layers) - 1
    for p in range(P - 1, -1, -1):
        acts = trace[p]
        g = dY[:, p]
        for li in range(last, -1, -1):
            W, _ = params.layers[li]
            if li != last:
                g = g * (1.0 - acts[li + 1] ** 2)
            gl[li][0][...] += g.T @ acts[li]
            gl[li][1][...] += g.sum(axis=0)
            g = g @ W
        # g is now dL/dx for step p; route the y-lag part back to earlier predictions
        gy = g[:, :na1 * ny].reshape(K, na1, ny)
        for lag in range(na1):
            q = p - lag - 1
            if q < 0:
                break
            dY[:, q] += gy[:, lag]
    grad.theta[grad.weight_mask] += 2.0 * config.l2 * w
    return value, grad.theta


def grad_bptt(params: MlpParams, config: NlarxConfig, batch) -> np.ndarray:
    return loss_and_grad(params, config, batch)[1]


# ---------------------------------------------------------------------------
# fitted model

@dataclass(eq=False)
class NlarxModel:
    config: NlarxConfig
    params: MlpParams
    stats: NormalizationStats | None = None
    info: dict = field(default_factory=dict)

    @property
    def past_len(self) -> int:
        return self.config.past_len

    @property
    def n_u(self) -> int:
        return self.config.n_u

    @property
    def n_y(self) -> int:
        return self.config.n_y

    def n_params(self) -> int:
        return self.config.n_params()

    def forecast_batch(self, past_u, past_y, future_u) -> np.ndarray:
        return rollout_batch(self.params, self.config, past_u, past_y, future_u)

    def forecast(self, past: np.ndarray, future_inputs: np.ndarray) -> np.ndarray:
        past = np.asarray(past, dtype=float)
        return self.forecast_batch(past[None, :, :self.n_u], past[None, :, self.n_u:],
                                   np.asarray(future_inputs, dtype=float)[None])[0]

    def to_dict(self) -> dict:
        return {
            "format": FORMAT_TAG,
            "config": self.config.to_dict(),
            "layer_sizes": self.params.sizes,
            "layers": [{"W": W.tolist(), "b": b.tolist()} for W, b in self.params.layers],
            "stats": None if self.stats is None else self.stats.to_dict(),
            "info": self.info,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NlarxModel":
        if d.get("format") != FORMAT_TAG:
            raise ValueError(f"not an NLARX model file (format={d.get('format')!r})")
        config = NlarxConfig.from_dict(d["config"])
        params = MlpParams.from_layers([(np.array(l["W"], dtype=float), np.array(l["b"], dtype=float))
                                        for l in d["layers"]])
        if params.sizes != list(d["layer_sizes"]):
            raise ValueError("layer sizes in file are inconsistent with the stored weights")
        stats = None if d.get("stats") is None else NormalizationStats.from_dict(d["stats"])
        return cls(config, params, stats, d.get("info", {}))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "NlarxModel":
        return cls.from_dict(json.loads(Path(path).read_text()))
