"""Linear state-space identification (MOESP subspace method) and forecasting.

Model form::

    x[k+1] = A x[k] + B u[k]
    y[k]   = C x[k]

with an optional innovation gain ``K`` used only while reconstructing the
state over the past window.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.linalg as la
from numpy.lib.stride_tricks import sliding_window_view
from scipy.optimize import least_squares
from scipy.signal import lfilter

from .data import NormalizationStats, SignalFrame

log = logging.getLogger(__name__)

FORMAT_TAG = "poolid.lss/1"


class IdentificationError(RuntimeError):
    pass


class UnexcitingDataError(IdentificationError):
    """The input block-Hankel matrix is rank deficient."""


@dataclass(frozen=True)
class SubspaceOptions:
    n_x: int = 3
    block_horizon: int | str = "auto"   # 48, 24, "auto" (-1 is accepted as "auto")
    noise_model: str = "none"           # "none" | "estimate"
    focus: str = "prediction"           # "prediction" | "simulation"
    stabilize: bool = False
    past_len: int = 20
    refine_max_nfev: int = 60

    def __post_init__(self):
        if self.block_horizon == -1:
            object.__setattr__(self, "block_horizon", "auto")
        if self.noise_model not in ("none", "estimate"):
            raise ValueError(f"noise_model must be 'none' or 'estimate', got {self.noise_model!r}")
        if self.focus not in ("prediction", "simulation"):
            raise ValueError(f"focus must be 'prediction' or 'simulation', got {self.focus!r}")
        if self.n_x < 1:
            raise ValueError("n_x must be positive")
        if self.block_horizon != "auto" and int(self.block_horizon) <= self.n_x:
            raise ValueError("block_horizon must exceed n_x")

    @property
    def horizon(self) -> int:
        if self.block_horizon == "auto":
            return max(24, 3 * self.n_x)
        return int(self.block_horizon)


@dataclass(frozen=True, eq=False)
class StateSpaceModel:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    K: np.ndarray | None = None
    stats: NormalizationStats | None = None
    options: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)
    past_len: int = 20

    def __post_init__(self):
        A, B, C = (np.atleast_2d(np.asarray(m, dtype=float)) for m in (self.A, self.B, self.C))
        n = A.shape[0]
        if A.shape != (n, n) or B.shape[0] != n or C.shape[1] != n:
            raise ValueError(f"inconsistent shapes A{A.shape} B{B.shape} C{C.shape}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)
        if self.K is not None:
            K = np.asarray(self.K, dtype=float).reshape(n, C.shape[0])
            object.__setattr__(self, "K", K)
        object.__setattr__(self, "_obs_cache", {})

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    @property
    def n_y(self) -> int:
        return self.C.shape[0]

    def n_params(self) -> int:
        k = 0 if self.K is None else self.K.size
        return self.A.size + self.B.size + self.C.size + k

    def markov(self, count: int) -> np.ndarray:
        """Impulse-response matrices C A^i B for i < count, shape [count, n_y, n_u]."""
        out = np.empty((count, self.n_y, self.n_u))
        x = self.B.copy()
        for i in range(count):
            out[i] = self.C @ x
            x = self.A @ x
        return out

    # -- state reconstruction -------------------------------------------------

    def _window_operators(self, L: int):
        """Linear maps from a length-L window to the terminal state.

        x_end = P_y @ vec(Y) + P_u @ vec(U) where vec stacks rows (time-major).
        """
        cached = self._obs_cache.get(L)
        if cached is not None:
            return cached
        n, nu, ny = self.n_x, self.n_u, self.n_y
        K = self.K if self.K is not None else np.zeros((n, ny))
        Abar = self.A - K @ self.C
        # x_t = Abar^t x0 + sum_{m<t} Abar^{t-1-m} (B u_m + K y_m)
        powers = [np.eye(n)]
        for _ in range(L):
            powers.append(Abar @ powers[-1])
        O = np.vstack([self.C @ powers[t] for t in range(L)])
        if np.linalg.matrix_rank(O) < n:
            raise IdentificationError(f"observability matrix over {L} steps has rank < {n}")
        Tu = np.zeros((L * ny, L * nu))
        Ty = np.zeros((L * ny, L * ny))
        for t in range(L):
            for m in range(t):
                G = self.C @ powers[t - 1 - m]
                Tu[t * ny:(t + 1) * ny, m * nu:(m + 1) * nu] = G @ self.B
                Ty[t * ny:(t + 1) * ny, m * ny:(m + 1) * ny] = G @ K
        Opinv = np.linalg.pinv(O)
        # x0 = Opinv (Y - Tu U - Ty Y)
        X0y = Opinv @ (np.eye(L * ny) - Ty)
        X0u = -Opinv @ Tu
        # terminal state at row L-1
        Ru = np.zeros((n, L * nu))
        Ry = np.zeros((n, L * ny))
        for m in range(L - 1):
            Ru[:, m * nu:(m + 1) * nu] = powers[L - 2 - m] @ self.B
            Ry[:, m * ny:(m + 1) * ny] = powers[L - 2 - m] @ K
        Pend = powers[L - 1]
        ops = (Pend @ X0y + Ry, Pend @ X0u + Ru)
        self._obs_cache[L] = ops
        return ops

    def estimate_initial_state_batch(self, past_u: np.ndarray, past_y: np.ndarray) -> np.ndarray:
        """Least-squares state at the last row of each window, shape [K, n_x]."""
        Kb, L, _ = past_y.shape
        Py, Pu = self._window_operators(L)
        return past_y.reshape(Kb, -1) @ Py.T + past_u.reshape(Kb, -1) @ Pu.T

    def estimate_initial_state(self, past: np.ndarray) -> np.ndarray:
        """``past`` is [past_len x (n_u + n_y)], inputs first."""
        past = np.asarray(past, dtype=float)
        if past.shape[0] < self.n_x:
            raise IdentificationError("past window shorter than the state dimension")
        return self.estimate_initial_state_batch(past[None, :, :self.n_u], past[None, :, self.n_u:])[0]

    # -- forecasting ------------------------------------------------------------

    def forecast_batch(self, past_u: np.ndarray, past_y: np.ndarray, future_u: np.ndarray) -> np.ndarray:
        """H-step open-loop forecasts, [K x H x n_y].

        Row ``i`` of the result predicts the output ``i + 1`` steps after the
        last past row; ``future_u[:, i]`` is the input at that same instant.
        """
        L = min(self.past_len, past_y.shape[1])
        x = self.estimate_initial_state_batch(past_u[:, -L:], past_y[:, -L:])
        H = future_u.shape[1]
        out = np.empty((x.shape[0], H, self.n_y))
        u = past_u[:, -1]
        At, Bt, Ct = self.A.T, self.B.T, self.C.T
        for i in range(H):
            x = x @ At + u @ Bt
            out[:, i] = x @ Ct
            u = future_u[:, i]
        return out

    def forecast(self, past: np.ndarray, future_inputs: np.ndarray) -> np.ndarray:
        past = np.asarray(past, dtype=float)
        return self.forecast_batch(past[None, :, :self.n_u], past[None, :, self.n_u:],
                                   np.asarray(future_inputs, dtype=float)[None])[0]

    def simulate(self, u: np.ndarray, x0: np.ndarray | None = None) -> np.ndarray:
        x = np.zeros(self.n_x) if x0 is None else np.asarray(x0, dtype=float)
        y = np.empty((len(u), self.n_y))
        for t in range(len(u)):
            y[t] = self.C @ x
            x = self.A @ x + self.B @ u[t]
        return y

    # -- persistence ------------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": FORMAT_TAG,
            "n_x": self.n_x, "n_u": self.n_u, "n_y": self.n_y,
            "A": self.A.tolist(), "B": self.B.tolist(), "C": self.C.tolist(),
            "K": None if self.K is None else self.K.tolist(),
            "past_len": self.past_len,
            "options": self.options,
            "info": self.info,
            "stats": None if self.stats is None else self.stats.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StateSpaceModel":
        if d.get("format") != FORMAT_TAG:
            raise ValueError(f"not a state-space model file (format={d.get('format')!r})")
        stats = None if d.get("stats") is None else NormalizationStats.from_dict(d["stats"])
        m = cls(np.array(d["A"], dtype=float).reshape(d["n_x"], d["n_x"]),
                np.array(d["B"], dtype=float).reshape(d["n_x"], d["n_u"]),
                np.array(d["C"], dtype=float).reshape(d["n_y"], d["n_x"]),
                None if d.get("K") is None else np.array(d["K"], dtype=float),
                stats, d.get("options", {}), d.get("info", {}), d.get("past_len", 20))
        return m

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "StateSpaceModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# estimation


def _hankel_rows(u: np.ndarray, y: np.ndarray, s: int, start: int, stop: int) -> np.ndarray:
    """Columns start..stop-1 of [Uf; Up; Yp; Yf], returned transposed (one row per column)."""
    wu = sliding_window_view(u, 2 * s, axis=0)[start:stop]  # [j, n_u, 2s]
    wy = sliding_window_view(y, 2 * s, axis=0)[start:stop]
    j = wu.shape[0]
    up = wu[:, :, :s].transpose(0, 2, 1).reshape(j, -1)
    uf = wu[:, :, s:].transpose(0, 2, 1).reshape(j, -1)
    yp = wy[:, :, :s].transpose(0, 2, 1).reshape(j, -1)
    yf = wy[:, :, s:].transpose(0, 2, 1).reshape(j, -1)
    return np.hstack([uf, up, yp, yf])


def _section_arrays(frames) -> list[tuple[np.ndarray, np.ndarray]]:
    out = []
    for f in frames:
        if isinstance(f, SignalFrame):
            out.append((np.asarray(f.inputs, dtype=float), np.asarray(f.outputs, dtype=float)))
        else:
            u, y = f
            out.append((np.asarray(u, dtype=float), np.asarray(y, dtype=float)))
    return out


def _tsqr(sections, s: int, chunk: int = 4096) -> tuple[np.ndarray, int]:
    R = None
    total = 0
    for u, y in sections:
        j = len(u) - 2 * s + 1
        for a in range(0, j, chunk):
            M = _hankel_rows(u, y, s, a, min(a + chunk, j))
            total += len(M)
            M = M if R is None else np.vstack([R, M])
            R = la.qr(M, mode="r", overwrite_a=True, check_finite=False)[0][: M.shape[1]]
    return R, total


def _modal_responses(A: np.ndarray, C: np.ndarray, u: np.ndarray, n_x0: bool = True):
    """Output responses to unit B entries and to initial-state components.

    Returns ``(Phi_B [N, n_y, n, n_u], Phi_x0 [N, n_y, n])`` (real).
    """
    n = A.shape[0]
    N, nu = u.shape
    lam, V = np.linalg.eig(A)
    if np.linalg.cond(V) > 1e8:
        return _loop_responses(A, C, u)
    Vinv = np.linalg.inv(V)
    CV = C @ V
    F = np.empty((N, n, nu), dtype=complex)
    for k in range(n):
        F[:, k, :] = lfilter([0.0, 1.0], [1.0, -lam[k]], u.astype(complex), axis=0)
    phiB = np.einsum("ck,ki,tkj->tcij", CV, Vinv, F).real
    powers = lam[None, :] ** np.arange(N)[:, None]          # [N, n]
    phi0 = np.einsum("ck,tk,ki->tci", CV, powers, Vinv).real
    return phiB, phi0


def _loop_responses(A, C, u):
    n = A.shape[0]
    N, nu = u.shape
    X = np.zeros((n, n, nu))   # state response to B = e_i e_j^T, indexed [state, i, j]
    X0 = np.eye(n)
    phiB = np.empty((N, C.shape[0], n, nu))
    phi0 = np.empty((N, C.shape[0], n))
    eye = np.eye(n)
    for t in range(N):
        phiB[t] = np.einsum("cs,sij->cij", C, X)
        phi0[t] = C @ X0
        X = np.einsum("ab,bij->aij", A, X) + eye[:, :, None] * u[t][None, None, :]
        X0 = A @ X0
    return phiB, phi0


def _fit_b(A: np.ndarray, C: np.ndarray, sections) -> tuple[np.ndarray, list[np.ndarray], np.ndarray]:
    """Least-squares B and per-section initial states for fixed (A, C).

    Returns ``(B, x0s, residual_vector)``.
    """
    n, ny = A.shape[0], C.shape[0]
    nu = sections[0][0].shape[1]
    S = len(sections)
    blocks, targets = [], []
    for si, (u, y) in enumerate(sections):
        phiB, phi0 = _modal_responses(A, C, u)
        N = len(u)
        rows = np.zeros((N * ny, n * nu + S * n))
        rows[:, : n * nu] = phiB.reshape(N * ny, n * nu)
        rows[:, n * nu + si * n: n * nu + (si + 1) * n] = phi0.reshape(N * ny, n)
        blocks.append(rows)
        targets.append(y.reshape(-1))
    Phi = np.vstack(blocks)
    target = np.concatenate(targets)
    if not np.all(np.isfinite(Phi)):
        raise IdentificationError("simulated responses overflow; estimated A is strongly unstable")
    theta, *_ = np.linalg.lstsq(Phi, target, rcond=None)
    B = theta[: n * nu].reshape(n, nu)
    x0s = [theta[n * nu + si * n: n * nu + (si + 1) * n] for si in range(S)]
    return B, x0s, target - Phi @ theta


def _stabilize(A: np.ndarray, radius: float = 0.999) -> np.ndarray:
    lam, V = np.linalg.eig(A)
    mag = np.abs(lam)
    if np.all(mag < 1.0):
        return A
    lam = np.where(mag >= 1.0, lam / mag * radius, lam)
    return (V @ np.diag(lam) @ np.linalg.inv(V)).real


def spectral_radius(A: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(A))))


def estimate_subspace(frames: Sequence, opts: SubspaceOptions = SubspaceOptions(),
                      stats: NormalizationStats | None = None) -> StateSpaceModel:
    """Estimate (A, B, C[, K]) from one or more data sections.

    ``frames`` are normalized :class:`SignalFrame` objects or ``(u, y)``
    array pairs. Hankel columns never span two sections.
    """
    sections = _section_arrays(frames)
    n, s = opts.n_x, opts.horizon
    min_len = 2 * s + n
    sections = [(u, y) for u, y in sections if len(u) >= min_len]
    if not sections:
        raise IdentificationError(f"every section is shorter than 2*block_horizon + n_x = {min_len}")
    nu, ny = sections[0][0].shape[1], sections[0][1].shape[1]

    R, ncols = _tsqr(sections, s)
    L = R.T / np.sqrt(ncols)
    r_uf, r_up, r_yp = s * nu, s * nu, s * ny
    r_wp = r_up + r_yp

    d = np.abs(np.diag(L)[: r_uf + r_up])
    if d.size == 0 or d.max() == 0.0 or d.min() < 1e-8 * d.max():
        raise UnexcitingDataError("input block-Hankel matrix is rank deficient (inputs not exciting)")

    L22 = L[r_uf:r_uf + r_wp, r_uf:r_uf + r_wp]
    L32 = L[r_uf + r_wp:, r_uf:r_uf + r_wp]
    try:
        U, sv, _ = np.linalg.svd(L32)
    except np.linalg.LinAlgError as exc:
        raise IdentificationError(f"SVD failed: {exc}") from exc
    if sv[n - 1] <= 1e-12 * sv[0]:
        log.warning("singular value %d is negligible; n_x may exceed the system order", n)
    gamma = U[:, :n] * np.sqrt(sv[:n])
    C = gamma[:ny]
    A = np.linalg.lstsq(gamma[:-ny], gamma[ny:], rcond=None)[0]
    if opts.stabilize:
        A = _stabilize(A)

    B, x0s, resid = _fit_b(A, C, sections)
    info = {"singular_values": sv[: min(len(sv), 12)].tolist(), "block_horizon": s, "columns": ncols}

    if opts.focus == "simulation":
        A, B, note = _refine(A, C, B, sections, resid, opts)
        info["refinement"] = note

    K = None
    if opts.noise_model == "estimate":
        K = _fit_innovation_gain(A, B, C, gamma, L22, L32, sections, s)

    info["spectral_radius"] = spectral_radius(A)
    options = asdict(opts)
    return StateSpaceModel(A, B, C, K, stats, options, info, opts.past_len)


def _refine(A0, C, B0, sections, resid0, opts: SubspaceOptions):
    """Minimise the whole-section simulation error over A, with B re-fitted (variable projection)."""
    n = A0.shape[0]
    cost0 = float(resid0 @ resid0)

    def residual(a):
        A = a.reshape(n, n)
        if spectral_radius(A) >= 1.0:
            return np.full_like(resid0, 1e3)
        return _fit_b(A, C, sections)[2]

    try:
        res = least_squares(residual, A0.ravel(), method="trf", x_scale="jac",
                            max_nfev=opts.refine_max_nfev)
    except (np.linalg.LinAlgError, ValueError) as exc:  # pragma: no cover - numerical corner
        return A0, B0, f"failed: {exc}"
    A = res.x.reshape(n, n)
    if spectral_radius(A) >= 1.0:
        warnings.warn("simulation-focus refinement produced an unstable A; keeping projection estimate")
        return A0, B0, "rejected: unstable"
    B, _, resid = _fit_b(A, C, sections)
    cost = float(resid @ resid)
    if cost >= cost0:
        return A0, B0, "no improvement"
    return A, B, f"cost {cost0:.6g} -> {cost:.6g}"


def _fit_innovation_gain(A, B, C, gamma, L22, L32, sections, s):
    """Least-squares K from one-step residuals of projected state estimates."""
    n, ny = A.shape[0], C.shape[0]
    nu = B.shape[1]
    r_uf = s * nu
    # states X = pinv(gamma) L32 pinv(L22) Wp, evaluated section by section
    M = np.linalg.pinv(gamma) @ L32 @ np.linalg.pinv(L22, rcond=1e-10)
    E, W = [], []
    for u, y in sections:
        j = len(u) - 2 * s + 1
        H = _hankel_rows(u, y, s, 0, j)
        X = H[:, r_uf:r_uf + M.shape[1]] @ M.T          # state at time s + col
        t = s + np.arange(j)
        e = y[t] - X @ C.T
        w = X[1:] - X[:-1] @ A.T - u[t[:-1]] @ B.T
        E.append(e[:-1])
        W.append(w)
    E = np.vstack(E)
    W = np.vstack(W)
    K = np.linalg.lstsq(E, W, rcond=None)[0].T
    Abar = A - K @ C
    if spectral_radius(Abar) >= 1.0:
        log.warning("estimated innovation gain gives an unstable predictor; dropping K")
        return None
    return K


def markov_relative_error(est: StateSpaceModel, A, B, C, count: int = 10) -> float:
    """Frobenius error of the stacked first ``count`` Markov parameters, relative to the truth."""
    truth = StateSpaceModel(A, B, C).markov(count)
    return float(np.linalg.norm(est.markov(count) - truth) / np.linalg.norm(truth))
