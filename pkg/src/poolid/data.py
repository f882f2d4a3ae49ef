"""Time-series containers and the preprocessing chain.

Frames are immutable: every operation returns a new :class:`SignalFrame`.
Missing cells are NaN in memory and empty fields on disk.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

MISSING = float("nan")
SCALE_FLOOR = 1e-9


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class LongGapError(DataError):
    """A run of missing samples is longer than the interpolation limit.

    ``segments`` holds the ``[start, stop)`` row ranges of the usable pieces
    the frame should be split into.
    """

    def __init__(self, message: str, segments: list[tuple[int, int]]):
        super().__init__(message)
        self.segments = segments


@dataclass(frozen=True)
class ChannelSpec:
    name: str
    unit: str
    role: str  # "input" | "output"

    def __post_init__(self):
        if self.role not in ("input", "output"):
            raise ValueError(f"channel role must be 'input' or 'output', got {self.role!r}")


BENCHMARK_SCHEMA: tuple[ChannelSpec, ...] = (
    ChannelSpec("boiler_power_kw", "kW", "input"),
    ChannelSpec("valve1_pct", "%", "input"),
    ChannelSpec("valve2_pct", "%", "input"),
    ChannelSpec("air_temp_c", "degC", "input"),
    ChannelSpec("air_humidity_pct", "%", "input"),
    ChannelSpec("outdoor_temp_c", "degC", "input"),
    ChannelSpec("recycle_flow1_m3h", "m3/h", "input"),
    ChannelSpec("recycle_flow2_m3h", "m3/h", "input"),
    ChannelSpec("refill_flow_m3h", "m3/h", "input"),
    ChannelSpec("hall_energy_kw", "kW", "input"),
    ChannelSpec("pool1_temp_c", "degC", "output"),
    ChannelSpec("pool2_temp_c", "degC", "output"),
)


def make_schema(names: Sequence[str], outputs: Sequence[str], units: dict[str, str] | None = None):
    units = units or {}
    return tuple(ChannelSpec(n, units.get(n, ""), "output" if n in outputs else "input") for n in names)


@dataclass(frozen=True, eq=False)
class SignalFrame:
    start_time: datetime
    sample_period: float
    channels: tuple[ChannelSpec, ...]
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float, copy=True)
        if values.ndim != 2 or values.shape[1] != len(self.channels):
            raise DataError(
                f"values shape {values.shape} does not match {len(self.channels)} channels")
        names = [c.name for c in self.channels]
        if len(set(names)) != len(names):
            raise DataError(f"duplicate channel names in {names}")
        if self.sample_period <= 0:
            raise DataError("sample_period must be positive")
        if self.start_time.tzinfo is None:
            object.__setattr__(self, "start_time", self.start_time.replace(tzinfo=timezone.utc))
        values.setflags(write=False)
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "values", values)

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.channels]

    @property
    def input_idx(self) -> list[int]:
        return [i for i, c in enumerate(self.channels) if c.role == "input"]

    @property
    def output_idx(self) -> list[int]:
        return [i for i, c in enumerate(self.channels) if c.role == "output"]

    @property
    def n_u(self) -> int:
        return len(self.input_idx)

    @property
    def n_y(self) -> int:
        return len(self.output_idx)

    @property
    def inputs(self) -> np.ndarray:
        return self.values[:, self.input_idx]

    @property
    def outputs(self) -> np.ndarray:
        return self.values[:, self.output_idx]

    @property
    def end_time(self) -> datetime:
        """Exclusive end: the time one period after the last sample."""
        return self.time_at(self.n_samples)

    def time_at(self, index: int) -> datetime:
        return self.start_time + timedelta(seconds=self.sample_period * index)

    def timestamps(self) -> list[datetime]:
        return [self.time_at(i) for i in range(self.n_samples)]

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.names.index(name)]

    def index_of(self, when: datetime) -> int:
        """Row index of ``when`` (may be out of range, never rounded silently)."""
        offset = (_utc(when) - self.start_time).total_seconds() / self.sample_period
        idx = round(offset)
        if abs(offset - idx) > 1e-6:
            raise DataError(f"{when.isoformat()} is not on the sampling grid")
        return idx

    def with_values(self, values: np.ndarray, start_time: datetime | None = None,
                    sample_period: float | None = None) -> "SignalFrame":
        return SignalFrame(start_time or self.start_time,
                           sample_period if sample_period is not None else self.sample_period,
                           self.channels, values)

    def slice(self, start: int, stop: int) -> "SignalFrame":
        start = max(start, 0)
        stop = min(stop, self.n_samples)
        return SignalFrame(self.time_at(start), self.sample_period, self.channels,
                           self.values[start:stop])

    def between(self, start: datetime, end: datetime) -> "SignalFrame":
        """Rows with ``start <= t < end``."""
        return self.slice(self.index_of(start), self.index_of(end))

    def equals(self, other: "SignalFrame") -> bool:
        return (self.start_time == other.start_time
                and self.sample_period == other.sample_period
                and self.channels == other.channels
                and self.values.shape == other.values.shape
                and np.array_equal(self.values, other.values, equal_nan=True))


@dataclass(frozen=True)
class NormalizationStats:
    names: tuple[str, ...]
    mean: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float))
        object.__setattr__(self, "scale", np.asarray(self.scale, dtype=float))
        if np.any(self.scale <= 0):
            raise DataError("normalization scale must be positive")

    def subset(self, names: Sequence[str]) -> "NormalizationStats":
        idx = [self.names.index(n) for n in names]
        return NormalizationStats(tuple(names), self.mean[idx], self.scale[idx])

    def to_dict(self) -> dict:
        return {"names": list(self.names), "mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(tuple(d["names"]), np.array(d["mean"], dtype=float), np.array(d["scale"], dtype=float))


@dataclass
class DatasetSplit:
    train_sections: list[tuple[str, SignalFrame]] = field(default_factory=list)
    validation_sections: list[tuple[str, SignalFrame]] = field(default_factory=list)
    test_sections: list[tuple[str, SignalFrame]] = field(default_factory=list)
    scenario_sections: list[tuple[str, SignalFrame]] = field(default_factory=list)

    ROLES = ("train", "validation", "test", "scenario")

    def role(self, name: str) -> list[tuple[str, SignalFrame]]:
        return getattr(self, f"{name}_sections")

    def all_sections(self) -> list[tuple[str, str, SignalFrame]]:
        return [(role, label, frame) for role in self.ROLES for label, frame in self.role(role)]

    def section(self, label: str) -> SignalFrame:
        for _, lab, frame in self.all_sections():
            if lab == label:
                return frame
        raise KeyError(label)

    def map(self, fn) -> "DatasetSplit":
        return DatasetSplit(*[[(lab, fn(f)) for lab, f in self.role(r)] for r in self.ROLES])


@dataclass(frozen=True)
class AnchorWindow:
    anchor_index: int
    past: np.ndarray            # [past_len x n_channels], last row is the anchor
    future_inputs: np.ndarray   # [P x n_u], rows anchor+1 .. anchor+P
    future_outputs: np.ndarray  # [P x n_y]


@dataclass(frozen=True)
class WindowBatch:
    """Stacked anchor windows, the form the models consume."""

    anchors: np.ndarray         # [K]
    past: np.ndarray            # [K x past_len x n_channels]
    future_inputs: np.ndarray   # [K x P x n_u]
    future_outputs: np.ndarray  # [K x P x n_y]
    input_idx: tuple[int, ...]
    output_idx: tuple[int, ...]

    def __len__(self):
        return len(self.anchors)

    def take(self, idx) -> "WindowBatch":
        return WindowBatch(self.anchors[idx], self.past[idx], self.future_inputs[idx],
                           self.future_outputs[idx], self.input_idx, self.output_idx)

    @property
    def past_inputs(self) -> np.ndarray:
        return self.past[:, :, list(self.input_idx)]

    @property
    def past_outputs(self) -> np.ndarray:
        return self.past[:, :, list(self.output_idx)]

    @staticmethod
    def concat(batches: Sequence["WindowBatch"]) -> "WindowBatch":
        batches = [b for b in batches if len(b)]
        if not batches:
            raise DataError("no windows to concatenate")
        b0 = batches[0]
        return WindowBatch(np.concatenate([b.anchors for b in batches]),
                           np.concatenate([b.past for b in batches]),
                           np.concatenate([b.future_inputs for b in batches]),
                           np.concatenate([b.future_outputs for b in batches]),
                           b0.input_idx, b0.output_idx)


# ---------------------------------------------------------------------------
# file I/O

def _utc(t: datetime) -> datetime:
    return t.replace(tzinfo=timezone.utc) if t.tzinfo is None else t.astimezone(timezone.utc)


def parse_timestamp(text: str) -> datetime:
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    return _utc(datetime.fromisoformat(text))


def format_timestamp(t: datetime) -> str:
    return _utc(t).strftime("%Y-%m-%dT%H:%M:%SZ")


def load_frame(path, schema: Sequence[ChannelSpec] = BENCHMARK_SCHEMA,
               sample_period: float | None = None) -> SignalFrame:
    """Read a benchmark CSV file into a frame ordered like ``schema``.

    Timestamp gaps that are whole multiples of the sample period are filled
    with missing rows. ``sample_period`` defaults to the smallest spacing in
    the file (60 s for single-row files).
    """
    path = Path(path)
    wanted = [c.name for c in schema]
    times: list[datetime] = []
    rows: list[list[float]] = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if not header or header[0].strip() != "timestamp":
            raise DataError(f"{path}: first column must be 'timestamp'")
        cols = [h.strip() for h in header[1:]]
        unknown = [c for c in cols if c not in wanted]
        if unknown:
            raise DataError(f"{path}: unknown column(s) {unknown}")
        missing = [c for c in wanted if c not in cols]
        if missing:
            raise DataError(f"{path}: missing column(s) {missing}")
        order = [cols.index(c) for c in wanted]
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(rec)}")
            try:
                t = parse_timestamp(rec[0])
                vals = [float(v) if v.strip() else MISSING for v in rec[1:]]
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: unparsable row ({exc})") from None
            if times and t <= times[-1]:
                raise DataError(f"{path}:{lineno}: non-monotonic timestamp {rec[0]}")
            times.append(t)
            rows.append([vals[j] for j in order])
    if not rows:
        raise DataError(f"{path}: no data rows")
    secs = np.array([(t - times[0]).total_seconds() for t in times])
    if sample_period is None:
        sample_period = float(np.min(np.diff(secs))) if len(secs) > 1 else 60.0
    steps = secs / sample_period
    idx = np.rint(steps).astype(int)
    if np.any(np.abs(steps - idx) > 1e-6):
        raise DataError(f"{path}: timestamps are not on a {sample_period:g} s grid")
    values = np.full((idx[-1] + 1, len(wanted)), MISSING)
    values[idx] = np.array(rows, dtype=float)
    return SignalFrame(times[0], sample_period, tuple(schema), values)


def save_frame(frame: SignalFrame, path, decimals: int | None = 6) -> None:
    """Write ``frame`` in the benchmark CSV format.

    ``decimals=None`` writes shortest round-trip floats.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    def fmt(v: float) -> str:
        if math.isnan(v):
            return ""
        if decimals is None:
            return repr(float(v))
        s = f"{v:.{decimals}f}".rstrip("0").rstrip(".")
        return "0" if s in ("-0", "") else s

    with path.open("w", newline="") as fh:
        fh.write(",".join(["timestamp"] + frame.names) + "\n")
        t0 = frame.start_time
        for i, row in enumerate(frame.values.tolist()):
            ts = format_timestamp(t0 + timedelta(seconds=frame.sample_period * i))
            fh.write(ts + "," + ",".join(fmt(v) for v in row) + "\n")


def concat_frames(frames: Sequence[SignalFrame]) -> SignalFrame:
    """Join time-ordered frames on a common grid, filling holes with missing rows."""
    frames = sorted(frames, key=lambda f: f.start_time)
    f0 = frames[0]
    parts = [f0.values]
    cursor = f0.n_samples
    for f in frames[1:]:
        if f.channels != f0.channels or f.sample_period != f0.sample_period:
            raise DataError("frames differ in schema or sample period")
        offset = f0.index_of(f.start_time)
        if offset < cursor:
            raise DataError(f"frame starting {f.start_time.isoformat()} overlaps its predecessor")
        if offset > cursor:
            parts.append(np.full((offset - cursor, f0.n_channels), MISSING))
        parts.append(f.values)
        cursor = offset + f.n_samples
    return f0.with_values(np.vstack(parts))


# ---------------------------------------------------------------------------
# cleaning

def _nan_runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """[start, stop) ranges of True runs in a 1-D boolean mask."""
    if not mask.any():
        return []
    d = np.diff(np.concatenate([[0], mask.astype(np.int8), [0]]))
    return list(zip(np.flatnonzero(d == 1).tolist(), np.flatnonzero(d == -1).tolist()))


def _hampel_pass(x: np.ndarray, window: int, k: float) -> np.ndarray:
    half = window // 2
    padded = np.pad(x, half, mode="reflect")
    w = sliding_window_view(padded, window)
    med = np.median(w, axis=1)
    mad = np.median(np.abs(w - med[:, None]), axis=1)
    sigma = np.maximum(1.4826 * mad, 1e-12 * (1.0 + np.abs(med)))
    dev = x - med
    left = x - np.concatenate([[x[0]], x[:-1]])
    right = x - np.concatenate([x[1:], [x[-1]]])
    # isolated excursions only: both neighbours on the same side, so steps and ramps survive
    spike = ((np.abs(dev) > k * sigma)
             & (np.sign(left) == np.sign(dev)) & (np.sign(right) == np.sign(dev))
             & (np.abs(left) > 0.5 * np.abs(dev)) & (np.abs(right) > 0.5 * np.abs(dev)))
    out = x.copy()
    out[spike] = med[spike]
    return out


def clean_faults(frame: SignalFrame, max_gap: int = 5, spike_sigma: float = 6.0,
                 window: int = 31, max_passes: int = 20) -> SignalFrame:
    """Interpolate short missing runs and replace isolated spikes.

    A missing run longer than ``max_gap`` raises :class:`LongGapError` with the
    segments the frame should be split into. Spike removal (rolling median
    +- ``spike_sigma`` scaled MADs) is iterated to a fixed point, which makes
    the function idempotent.
    """
    values = np.array(frame.values, dtype=float)
    n = len(values)
    bad_rows = np.isnan(values).any(axis=1)
    runs = _nan_runs(bad_rows)
    long_runs = [(a, b) for a, b in runs if b - a > max_gap or a == 0 or b == n]
    if long_runs:
        segments, cursor = [], 0
        for a, b in long_runs:
            if a > cursor:
                segments.append((cursor, a))
            cursor = b
        if cursor < n:
            segments.append((cursor, n))
        raise LongGapError(
            f"missing run(s) longer than {max_gap} samples at rows "
            + ", ".join(f"[{a}, {b})" for a, b in long_runs), segments)
    t = np.arange(n)
    for j in range(values.shape[1]):
        col = values[:, j]
        miss = np.isnan(col)
        if miss.any():
            col[miss] = np.interp(t[miss], t[~miss], col[~miss])
        if n >= 3:
            for _ in range(max_passes):
                new = _hampel_pass(col, min(window, n if n % 2 else n - 1), spike_sigma)
                if np.array_equal(new, col):
                    break
                col = new
        values[:, j] = col
    return frame.with_values(values)


def split_on_gaps(frame: SignalFrame, max_gap: int = 5, min_length: int = 1, **kw) -> list[SignalFrame]:
    """Clean ``frame``, splitting it around missing runs that are too long."""
    try:
        return [clean_faults(frame, max_gap, **kw)]
    except LongGapError as err:
        return [clean_faults(frame.slice(a, b), max_gap, **kw)
                for a, b in err.segments if b - a >= min_length]


# ---------------------------------------------------------------------------
# resampling and normalisation

def resample_moving_average(frame: SignalFrame, factor: int) -> SignalFrame:
    if factor < 1:
        raise ValueError(f"resampling factor must be >= 1, got {factor}")
    if factor == 1:
        return frame
    n_out = frame.n_samples // factor
    v = frame.values[: n_out * factor].reshape(n_out, factor, frame.n_channels).mean(axis=1)
    return frame.with_values(v, sample_period=frame.sample_period * factor)


def fit_normalization(frames: Iterable[SignalFrame]) -> NormalizationStats:
    frames = list(frames)
    if not frames:
        raise DataError("cannot fit normalization on an empty list of frames")
    data = np.vstack([f.values for f in frames])
    if np.isnan(data).any():
        raise DataError("normalization requires cleaned frames (found missing cells)")
    mean = data.mean(axis=0)
    scale = np.maximum(data.std(axis=0), SCALE_FLOOR)
    return NormalizationStats(tuple(frames[0].names), mean, scale)


def _check_stats(frame: SignalFrame, stats: NormalizationStats):
    if len(stats.names) != frame.n_channels:
        raise DataError(f"stats cover {len(stats.names)} channels, frame has {frame.n_channels}")


def apply_normalization(frame: SignalFrame, stats: NormalizationStats) -> SignalFrame:
    _check_stats(frame, stats)
    return frame.with_values((frame.values - stats.mean) / stats.scale)


def invert_normalization(frame: SignalFrame, stats: NormalizationStats) -> SignalFrame:
    _check_stats(frame, stats)
    return frame.with_values(frame.values * stats.scale + stats.mean)


# ---------------------------------------------------------------------------
# windows

def anchor_indices(n_samples: int, past_len: int, P: int, stride: int = 1) -> np.ndarray:
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if n_samples < past_len + P:
        return np.zeros(0, dtype=int)
    count = (n_samples - past_len - P) // stride + 1
    return past_len - 1 + stride * np.arange(count)


def make_window_batch(frame: SignalFrame, past_len: int, P: int, stride: int = 1) -> WindowBatch:
    anchors = anchor_indices(frame.n_samples, past_len, P, stride)
    v = frame.values
    if len(anchors):
        past = sliding_window_view(v, past_len, axis=0)[anchors - past_len + 1].transpose(0, 2, 1)
        fut = sliding_window_view(v, P, axis=0)[anchors + 1].transpose(0, 2, 1)
    else:
        past = np.zeros((0, past_len, frame.n_channels))
        fut = np.zeros((0, P, frame.n_channels))
    ui, yi = frame.input_idx, frame.output_idx
    return WindowBatch(anchors, np.ascontiguousarray(past), np.ascontiguousarray(fut[:, :, ui]),
                       np.ascontiguousarray(fut[:, :, yi]), tuple(ui), tuple(yi))


def make_anchor_windows(frame: SignalFrame, past_len: int, P: int, stride: int = 1) -> list[AnchorWindow]:
    b = make_window_batch(frame, past_len, P, stride)
    return [AnchorWindow(int(a), b.past[k], b.future_inputs[k], b.future_outputs[k])
            for k, a in enumerate(b.anchors)]


def window_sample_times(frame: SignalFrame, past_len: int, P: int, stride: int = 1) -> set[datetime]:
    """Timestamps of every sample touched by any anchor window of ``frame``."""
    anchors = anchor_indices(frame.n_samples, past_len, P, stride)
    touched = np.zeros(frame.n_samples, dtype=bool)
    for a in anchors:
        touched[a - past_len + 1: a + P + 1] = True
    return {frame.time_at(i) for i in np.flatnonzero(touched)}


def check_split(split: DatasetSplit) -> None:
    """Raise :class:`DataError` if sections overlap or tests are not at the extremes."""
    spans = sorted((f.start_time, f.end_time, role, lab) for role, lab, f in split.all_sections())
    for (s0, e0, r0, l0), (s1, e1, r1, l1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise DataError(f"sections {l0!r} ({r0}) and {l1!r} ({r1}) overlap")
    if split.test_sections and spans:
        if spans[0][2] != "test" or spans[-1][2] != "test":
            raise DataError("test sections must lie at the temporal extremes of the data")
    scen = {lab for lab, _ in split.scenario_sections}
    fit = {lab for lab, _ in split.train_sections + split.validation_sections}
    if scen & fit:
        raise DataError(f"scenario sections used for fitting: {sorted(scen & fit)}")


# ---------------------------------------------------------------------------
# whole-split preprocessing

def prepare_split(split: DatasetSplit, factor: int, max_gap: int = 5, stats: NormalizationStats | None = None,
                  normalize: bool = True) -> tuple[DatasetSplit, NormalizationStats]:
    """Clean, resample and normalize every section.

    Sections broken by long gaps become ``label.1``, ``label.2``, ... Stats are
    fitted on the (resampled) train sections unless given; ``normalize=False``
    is for data that is already in normalized units.
    """
    def clean(role):
        out = []
        for label, frame in split.role(role):
            pieces = split_on_gaps(frame, max_gap, min_length=factor)
            pieces = [resample_moving_average(p, factor) for p in pieces]
            pieces = [p for p in pieces if p.n_samples]
            if len(pieces) == 1:
                out.append((label, pieces[0]))
            else:
                out.extend((f"{label}.{i + 1}", p) for i, p in enumerate(pieces))
        return out

    cleaned = DatasetSplit(*[clean(r) for r in DatasetSplit.ROLES])
    if stats is None:
        if not cleaned.train_sections:
            raise DataError("no train sections to fit normalization on")
        stats = fit_normalization(f for _, f in cleaned.train_sections)
    if not normalize:
        return cleaned, stats
    return cleaned.map(lambda f: apply_normalization(f, stats)), stats
