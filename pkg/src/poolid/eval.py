"""Horizon accuracy metrics, criteria reports and plot-ready exports.

A forecaster is anything with ``past_len`` and
``forecast_batch(past_u, past_y, future_u) -> [K x H x n_y]``. Objects that
also define ``forecast_windows(batch, H)`` (e.g. :class:`PerfectForecaster`)
are called through that hook instead.
"""
from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import DatasetSplit, NormalizationStats, SignalFrame, WindowBatch, make_window_batch

H_DEFAULT = 48
PAST_LEN_DEFAULT = 20
SCENARIO_IDS = (1, 2, 3, 4)

# published accuracy scores of the two reference models on the real facility;
# documentation only, never asserted against synthetic results
TABLE_V_REFERENCE = {
    "lss": {"full": 0.32, "short": 0.11, "long": 0.52,
            "scenario1": 0.29, "scenario2": 0.49, "scenario3": 0.88, "scenario4": 0.36},
    "nlarx": {"full": 0.23, "short": 0.10, "long": 0.31,
              "scenario1": 0.22, "scenario2": 0.60, "scenario3": 1.24, "scenario4": 1.45},
}


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class HorizonMetrics:
    per_channel: np.ndarray     # [H x n_y] RMSE per depth and output channel
    aggregate: np.ndarray       # [H] sqrt(mean_k sum_c e^2)
    anchor_count: int
    channels: tuple[str, ...] = ()
    scale: np.ndarray | None = None  # per-channel output scale, for degC views

    @property
    def H(self) -> int:
        return len(self.aggregate)

    @property
    def per_channel_degc(self) -> np.ndarray | None:
        return None if self.scale is None else self.per_channel * self.scale

    def prefix(self, H: int) -> "HorizonMetrics":
        return HorizonMetrics(self.per_channel[:H], self.aggregate[:H], self.anchor_count,
                              self.channels, self.scale)


class PerfectForecaster:
    """Oracle stub returning the measured future outputs; all criteria come out 0."""

    def __init__(self, past_len: int = 1):
        self.past_len = past_len

    def forecast_windows(self, batch: WindowBatch, H: int) -> np.ndarray:
        return batch.future_outputs[:, :H].copy()


def metrics_from_errors(err: np.ndarray, channels: Sequence[str] = (),
                        scale: np.ndarray | None = None) -> HorizonMetrics:
    """``err`` is [K x H x n_y] forecast minus measurement."""
    err = np.asarray(err, dtype=float)
    if err.ndim != 3 or len(err) == 0:
        raise EvalError("need errors shaped [K x H x n_y] with K >= 1")
    sq = err ** 2
    per_channel = np.sqrt(sq.mean(axis=0))
    aggregate = np.sqrt(sq.sum(axis=2).mean(axis=0))
    return HorizonMetrics(per_channel, aggregate, len(err), tuple(channels), scale)


def forecast_windows(model, batch: WindowBatch, H: int, chunk: int = 4096) -> np.ndarray:
    hook = getattr(model, "forecast_windows", None)
    if hook is not None:
        return hook(batch, H)
    parts = []
    for s in range(0, len(batch), chunk):
        b = batch.take(slice(s, s + chunk))
        parts.append(np.asarray(model.forecast_batch(b.past_inputs, b.past_outputs, b.future_inputs[:, :H])))
    return np.concatenate(parts)


def _output_scale(stats: NormalizationStats | None, frame: SignalFrame) -> np.ndarray | None:
    if stats is None:
        return None
    return np.asarray(stats.scale)[frame.output_idx]


def section_errors(model, section: SignalFrame, H: int = H_DEFAULT, past_len: int | None = None,
                   stride: int = 1) -> np.ndarray:
    past_len = PAST_LEN_DEFAULT if past_len is None else past_len
    if getattr(model, "past_len", 1) > past_len:
        raise EvalError(f"model needs {model.past_len} past samples, evaluation window has {past_len}")
    batch = make_window_batch(section, past_len, H, stride)
    if len(batch) == 0:
        raise EvalError(f"section of {section.n_samples} samples is too short for past_len={past_len}, H={H}")
    yhat = forecast_windows(model, batch, H)
    return yhat - batch.future_outputs


def horizon_rmse(model, section: SignalFrame, H: int = H_DEFAULT, past_len: int | None = None,
                 stride: int = 1, stats: NormalizationStats | None = None) -> HorizonMetrics:
    """Per-depth RMSE over every admissible anchor of ``section``."""
    err = section_errors(model, section, H, past_len, stride)
    names = tuple(section.names[i] for i in section.output_idx)
    return metrics_from_errors(err, names, _output_scale(stats, section))


def pooled_horizon_rmse(model, sections: Sequence[SignalFrame], H: int = H_DEFAULT,
                        past_len: int | None = None, stride: int = 1,
                        stats: NormalizationStats | None = None) -> HorizonMetrics:
    """Anchors of all sections pooled into one average (windows never cross sections)."""
    errs = []
    for s in sections:
        try:
            errs.append(section_errors(model, s, H, past_len, stride))
        except EvalError:
            continue
    if not errs:
        raise EvalError("no section is long enough for a single anchor")
    s0 = sections[0]
    names = tuple(s0.names[i] for i in s0.output_idx)
    return metrics_from_errors(np.concatenate(errs), names, _output_scale(stats, s0))


def criterion(metrics: HorizonMetrics | np.ndarray, I: int, J: int) -> float:
    """Mean of the per-depth aggregate RMSE over depths I..J (1-based, inclusive)."""
    curve = metrics.aggregate if isinstance(metrics, HorizonMetrics) else np.asarray(metrics)
    H = len(curve)
    if not (1 <= I <= J <= H):
        raise EvalError(f"need 1 <= I <= J <= H={H}, got I={I}, J={J}")
    return float(np.mean(curve[I - 1:J]))


def criteria_ranges(H: int = H_DEFAULT) -> dict[str, tuple[int, int]]:
    return {"full": (1, H), "short": (1, H // 4), "long": (3 * H // 4, H)}


@dataclass
class CriteriaReport:
    full: float
    short: float
    long: float
    scenarios: dict[int, float] = field(default_factory=dict)
    per_channel: dict[str, dict[str, float]] = field(default_factory=dict)
    per_channel_degc: dict[str, dict[str, float]] = field(default_factory=dict)
    test_metrics: HorizonMetrics | None = None
    scenario_metrics: dict[int, HorizonMetrics] = field(default_factory=dict)
    missing: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def as_row(self) -> dict[str, float]:
        row = {"full": self.full, "short": self.short, "long": self.long}
        for sid in SCENARIO_IDS:
            row[f"scenario{sid}"] = self.scenarios.get(sid, float("nan"))
        return row


def _criteria(m: HorizonMetrics) -> dict[str, float]:
    return {k: criterion(m, *r) for k, r in criteria_ranges(m.H).items()}


def _scenario_id(label: str) -> int | None:
    head = label.split(".")[0]
    if head.startswith("scenario_"):
        try:
            return int(head.split("_")[1])
        except ValueError:
            return None
    return None


def scenario_eval(model, split: DatasetSplit, H: int = H_DEFAULT, past_len: int | None = None,
                  stride: int = 1, stats: NormalizationStats | None = None) -> CriteriaReport:
    """Test-set criteria plus full-horizon accuracy per extrapolation scenario."""
    if not split.test_sections:
        raise EvalError("split has no test sections")
    if not split.scenario_sections:
        raise EvalError("split has no scenario sections")
    test = pooled_horizon_rmse(model, [f for _, f in split.test_sections], H, past_len, stride, stats)
    crit = _criteria(test)
    report = CriteriaReport(crit["full"], crit["short"], crit["long"], test_metrics=test)
    for c, name in enumerate(test.channels):
        ch = HorizonMetrics(test.per_channel[:, c:c + 1], test.per_channel[:, c], test.anchor_count)
        report.per_channel[name] = _criteria(ch)
        if test.scale is not None:
            report.per_channel_degc[name] = {k: v * float(test.scale[c]) for k, v in _criteria(ch).items()}

    grouped: dict[int, list[SignalFrame]] = {}
    for label, frame in split.scenario_sections:
        sid = _scenario_id(label)
        if sid is None:
            report.missing.append(f"{label}: not a scenario label")
            continue
        grouped.setdefault(sid, []).append(frame)
    for sid in sorted(grouped):
        try:
            m = pooled_horizon_rmse(model, grouped[sid], H, past_len, stride, stats)
        except EvalError as err:
            report.missing.append(f"scenario_{sid}: {err}")
            continue
        report.scenario_metrics[sid] = m
        report.scenarios[sid] = criterion(m, 1, H)
    for sid in SCENARIO_IDS:
        if sid not in grouped:
            report.missing.append(f"scenario_{sid}: section absent")
    if report.full > 0 and not report.short < report.full < report.long:
        report.warnings.append(
            f"unusual criteria ordering: short={report.short:.4g}, full={report.full:.4g}, long={report.long:.4g}")
    return report


# ---------------------------------------------------------------------------
# exports

def _fmt(v: float) -> str:
    return "nan" if not np.isfinite(v) else f"{v:.10g}"


def criteria_table(reports: Mapping[str, CriteriaReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = ["full", "short", "long"] + [f"scenario{s}" for s in SCENARIO_IDS]
    w.writerow(["model"] + cols)
    for label in reports:
        row = reports[label].as_row()
        w.writerow([label] + [_fmt(row[c]) for c in cols])
    return buf.getvalue()


def curve_table(metrics: HorizonMetrics) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["depth", "channel", "rmse"])
    names = metrics.channels or tuple(f"y{c}" for c in range(metrics.per_channel.shape[1]))
    for c, name in enumerate(names):
        for i in range(metrics.H):
            w.writerow([i + 1, name, _fmt(metrics.per_channel[i, c])])
    return buf.getvalue()


def export_report(reports: Mapping[str, CriteriaReport], path) -> list[Path]:
    """Write ``criteria.csv`` and one ``curves_<model>.csv`` per model into ``path``."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / "criteria.csv"]
    written[0].write_text(criteria_table(reports))
    for label, rep in reports.items():
        if rep.test_metrics is None:
            continue
        p = out / f"curves_{label}.csv"
        p.write_text(curve_table(rep.test_metrics))
        written.append(p)
    for label, rep in reports.items():
        for msg in rep.warnings:
            warnings.warn(f"{label}: {msg}", RuntimeWarning, stacklevel=2)
    return written
