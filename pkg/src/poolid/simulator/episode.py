"""Closed-loop episodes and the synthetic benchmark suite."""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone

import numpy as np
from scipy.signal import lfilter

from ..data import BENCHMARK_SCHEMA, DatasetSplit, SignalFrame
from .config import ControllerConfig, PlantConfig, ScenarioScript, default_scenarios, setpoint_at
from .plant import Controls, PlantState, SimulationError, heat_terms

DT = 60.0
DAY = 86400.0
BENCHMARK_START = datetime(2019, 9, 1, tzinfo=timezone.utc)


def episode_rng(seed: int, label: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(label.encode())])


def _ar1(rng, n: int, std: float, tau_s: float) -> np.ndarray:
    a = math.exp(-DT / tau_s)
    e = rng.standard_normal(n) * std * math.sqrt(1 - a * a)
    return lfilter([1.0], [1.0, -a], e, zi=[a * std * rng.standard_normal()])[0]


def _relax(target: np.ndarray, x0: float, tau_s: float) -> np.ndarray:
    """First-order lag x[k+1] = a x[k] + (1 - a) target[k], x[0] = x0."""
    a = math.exp(-DT / tau_s)
    y = lfilter([0.0, 1.0 - a], [1.0, -a], target, zi=[a * x0])[0]
    y[0] = x0
    return y


@dataclass
class _Drivers:
    hour: np.ndarray
    is_open: np.ndarray
    t_out: np.ndarray
    t_fresh: np.ndarray
    t_ground: np.ndarray
    occupancy: np.ndarray
    refill: np.ndarray
    recycle1: np.ndarray
    recycle2: np.ndarray
    hall_w: np.ndarray
    t_air: np.ndarray
    ahu_w: np.ndarray
    sp1: np.ndarray
    sp2: np.ndarray
    freeze1: np.ndarray
    freeze2: np.ndarray


def _drivers(cfg: PlantConfig, ctrl: ControllerConfig, scenarios, start: datetime, n: int,
             rng: np.random.Generator) -> _Drivers:
    secs = (start - start.replace(hour=0, minute=0, second=0, microsecond=0)).total_seconds() + DT * np.arange(n)
    hour = (secs / 3600.0) % 24.0
    day_idx = (secs // DAY).astype(int)
    n_days = int(day_idx[-1]) + 1
    year_start = datetime(start.year, 1, 1, tzinfo=timezone.utc)
    doy = ((start - year_start).total_seconds() + DT * np.arange(n)) / DAY
    season = np.cos(2 * np.pi * (doy - 20.0) / 365.25)  # +1 around 20 January

    t_out = (cfg.outdoor_mean_c - cfg.outdoor_seasonal_amp_c * season
             + cfg.outdoor_diurnal_amp_c * np.cos(2 * np.pi * (hour - 15.0) / 24.0)
             + _ar1(rng, n, cfg.outdoor_noise_c, 6 * 3600.0))
    lo, hi = cfg.fresh_water_c
    t_fresh = 0.5 * (lo + hi) - 0.5 * (hi - lo) * np.cos(2 * np.pi * (doy - 50.0) / 365.25)
    glo, ghi = cfg.ground_temp_c
    t_ground = 0.5 * (glo + ghi) - 0.5 * (ghi - glo) * np.cos(2 * np.pi * (doy - 60.0) / 365.25)

    o0, o1 = cfg.open_hours
    is_open = (hour >= o0) & (hour < o1)
    attendance = rng.uniform(0.6, 1.4, n_days)
    occupancy = np.where(is_open, attendance[day_idx], cfg.night_evap_factor)

    refill = np.zeros(n)
    third = rng.random(n_days) < cfg.refill_third_pulse_prob
    for j, (t_h, d_h) in enumerate(zip(cfg.refill_times_h, cfg.refill_durations_h)):
        on = (hour >= t_h) & (hour < t_h + d_h)
        if j == 2:
            on &= third[day_idx]
        refill[on] = cfg.refill_flow_m3h

    night = np.where(is_open, 1.0, cfg.night_flow_factor)
    recycle1 = cfg.recycle_flow_m3h[0] * night
    recycle2 = cfg.recycle_flow_m3h[1] * night

    h0, h1 = cfg.hall_hours
    hourly_on = rng.random(n_days * 24) < 0.6
    hall_on = (hour >= h0) & (hour < h1) & hourly_on[day_idx * 24 + hour.astype(int)]
    daily_out = np.bincount(day_idx, weights=t_out, minlength=n_days) / np.bincount(day_idx, minlength=n_days)
    hall_level = np.clip(12.0 * (17.0 - daily_out), 0.0, cfg.hall_max_kw)
    hall_w = np.where(hall_on, hall_level[day_idx], 0.0) * 1e3

    air_sp = np.where(is_open, cfg.air_setpoint_c[0], cfg.air_setpoint_c[1])
    sp1 = np.array([setpoint_at(ctrl.schedules[0], h) for h in np.round(hour, 6)])
    sp2 = np.array([setpoint_at(ctrl.schedules[1], h) for h in np.round(hour, 6)])
    if ctrl.boost_prob > 0:
        weekday = np.array([(start + timedelta(days=int(d))).weekday() for d in range(n_days)])
        boost_days = (weekday == 2) & (rng.random(n_days) < ctrl.boost_prob)
        bsp, bh0, bh1 = ctrl.boost
        boost = boost_days[day_idx] & (hour >= bh0) & (hour < bh1)
        sp2 = np.where(boost, bsp, sp2)
    freeze1 = np.full(n, np.nan)
    freeze2 = np.full(n, np.nan)
    for offset_s, script in scenarios:
        for act in script.actions:
            i0 = int(round((offset_s + act.start_h * 3600.0) / DT))
            i1 = int(round((offset_s + act.end_h * 3600.0) / DT))
            sl = slice(max(i0, 0), max(min(i1, n), 0))
            if act.kind == "setpoint":
                (sp1 if act.pool == 0 else sp2)[sl] = act.value
            elif act.kind == "valve_freeze":
                (freeze1 if act.pool == 0 else freeze2)[sl] = act.value
            else:
                air_sp[sl] = act.value

    air_target = air_sp - cfg.air_outdoor_leak * (air_sp - t_out)
    t_air = _relax(air_target, air_target[0], cfg.air_tau_h * 3600.0) + _ar1(rng, n, 0.1, 1800.0)
    ahu_w = cfg.ahu_ua_kw_per_k * np.maximum(t_air - t_out, 0.0) * 1e3
    return _Drivers(hour, is_open, t_out, t_fresh, t_ground, occupancy, refill, recycle1, recycle2,
                    hall_w, t_air, ahu_w, sp1, sp2, freeze1, freeze2)


def run_episode(config: PlantConfig, controller: ControllerConfig,
                scenario: ScenarioScript | list[tuple[datetime, ScenarioScript]] | None = None,
                duration_s: float = 7 * DAY, seed: int = 0, start: datetime = BENCHMARK_START,
                label: str = "episode", initial: PlantState | None = None) -> SignalFrame:
    """Simulate the closed loop at 60 s and return the logged benchmark channels.

    ``scenario`` is either one script applied from the episode start or a list
    of ``(start_time, script)`` placements.
    """
    if duration_s < DAY:
        raise ValueError("episodes must last at least one day")
    n = int(round(duration_s / DT))
    rng = episode_rng(seed, label)
    if scenario is None:
        placed = []
    elif isinstance(scenario, ScenarioScript):
        placed = [(0.0, scenario)]
    else:
        placed = [((t - start).total_seconds(), s) for t, s in scenario]
    d = _drivers(config, controller, placed, start, n, rng)

    noise_pool = rng.standard_normal((n, 2)) * config.noise_pool_k
    if initial is None:
        initial = PlantState(float(d.sp1[0]), float(d.sp2[0]), float(d.t_air[0]),
                             config.humidity_base_pct, float(d.t_out[0]), 55.0, 55.0)
    state = initial
    kp1, kp2 = controller.kp
    ki1, ki2 = controller.ki
    hum_a = math.exp(-DT / (config.humidity_tau_h * 3600.0))
    hum_noise = _ar1(rng, n, 0.5, 3600.0)
    cap = config.boiler_capacity_kw * 1e3

    log = np.empty((n, 12))
    integ = [state.integ1, state.integ2]
    humidity = state.humidity
    tp = [state.t_pool1, state.t_pool2]
    for k in range(n):
        valves = [0.0, 0.0]
        for i, (kp, ki, sp, frz) in enumerate(((kp1, ki1, d.sp1[k], d.freeze1[k]),
                                               (kp2, ki2, d.sp2[k], d.freeze2[k]))):
            if frz == frz:  # not NaN: actuator stuck, integrator held
                valves[i] = float(frz)
                continue
            err = float(sp) - (tp[i] + noise_pool[k, i])
            raw = kp * err + integ[i]
            if (0.0 < raw < 100.0) or (raw >= 100.0 and err < 0) or (raw <= 0.0 and err > 0):
                integ[i] = min(max(integ[i] + ki * err * DT, -50.0), 150.0)
            valves[i] = min(max(kp * err + integ[i], 0.0), 100.0)
        t_air = float(d.t_air[k])
        t_out = float(d.t_out[k])
        state = PlantState(tp[0], tp[1], t_air, humidity, t_out, integ[0], integ[1])
        state.check(f"at step {k} ({label})")
        other = float(d.hall_w[k] + d.ahu_w[k])
        ctl = Controls(valves[0] / 100.0, valves[1] / 100.0, float(d.refill[k]), float(d.t_fresh[k]),
                       float(d.t_ground[k]), float(d.occupancy[k]), other,
                       float(d.recycle1[k]), float(d.recycle2[k]))
        h1, h2 = heat_terms(state, config, ctl)
        he = h1.q_he + h2.q_he
        demand = max(he, 0.0) + other
        share = 1.0 if demand <= cap else cap / demand
        boiler = he + other * share
        log[k, 0] = boiler / 1e3
        log[k, 1] = valves[0]
        log[k, 2] = valves[1]
        log[k, 3] = t_air
        log[k, 4] = humidity
        log[k, 5] = t_out
        log[k, 6] = d.recycle1[k]
        log[k, 7] = d.recycle2[k]
        log[k, 8] = d.refill[k]
        log[k, 9] = d.hall_w[k] * share / 1e3
        log[k, 10] = tp[0]
        log[k, 11] = tp[1]
        tp[0] += h1.total * DT / config.heat_capacity_j_per_k(0)
        tp[1] += h2.total * DT / config.heat_capacity_j_per_k(1)
        occ_open = 1.0 if d.is_open[k] else 0.0
        h_target = (config.humidity_base_pct + config.humidity_occupancy_gain * occ_open
                    + config.humidity_pool_gain * (0.5 * (tp[0] + tp[1]) - t_air))
        humidity = min(max(hum_a * humidity + (1 - hum_a) * h_target, 20.0), 95.0)
    log[:, 4] += hum_noise
    return _sensor_view(config, log, rng, start)


def _sensor_view(cfg: PlantConfig, log: np.ndarray, rng, start: datetime) -> SignalFrame:
    n = len(log)
    out = log.copy()
    out[:, 0] = np.clip(out[:, 0] + cfg.noise_power_kw * rng.standard_normal(n), 0.0, cfg.boiler_capacity_kw)
    out[:, 3] += cfg.noise_air_k * rng.standard_normal(n)
    out[:, 4] = np.clip(out[:, 4] + cfg.noise_humidity_pct * rng.standard_normal(n), 0.0, 100.0)
    out[:, 5] += cfg.noise_outdoor_k * rng.standard_normal(n)
    for j in (6, 7, 8):
        out[:, j] *= 1.0 + cfg.noise_flow_frac * rng.standard_normal(n)
    out[:, 9] = np.maximum(out[:, 9] + np.where(out[:, 9] > 0, cfg.noise_power_kw * rng.standard_normal(n), 0.0), 0.0)
    out[:, 10:12] += cfg.noise_pool_k * rng.standard_normal((n, 2))
    # logged at sensor resolution so files round-trip exactly
    out = np.round(out, 4)
    # spikes scaled by each channel's spread, then short dropouts (empty fields on disk)
    spikes = rng.random(out.shape) < cfg.spike_rate_per_cell
    spread = np.maximum(out.std(axis=0), 1e-3)
    out[spikes] += (cfg.spike_size_sd * spread * rng.choice([-1.0, 1.0], out.shape))[spikes]
    out[:, 0] = np.clip(out[:, 0], 0.0, cfg.boiler_capacity_kw)
    out[:, 4] = np.clip(out[:, 4], 0.0, 100.0)
    starts = np.flatnonzero(rng.random(n) < cfg.dropout_rate_per_row)
    lengths = rng.integers(1, cfg.dropout_max_len + 1, len(starts))
    for a, m in zip(starts.tolist(), lengths.tolist()):
        if 0 < a and a + m < n:  # keep the first and last rows so section edges stay valid
            out[a:a + m] = np.nan
    return SignalFrame(start, DT, BENCHMARK_SCHEMA, out)


# ---------------------------------------------------------------------------
# benchmark suite

def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    d = np.diff(np.concatenate([[0], mask.astype(np.int8), [0]]))
    return list(zip(np.flatnonzero(d == 1).tolist(), np.flatnonzero(d == -1).tolist()))


@dataclass(frozen=True)
class SectionSpec:
    role: str
    label: str
    start: datetime
    end: datetime


def benchmark_timeline(start: datetime = BENCHMARK_START, days: int = 366,
                       chunk_days: int = 30) -> list[SectionSpec]:
    """Section layout of the synthetic year.

    Two test sections sit at the ends of the year and one in mid-winter, the
    scenario episodes are spread over the cold season, and one guard day
    separates every test/scenario section from fitting data.
    """
    def at(day: float) -> datetime:
        return start + timedelta(days=day)

    layout = [("test", "test_1", 0, 10), ("scenario", "scenario_1", 49, 52),
              ("scenario", "scenario_2", 91, 95), ("test", "test_2", 134, 144),
              ("scenario", "scenario_4", 162, 166), ("scenario", "scenario_3", 201, 206)]
    if days < 366:
        # compressed layout for short suites: positions scale, scenario lengths do not
        if days < 60:
            raise ValueError("benchmark layout needs at least 60 days")
        f = days / 366
        t_len = max(2, round(10 * f))
        chunk_days = max(5, round(chunk_days * f))
        layout = [(r, lab, round(a * f), round(a * f) + (t_len if r == "test" else b - a))
                  for r, lab, a, b in layout]
    else:
        t_len = 10
    fixed = layout + [("test", "test_3", days - t_len, days)]
    fixed.sort(key=lambda r: r[2])
    blocked = np.zeros(days, dtype=bool)
    for _, _, a, b in fixed:
        blocked[max(a - 1, 0):min(b + 1, days)] = True
    free = [(a, b) for a, b in _runs(~blocked)]
    chunks = []
    for a, b in free:
        k = max(1, round((b - a) / chunk_days))
        edges = np.linspace(a, b, k + 1).round().astype(int).tolist()
        chunks.extend(zip(edges[:-1], edges[1:]))
    val_pick = {1, len(chunks) - 3}
    specs = [SectionSpec(r, lab, at(a), at(b)) for r, lab, a, b in fixed]
    n_train = n_val = 0
    for j, (a, b) in enumerate(chunks):
        if j in val_pick:
            n_val += 1
            specs.append(SectionSpec("validation", f"validation_{n_val}", at(a), at(b)))
        else:
            n_train += 1
            specs.append(SectionSpec("train", f"train_{n_train:02d}", at(a), at(b)))
    return sorted(specs, key=lambda s: s.start)


def simulate_year(config: PlantConfig = PlantConfig(), seed: int = 0, start: datetime = BENCHMARK_START,
                  days: int = 366, controller: ControllerConfig | None = None):
    """One continuous closed-loop year with the scenario scripts embedded.

    Returns ``(frame, timeline)``.
    """
    controller = controller or ControllerConfig.benchmark()
    timeline = benchmark_timeline(start, days)
    scripts = default_scenarios()
    placed = [(s.start, scripts[int(s.label.split("_")[1])]) for s in timeline if s.role == "scenario"]
    frame = run_episode(config, controller, placed, duration_s=days * DAY, seed=seed, start=start,
                        label="benchmark-year")
    return frame, timeline


def split_from_timeline(frame: SignalFrame, timeline: list[SectionSpec]) -> DatasetSplit:
    split = DatasetSplit()
    for s in timeline:
        split.role(s.role).append((s.label, frame.between(s.start, s.end)))
    return split


def generate_benchmark_suite(config: PlantConfig = PlantConfig(), seed: int = 0,
                             start: datetime = BENCHMARK_START, days: int = 366) -> DatasetSplit:
    frame, timeline = simulate_year(config, seed, start, days)
    return split_from_timeline(frame, timeline)


__all__ = ["run_episode", "simulate_year", "generate_benchmark_suite", "benchmark_timeline",
           "split_from_timeline", "SectionSpec", "SimulationError", "BENCHMARK_START"]
