from dataclasses import replace
from datetime import datetime, timezone

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poolid.data import BENCHMARK_SCHEMA, check_split
from poolid.simulator import (ControllerConfig, Controls, PlantConfig, PlantState, SimulationError,
                              benchmark_timeline, heat_terms, run_episode, step, valve_map)
from poolid.simulator.config import ScenarioScript, TimedAction, default_scenarios

NO_FAULTS = PlantConfig(dropout_rate_per_row=0.0, spike_rate_per_cell=0.0)
STATE = PlantState(28.0, 31.0, 27.0, 55.0, 10.0)


def _hours(frame):
    secs = np.array([(frame.time_at(i) - frame.start_time).total_seconds() for i in range(frame.n_samples)])
    h0 = frame.start_time.hour + frame.start_time.minute / 60
    return (h0 + secs / 3600.0) % 24.0, (secs // 86400).astype(int)


# ---------------------------------------------------------------- heat balance

def test_no_drive_terms_vanish():
    cfg = PlantConfig().lossless()
    h1, h2 = heat_terms(STATE, cfg, Controls())
    assert h1.total == 0.0 and h2.total == 0.0
    h1, _ = heat_terms(STATE, PlantConfig(), Controls(valve1=0.0))
    assert h1.q_he == 0.0
    hot = replace(PlantConfig(), supply_temp_c=STATE.t_pool1)
    assert heat_terms(STATE, hot, Controls(valve1=1.0))[0].q_he == 0.0


def test_euler_accumulation_hand_computed():
    # 300 kW net into the 672 m3 pool for one hour
    cfg = PlantConfig().lossless()
    cap = 672 * 1000 * 4186
    assert cfg.heat_capacity_j_per_k(0) == cap
    expected = 300e3 * 3600 / cap
    assert expected == pytest.approx(0.384, abs=5e-4)
    # exchanger duty held at exactly 300 kW by re-targeting the supply temperature each minute
    eff, c_hot = cfg.hx_effectiveness[0], cfg.hot_side_capacity_kw_per_k[0] * 1e3
    s = STATE
    for _ in range(60):
        c = replace(cfg, supply_temp_c=s.t_pool1 + 300e3 / (eff * c_hot))
        assert heat_terms(s, c, Controls(valve1=1.0))[0].q_he == pytest.approx(300e3, rel=1e-12)
        s = step(s, c, Controls(valve1=1.0))
    assert s.t_pool1 - 28.0 == pytest.approx(expected, rel=1e-9)


def test_constant_drive_accumulates_linearly():
    cfg = replace(PlantConfig().lossless(), k_cond=(1000.0, 0.0))
    s, ctl = STATE, Controls(t_ground=STATE.t_pool1 - 10.0)   # constant -10 kW conduction
    q = -1000.0 * 10.0
    for n in range(1, 4):
        s = step(s, cfg, ctl, dt=60.0)
    assert s.t_pool1 - 28.0 == pytest.approx(n * q * 60 / cfg.heat_capacity_j_per_k(0), rel=1e-3)


def test_conservation_over_ten_thousand_steps():
    cfg = PlantConfig().lossless()
    s = STATE
    for _ in range(10_000):
        new = step(s, cfg, Controls())
        assert abs(new.t_pool1 - s.t_pool1) <= 1e-9 and abs(new.t_pool2 - s.t_pool2) <= 1e-9
        s = new
    assert s.pools == STATE.pools


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(10, 50))
def test_exchanger_duty_monotone_in_valve(a, b, t_pool):
    lo, hi = sorted((a, b))
    s = replace(STATE, t_pool1=t_pool)
    q = [heat_terms(s, PlantConfig(), Controls(valve1=v))[0].q_he for v in (lo, hi)]
    assert q[0] <= q[1]
    assert valve_map(0.0, 50) == 0.0 and valve_map(1.0, 50) == 1.0


def test_boiler_capacity_curtails_proportionally():
    cfg = replace(PlantConfig(), hot_side_capacity_kw_per_k=(60.0, 60.0))
    # uncurtailed duty: eps * C_min * (T_supply - T_pool) with the hot side as C_min
    demand = [0.8 * 60e3 * (75.0 - 28.0), 0.8 * 60e3 * (75.0 - 31.0)]
    share = 1e6 / (sum(demand) + 400e3)
    h1, h2 = heat_terms(STATE, cfg, Controls(1.0, 1.0, other_load_w=400e3))
    assert h1.q_he == pytest.approx(demand[0] * share, rel=1e-12)
    assert h2.q_he == pytest.approx(demand[1] * share, rel=1e-12)
    assert h1.q_he + h2.q_he + 400e3 * share == pytest.approx(1e6, rel=1e-12)


def test_guard_violation_raises():
    with pytest.raises(SimulationError, match="t_pool1"):
        step(replace(STATE, t_pool1=59.99), replace(PlantConfig().lossless(), k_cond=(-1e9, 0.0)),
             Controls(t_ground=0.0))
    with pytest.raises(ValueError):
        step(STATE, PlantConfig(), Controls(), dt=120.0)


@pytest.mark.parametrize("kw", [dict(volumes_m3=(0.0, 212.0)), dict(hx_effectiveness=(1.2, 0.8))])
def test_plant_config_invariants(kw):
    with pytest.raises(ValueError):
        PlantConfig(**kw)


@pytest.mark.parametrize("kw", [dict(schedules=(((1.0, 28.0),), ((0.0, 31.0),))),
                                dict(schedules=(((0.0, 40.0),), ((0.0, 31.0),))),
                                dict(modes=("pid", "constant_setpoint"))])
def test_controller_config_invariants(kw):
    with pytest.raises(ValueError):
        ControllerConfig(**kw)


def test_config_round_trips():
    assert PlantConfig.from_dict(PlantConfig().to_dict()) == PlantConfig()
    assert ControllerConfig.from_dict(ControllerConfig().to_dict()) == ControllerConfig()


def test_scenario_scripts():
    sc = default_scenarios()
    assert sorted(sc) == [1, 2, 3, 4]
    freeze = [a for a in sc[1].actions if a.kind == "valve_freeze"]
    assert freeze == [TimedAction(6.0, 66.0, "valve_freeze", 50.0, pool=0)]
    with pytest.raises(ValueError):
        TimedAction(2.0, 1.0, "setpoint", 25.0, 0)


# ---------------------------------------------------------------- episodes

@pytest.fixture(scope="module")
def week():
    return run_episode(NO_FAULTS, ControllerConfig.benchmark(), duration_s=8 * 86400, seed=4,
                       start=datetime(2020, 1, 6, tzinfo=timezone.utc))


def test_episode_schema_and_determinism(week):
    assert week.channels == BENCHMARK_SCHEMA
    assert week.sample_period == 60 and week.n_samples == 8 * 1440
    again = run_episode(NO_FAULTS, ControllerConfig.benchmark(), duration_s=8 * 86400, seed=4,
                        start=datetime(2020, 1, 6, tzinfo=timezone.utc))
    assert week.values.tobytes() == again.values.tobytes()
    other = run_episode(NO_FAULTS, ControllerConfig.benchmark(), duration_s=8 * 86400, seed=5,
                        start=datetime(2020, 1, 6, tzinfo=timezone.utc))
    assert not np.array_equal(week.values, other.values)
    with pytest.raises(ValueError):
        run_episode(NO_FAULTS, ControllerConfig.benchmark(), duration_s=3600)


def test_night_setback_daily_dip(week):
    hour, day = _hours(week)
    t1 = week.values[:, 10]
    for d in range(2, 8):
        sel = day == d
        h, y = hour[sel], t1[sel]
        assert not (7.0 <= h[np.argmin(y)] < 17.5), f"day {d}: minimum during opening hours"
        assert y.min() < 27.8
        at_open = y[np.argmin(np.abs(h - 7.0))]
        assert abs(at_open - 28.0) <= 0.3


def test_constant_setpoint_band_outside_refills():
    f = run_episode(NO_FAULTS, ControllerConfig.constant(28.0, 31.0), duration_s=10 * 86400, seed=2,
                    start=datetime(2020, 2, 1, tzinfo=timezone.utc))
    hour, day = _hours(f)
    refill = f.values[:, 8] > 0
    after = day >= 3
    t2 = f.values[:, 11]
    assert np.all(np.abs(t2[after & ~refill] - 31.0) <= 0.5)
    # stability band for both pools after the transient
    assert np.all(np.abs(f.values[after, 10] - 28.0) <= 3.0)
    assert np.all(np.abs(t2[after] - 31.0) <= 3.0)


def test_faults_are_injected_by_default():
    f = run_episode(PlantConfig(dropout_rate_per_row=5e-3), ControllerConfig.benchmark(),
                    duration_s=2 * 86400, seed=1)
    rows = np.isnan(f.values).any(axis=1)
    assert rows.any() and not rows[0] and not rows[-1]
    assert np.array_equal(rows, np.isnan(f.values).all(axis=1))


def test_stuck_valve_scenario():
    f = run_episode(NO_FAULTS, ControllerConfig.benchmark(), default_scenarios()[1], duration_s=3 * 86400,
                    seed=0)
    stuck = f.values[6 * 60:66 * 60, 1]
    assert np.all(stuck == 50.0)


# ---------------------------------------------------------------- suite

def test_timeline_layout():
    specs = benchmark_timeline()
    roles = [s.role for s in specs]
    assert roles.count("test") == 3 and roles.count("scenario") == 4
    assert roles[0] == "test" and roles[-1] == "test"
    assert {s.label for s in specs if s.role == "scenario"} == {f"scenario_{i}" for i in range(1, 5)}
    for a, b in zip(specs, specs[1:]):
        assert a.end <= b.start
    short = benchmark_timeline(days=60)
    assert [s.role for s in short].count("scenario") == 4
    with pytest.raises(ValueError):
        benchmark_timeline(days=30)


def test_suite_split_invariants(year_raw_suite, small_raw_suite):
    for split in (year_raw_suite, small_raw_suite):
        check_split(split)
        assert len(split.test_sections) == 3 and len(split.scenario_sections) == 4


def test_capacity_never_exceeded(year_raw_suite):
    for _, _, f in year_raw_suite.all_sections():
        p = f.values[:, 0]
        assert np.nanmax(p) <= 1000.0


def test_scenario_two_trace(year_raw_suite):
    f = dict(year_raw_suite.scenario_sections)["scenario_2"]
    assert np.nanmin(f.values[:, 11]) <= 25.5
    assert np.nanmin(f.values[:, 10]) >= 26.5


def test_winter_needs_more_boiler_power_than_summer(year_raw_suite):
    frames = [f for _, _, f in year_raw_suite.all_sections()]

    def month_mean(m):
        vals = [f.values[i, 0] for f in frames for i in range(0, f.n_samples, 60) if f.time_at(i).month == m]
        return np.nanmean(vals)

    assert month_mean(1) > month_mean(7)
