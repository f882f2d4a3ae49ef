"""Plant, controller and scenario configuration for the two-pool simulator.

Volumes, recycling flows, buffer sizes and boiler capacities are the
facility's published characteristics. Every other coefficient (heat-exchanger
conductance, loss coefficients, schedules, noise levels) is an invented,
non-physical-ground-truth default chosen to give plausible magnitudes.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace


@dataclass(frozen=True)
class PlantConfig:
    # facility characteristics
    volumes_m3: tuple[float, float] = (672.0, 212.0)
    recycle_flow_m3h: tuple[float, float] = (189.0, 142.0)
    buffer_volumes_m3: tuple[float, float] = (30.0, 35.0)  # informational, not in the heat balance
    rho_w: float = 1000.0
    c_w: float = 4186.0
    wood_boiler_kw: float = 650.0
    gas_boiler_kw: float = 350.0

    # heat exchangers and valves (invented)
    hx_effectiveness: tuple[float, float] = (0.8, 0.8)
    hot_side_capacity_kw_per_k: tuple[float, float] = (15.0, 7.5)
    valve_rangeability: float = 50.0
    supply_temp_c: float = 75.0

    # linearised losses, W/K (invented)
    k_evap: tuple[float, float] = (14700.0, 11000.0)
    k_rad: tuple[float, float] = (1500.0, 1100.0)
    k_cond: tuple[float, float] = (500.0, 400.0)
    k_conv: tuple[float, float] = (2000.0, 1500.0)
    evap_offset_k: float = 8.0          # vapour-pressure gap expressed as an equivalent temperature
    night_evap_factor: float = 0.5      # occupancy factor when closed
    envelope_coupling: float = 0.3      # radiant envelope sits this fraction from air toward outdoor

    # refill (invented schedule, published 2-3 pulses/day)
    refill_flow_m3h: float = 20.0
    refill_times_h: tuple[float, ...] = (6.0, 14.0, 21.0)
    refill_durations_h: tuple[float, ...] = (0.75, 0.5, 0.5)
    refill_third_pulse_prob: float = 0.5
    fresh_water_c: tuple[float, float] = (8.0, 18.0)  # seasonal min, max

    # building air (invented)
    air_setpoint_c: tuple[float, float] = (27.5, 26.5)  # open, closed
    air_tau_h: float = 1.0
    air_outdoor_leak: float = 0.05
    humidity_base_pct: float = 55.0
    humidity_occupancy_gain: float = 8.0
    humidity_pool_gain: float = 0.4
    humidity_tau_h: float = 1.0
    ahu_ua_kw_per_k: float = 6.0

    # sports hall (invented magnitude)
    hall_max_kw: float = 150.0
    hall_hours: tuple[float, float] = (8.0, 22.0)

    # climate (invented, temperate oceanic)
    outdoor_mean_c: float = 12.0
    outdoor_seasonal_amp_c: float = 6.5
    outdoor_diurnal_amp_c: float = 3.5
    outdoor_noise_c: float = 1.5
    ground_temp_c: tuple[float, float] = (10.0, 14.0)

    # opening hours
    open_hours: tuple[float, float] = (7.0, 17.5)
    night_flow_factor: float = 0.7

    # sensor noise (std)
    noise_pool_k: float = 0.01
    noise_air_k: float = 0.05
    noise_humidity_pct: float = 0.3
    noise_outdoor_k: float = 0.1
    noise_flow_frac: float = 0.01
    noise_power_kw: float = 2.0

    # logger faults: short dropouts (whole rows) and single-sample spikes
    dropout_rate_per_row: float = 2e-4
    dropout_max_len: int = 3
    spike_rate_per_cell: float = 2e-5
    spike_size_sd: float = 40.0

    def __post_init__(self):
        positives = (list(self.volumes_m3) + list(self.recycle_flow_m3h) + list(self.buffer_volumes_m3)
                     + [self.rho_w, self.c_w, self.wood_boiler_kw, self.gas_boiler_kw])
        if any(v <= 0 for v in positives):
            raise ValueError("volumes, flows and capacities must be positive")
        if any(not 0 < e <= 1 for e in self.hx_effectiveness):
            raise ValueError("heat-exchanger effectiveness must lie in (0, 1]")

    @property
    def boiler_capacity_kw(self) -> float:
        return self.wood_boiler_kw + self.gas_boiler_kw

    def heat_capacity_j_per_k(self, pool: int) -> float:
        return self.volumes_m3[pool] * self.rho_w * self.c_w

    def lossless(self) -> "PlantConfig":
        zero = (0.0, 0.0)
        return replace(self, k_evap=zero, k_rad=zero, k_cond=zero, k_conv=zero, refill_flow_m3h=0.0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PlantConfig":
        return _from_dict(cls, d)


def _from_dict(cls, d: dict):
    known = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    return cls(**kw)


Schedule = tuple[tuple[float, float], ...]  # (hour of day, setpoint), sorted, first entry at hour 0


def constant_schedule(setpoint: float) -> Schedule:
    return ((0.0, setpoint),)


def night_setback_schedule(day: float = 28.0, night: float = 26.5,
                           reheat_h: float = 4.0, setback_h: float = 17.5) -> Schedule:
    return ((0.0, night), (reheat_h, day), (setback_h, night))


def setpoint_at(schedule: Schedule, hour: float) -> float:
    sp = schedule[0][1]
    for h, v in schedule:
        if hour >= h:
            sp = v
    return sp


@dataclass(frozen=True)
class ControllerConfig:
    """Two PI loops, one per pool, acting on the 3-way valves (0-100 %)."""

    kp: tuple[float, float] = (150.0, 100.0)      # %/K
    ti_s: tuple[float, float] = (7200.0, 7200.0)  # integral time
    schedules: tuple[Schedule, Schedule] = (night_setback_schedule(), constant_schedule(31.0))
    modes: tuple[str, str] = ("night_setback", "constant_setpoint")
    boost_prob: float = 0.25                       # pool 2 baby-swim Wednesdays
    boost: tuple[float, float, float] = (32.0, 5.0, 12.0)  # setpoint, from hour, to hour

    def __post_init__(self):
        for mode, sched in zip(self.modes, self.schedules):
            if mode not in ("constant_setpoint", "night_setback"):
                raise ValueError(f"unknown controller mode {mode!r}")
            if not sched or sched[0][0] != 0.0:
                raise ValueError("setpoint schedule must start at hour 0 to cover 24 h")
            if any(not 20.0 <= sp <= 35.0 for _, sp in sched):
                raise ValueError("setpoints must lie in [20, 35] degC")

    @property
    def ki(self) -> tuple[float, float]:
        return (self.kp[0] / self.ti_s[0], self.kp[1] / self.ti_s[1])

    @classmethod
    def benchmark(cls) -> "ControllerConfig":
        return cls()

    @classmethod
    def constant(cls, sp1: float = 28.0, sp2: float = 31.0) -> "ControllerConfig":
        return cls(schedules=(constant_schedule(sp1), constant_schedule(sp2)),
                   modes=("constant_setpoint", "constant_setpoint"), boost_prob=0.0)

    def to_dict(self) -> dict:
        return {"kp": list(self.kp), "ti_s": list(self.ti_s), "modes": list(self.modes),
                "schedules": [[list(e) for e in s] for s in self.schedules],
                "boost_prob": self.boost_prob, "boost": list(self.boost)}

    @classmethod
    def from_dict(cls, d: dict) -> "ControllerConfig":
        return cls(kp=tuple(d["kp"]), ti_s=tuple(d["ti_s"]), modes=tuple(d["modes"]),
                   schedules=tuple(tuple(tuple(e) for e in s) for s in d["schedules"]),
                   boost_prob=d.get("boost_prob", 0.0), boost=tuple(d.get("boost", (32.0, 5.0, 12.0))))


@dataclass(frozen=True)
class TimedAction:
    start_h: float
    end_h: float
    kind: str            # "valve_freeze" | "setpoint" | "air_setpoint"
    value: float
    pool: int | None = None

    def __post_init__(self):
        if self.kind not in ("valve_freeze", "setpoint", "air_setpoint"):
            raise ValueError(f"unknown action kind {self.kind!r}")
        if self.end_h <= self.start_h:
            raise ValueError("action must have positive duration")


@dataclass(frozen=True)
class ScenarioScript:
    scenario_id: int
    description: str
    duration_h: float
    actions: tuple[TimedAction, ...] = field(default_factory=tuple)

    @property
    def label(self) -> str:
        return f"scenario_{self.scenario_id}"


def default_scenarios() -> dict[int, ScenarioScript]:
    """The four extrapolation episodes: stuck valve, two cool-downs, simultaneous reheat."""
    return {
        1: ScenarioScript(1, "stuck 3-way valve on pool 1 at 50 %", 72.0, (
            TimedAction(6.0, 66.0, "valve_freeze", 50.0, pool=0),
        )),
        2: ScenarioScript(2, "pool 2 cooled to 25 degC, pool 1 at nominal", 96.0, (
            TimedAction(0.0, 96.0, "setpoint", 28.0, pool=0),
            TimedAction(4.0, 60.0, "setpoint", 25.0, pool=1),
        )),
        3: ScenarioScript(3, "pool 1 cooled to 25 degC while pool 2 at 25 degC", 120.0, (
            TimedAction(4.0, 80.0, "setpoint", 25.0, pool=0),
            TimedAction(4.0, 80.0, "setpoint", 25.0, pool=1),
            TimedAction(4.0, 80.0, "air_setpoint", 22.0),
        )),
        4: ScenarioScript(4, "both pools reheated to nominal at the same time", 96.0, (
            TimedAction(0.0, 44.0, "setpoint", 25.5, pool=0),
            TimedAction(0.0, 44.0, "setpoint", 27.0, pool=1),
            TimedAction(44.0, 96.0, "setpoint", 28.0, pool=0),
        )),
    }
