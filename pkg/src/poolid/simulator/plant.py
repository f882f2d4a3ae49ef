"""Pool heat balance: per-pool heat flows and the explicit Euler update."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

from .config import PlantConfig

T_MIN, T_MAX = 0.0, 60.0


class SimulationError(RuntimeError):
    """State left the physical guard band; the episode is aborted."""


@dataclass(frozen=True)
class PlantState:
    t_pool1: float
    t_pool2: float
    t_air: float
    humidity: float
    t_outdoor: float
    integ1: float = 0.0  # PI integrator states, % valve opening
    integ2: float = 0.0

    @property
    def pools(self) -> tuple[float, float]:
        return (self.t_pool1, self.t_pool2)

    def check(self, where: str = "") -> None:
        for name in ("t_pool1", "t_pool2", "t_air"):
            v = getattr(self, name)
            if not (T_MIN <= v <= T_MAX) or math.isnan(v):
                raise SimulationError(f"{name}={v!r} outside [{T_MIN}, {T_MAX}] degC {where}".rstrip())


@dataclass(frozen=True)
class Controls:
    """Actuator positions and exogenous drivers for one integration step."""

    valve1: float = 0.0          # opening, 0..1
    valve2: float = 0.0
    refill_m3h: float = 0.0      # total fresh-water flow, split by pool volume
    t_fresh: float = 12.0
    t_ground: float = 12.0
    occupancy: float = 1.0
    other_load_w: float = 0.0    # hall + air handling demand on the boiler
    recycle1_m3h: float | None = None
    recycle2_m3h: float | None = None


@dataclass(frozen=True)
class HeatTerms:
    q_evap: float
    q_rad: float
    q_cond: float
    q_conv: float
    q_refill: float
    q_he: float

    @property
    def total(self) -> float:
        return self.q_evap + self.q_rad + self.q_cond + self.q_conv + self.q_refill + self.q_he


def valve_map(opening: float, rangeability: float) -> float:
    """Equal-percentage characteristic, 0 -> 0 and 1 -> 1."""
    v = min(max(opening, 0.0), 1.0)
    return (rangeability ** v - 1.0) / (rangeability - 1.0)


def _he_demand(cfg: PlantConfig, pool: int, t_pool: float, opening: float, recycle_m3h: float) -> float:
    c_hot = cfg.hot_side_capacity_kw_per_k[pool] * 1e3
    c_cold = cfg.rho_w * cfg.c_w * recycle_m3h / 3600.0
    c_min = min(c_hot, c_cold)
    dt = cfg.supply_temp_c - t_pool
    return cfg.hx_effectiveness[pool] * c_min * dt * valve_map(opening, cfg.valve_rangeability)


def curtailment(cfg: PlantConfig, he_demand: float, other_load_w: float) -> float:
    """Fraction of demand the boilers can deliver (proportional sharing)."""
    demand = max(he_demand, 0.0) + max(other_load_w, 0.0)
    cap = cfg.boiler_capacity_kw * 1e3
    return 1.0 if demand <= cap else cap / demand


def heat_terms(state: PlantState, cfg: PlantConfig, controls: Controls) -> tuple[HeatTerms, HeatTerms]:
    """Heat flows into each pool in W (losses negative)."""
    pools = state.pools
    recycle = (controls.recycle1_m3h if controls.recycle1_m3h is not None else cfg.recycle_flow_m3h[0],
               controls.recycle2_m3h if controls.recycle2_m3h is not None else cfg.recycle_flow_m3h[1])
    openings = (controls.valve1, controls.valve2)
    demand = [_he_demand(cfg, i, pools[i], openings[i], recycle[i]) for i in (0, 1)]
    share = curtailment(cfg, demand[0] + demand[1], controls.other_load_w)
    dry = 1.0 - state.humidity / 100.0
    t_env = state.t_air - cfg.envelope_coupling * (state.t_air - state.t_outdoor)
    vol_total = cfg.volumes_m3[0] + cfg.volumes_m3[1]
    out = []
    for i in (0, 1):
        tp = pools[i]
        q_refill_flow = controls.refill_m3h * cfg.volumes_m3[i] / vol_total
        out.append(HeatTerms(
            q_evap=-cfg.k_evap[i] * dry * controls.occupancy * (tp - state.t_air + cfg.evap_offset_k),
            q_rad=-cfg.k_rad[i] * (tp - t_env),
            q_cond=-cfg.k_cond[i] * (tp - controls.t_ground),
            q_conv=-cfg.k_conv[i] * (tp - state.t_air),
            q_refill=cfg.rho_w * cfg.c_w * q_refill_flow / 3600.0 * (controls.t_fresh - tp),
            q_he=demand[i] * share,
        ))
    return out[0], out[1]


def step(state: PlantState, cfg: PlantConfig, controls: Controls, dt: float = 60.0) -> PlantState:
    """Explicit Euler update of the pool temperatures; other fields are carried over."""
    if dt > 60.0:
        raise ValueError("internal step must not exceed 60 s")
    h1, h2 = heat_terms(state, cfg, controls)
    new = replace(state,
                  t_pool1=state.t_pool1 + h1.total * dt / cfg.heat_capacity_j_per_k(0),
                  t_pool2=state.t_pool2 + h2.total * dt / cfg.heat_capacity_j_per_k(1))
    new.check()
    return new
