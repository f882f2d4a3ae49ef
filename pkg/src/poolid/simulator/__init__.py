"""Two-pool thermal plant simulator used as a ground-truth data source."""
from .config import (ControllerConfig, PlantConfig, ScenarioScript, TimedAction, constant_schedule,
                     default_scenarios, night_setback_schedule)
from .episode import (BENCHMARK_START, benchmark_timeline, generate_benchmark_suite, run_episode,
                      simulate_year, split_from_timeline)
from .plant import Controls, HeatTerms, PlantState, SimulationError, heat_terms, step, valve_map
