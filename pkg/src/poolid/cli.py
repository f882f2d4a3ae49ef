"""``poolid`` command line: simulate | prepare | train | eval | hyperopt | report.

Settings come from a YAML file (``--config``), then ``POOLID_*`` environment
variables (``POOLID_MODEL__FAMILY=lss`` sets ``model.family``), then
``--set key.path=value`` and the global flags. Every run writes into a
timestamped directory under ``--out`` holding the resolved config.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .data import (DataError, DatasetSplit, NormalizationStats, SignalFrame, check_split, concat_frames,
                   load_frame, prepare_split, resample_moving_average, save_frame)
from .eval import EvalError, PerfectForecaster, export_report, scenario_eval
from .hyperopt import SearchError, build_model, default_space, make_cv_plan, run_search
from .linid import IdentificationError, StateSpaceModel
from .linid import FORMAT_TAG as LSS_TAG
from .nlarx import NlarxModel, TrainingDivergedError
from .nlarx.model import FORMAT_TAG as NLARX_TAG
from .simulator import ControllerConfig, PlantConfig, SimulationError
from .simulator.episode import simulate_year

log = logging.getLogger("poolid")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
ENV_PREFIX = "POOLID_"

DEFAULTS = {
    "seed": None,
    "out": "runs",
    "timestamp": True,
    "data": {"raw_dir": "data/raw", "prepared_dir": "data/prepared", "days": 366,
             "start": "2019-09-01T00:00:00Z", "resample_seconds": 600, "max_gap": 5},
    "model": {"family": "nlarx", "params": {}},
    "eval": {"H": 48, "past_len": 20, "stride": 1, "models": []},
    "hyperopt": {"family": "nlarx", "budget": 8, "folds": 4, "parallelism": 1,
                 "restrict": {}, "fixed": {}, "ledger": None},
}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration

def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _match_key(node: dict, key: str) -> str:
    """Existing key equal to ``key`` ignoring case (env var names are case-folded)."""
    if key in node:
        return key
    return next((k for k in node if isinstance(k, str) and k.lower() == key.lower()), key)


def _set_path(cfg: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        node = node.setdefault(_match_key(node, k), {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {dotted!r}: {k!r} is not a mapping")
    node[_match_key(node, keys[-1])] = value


def _env_overrides(environ) -> list[tuple[str, object]]:
    out = []
    for key in sorted(environ):
        if key.startswith(ENV_PREFIX):
            dotted = key[len(ENV_PREFIX):].lower().replace("__", ".")
            out.append((dotted, yaml.safe_load(environ[key])))
    return out


def resolve_config(args, environ=None) -> dict:
    environ = os.environ if environ is None else environ
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        try:
            loaded = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path} must hold a mapping")
        cfg = _merge(cfg, loaded)
    for dotted, value in _env_overrides(environ):
        _set_path(cfg, dotted, value)
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key.path=value, got {item!r}")
        k, v = item.split("=", 1)
        _set_path(cfg, k.strip(), yaml.safe_load(v))
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out"] = args.out
    if args.no_timestamp:
        cfg["timestamp"] = False
    if cfg.get("seed") is None:
        raise ConfigError("a seed is required (config key 'seed' or --seed)")
    if not isinstance(cfg["seed"], int) or isinstance(cfg["seed"], bool):
        raise ConfigError(f"seed must be an integer, got {cfg['seed']!r}")
    return cfg


def run_dir(cfg: dict, command: str) -> Path:
    out = Path(cfg["out"])
    if cfg.get("timestamp", True):
        out = out / f"{command}-{datetime.now().strftime('%Y%m%d-%H%M%S-%f')}"
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(cfg, sort_keys=True))
    return out


# ---------------------------------------------------------------------------
# bundle I/O

def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _parse_start(text: str) -> datetime:
    try:
        return datetime.fromisoformat(text.replace("Z", "+00:00")).astimezone(timezone.utc)
    except ValueError as exc:
        raise ConfigError(f"bad start time {text!r}") from exc


def _month_edges(start: datetime, end: datetime) -> list[datetime]:
    edges = [start]
    while edges[-1] < end:
        t = edges[-1]
        nxt = datetime(t.year + (t.month == 12), t.month % 12 + 1, 1, tzinfo=timezone.utc)
        edges.append(min(nxt, end))
    return edges


def write_raw_suite(frame: SignalFrame, timeline, out: Path, meta: dict) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    files = []
    edges = _month_edges(frame.start_time, frame.end_time)
    for i, (a, b) in enumerate(zip(edges[:-1], edges[1:])):
        name = f"month_{i + 1:02d}.csv"
        save_frame(frame.between(a, b), out / name)
        files.append(name)
    scenario_files = {}
    for s in timeline:
        if s.role == "scenario":
            name = f"{s.label}.csv"
            save_frame(frame.between(s.start, s.end), out / name)
            scenario_files[s.label] = name
    manifest = {
        "kind": "raw",
        "files": files,
        "scenario_files": scenario_files,
        "sample_period_s": frame.sample_period,
        "sections": [{"role": s.role, "label": s.label, "start": s.start.strftime("%Y-%m-%dT%H:%M:%SZ"),
                      "end": s.end.strftime("%Y-%m-%dT%H:%M:%SZ")} for s in timeline],
        **meta,
    }
    _write_json(out / "manifest.json", manifest)
    return manifest


def _read_manifest(path: Path) -> dict:
    mf = path / "manifest.json"
    if not mf.exists():
        raise DataError(f"{path} has no manifest.json")
    return json.loads(mf.read_text())


def load_raw_split(path: Path) -> DatasetSplit:
    manifest = _read_manifest(path)
    frame = concat_frames([load_frame(path / f) for f in manifest["files"]])
    split = DatasetSplit()
    for s in manifest["sections"]:
        start, end = _parse_start(s["start"]), _parse_start(s["end"])
        split.role(s["role"]).append((s["label"], frame.between(start, end)))
    return split


def save_bundle(split: DatasetSplit, stats: NormalizationStats, out: Path, meta: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    sections = []
    for role, label, frame in split.all_sections():
        save_frame(frame, out / f"{label}.csv", decimals=None)
        sections.append({"role": role, "label": label, "file": f"{label}.csv"})
    _write_json(out / "stats.json", stats.to_dict())
    _write_json(out / "manifest.json", {"kind": "prepared", "normalized": True, "sections": sections, **meta})


def load_bundle(path) -> tuple[DatasetSplit, NormalizationStats]:
    path = Path(path)
    manifest = _read_manifest(path)
    if manifest.get("kind") != "prepared":
        raise DataError(f"{path} is not a prepared bundle (run 'prepare' first)")
    split = DatasetSplit()
    for s in manifest["sections"]:
        split.role(s["role"]).append((s["label"], load_frame(path / s["file"])))
    stats = NormalizationStats.from_dict(json.loads((path / "stats.json").read_text()))
    return split, stats


def load_model(spec: str):
    if spec == "oracle":
        return PerfectForecaster()
    path = Path(spec)
    if not path.exists():
        raise DataError(f"model file {path} not found")
    d = json.loads(path.read_text())
    tag = d.get("format")
    if tag == LSS_TAG:
        return StateSpaceModel.from_dict(d)
    if tag == NLARX_TAG:
        return NlarxModel.from_dict(d)
    raise DataError(f"{path}: unknown model format {tag!r}")


def _model_label(spec: str) -> str:
    return "oracle" if spec == "oracle" else Path(spec).stem


# ---------------------------------------------------------------------------
# commands

def cmd_simulate(cfg: dict, out: Path) -> int:
    d = cfg["data"]
    days = int(d["days"])
    if days < 60:
        raise ConfigError("data.days must be at least 60 (the section layout needs room)")
    start = _parse_start(d["start"])
    frame, timeline = simulate_year(PlantConfig(), cfg["seed"], start, days, ControllerConfig.benchmark())
    raw = Path(d["raw_dir"]) if d.get("raw_dir") else out / "raw"
    manifest = write_raw_suite(frame, timeline, raw, {"seed": cfg["seed"], "days": days})
    log.info("wrote %d monthly files and %d scenario files to %s", len(manifest["files"]),
             len(manifest["scenario_files"]), raw)
    return EXIT_OK


def cmd_prepare(cfg: dict, out: Path) -> int:
    d = cfg["data"]
    src, dst = Path(d["raw_dir"]), Path(d["prepared_dir"])
    manifest = _read_manifest(src)
    if manifest.get("kind") == "prepared":
        split, stats = load_bundle(src)
        period = split.all_sections()[0][2].sample_period
        keep_stats = stats
    else:
        split = load_raw_split(src)
        period = manifest["sample_period_s"]
        keep_stats = None
    target = float(d["resample_seconds"])
    factor = int(round(target / period))
    if factor < 1 or abs(factor * period - target) > 1e-9:
        raise ConfigError(f"resample_seconds={target} is not a multiple of the {period} s sample period")
    if keep_stats is None:
        prepared, stats = prepare_split(split, factor, int(d["max_gap"]))
    else:
        # a bundle is already cleaned and normalized; only resampling can be pending
        for _, label, f in split.all_sections():
            if np.isnan(f.values).any():
                raise DataError(f"prepared section {label} contains missing values")
        prepared, stats = split.map(lambda f: resample_moving_average(f, factor)), keep_stats
    for role, label, _ in prepared.all_sections():
        if "." in label:
            log.warning("section %s split around a long gap (%s)", label, role)
    check_split(prepared)
    save_bundle(prepared, stats, dst, {"sample_period_s": period * factor})
    log.info("prepared %d sections at %g s into %s", len(prepared.all_sections()), period * factor, dst)
    return EXIT_OK


def _family(name: str) -> str:
    if name not in ("lss", "nlarx"):
        raise ConfigError(f"unknown model family {name!r}; expected 'lss' or 'nlarx'")
    return name


def cmd_train(cfg: dict, out: Path) -> int:
    family = _family(cfg["model"]["family"])
    split, stats = load_bundle(cfg["data"]["prepared_dir"])
    tr = [f for _, f in split.train_sections]
    va = [f for _, f in split.validation_sections]
    params = dict(cfg["model"].get("params") or {})
    model = build_model(family, params, tr, va, stats, seed=cfg["seed"])
    model.save(out / f"{family}.json")
    if family == "nlarx":
        _write_json(out / "training_log.json", model.info.get("log", []))
    log.info("saved %s model to %s", family, out / f"{family}.json")
    return EXIT_OK


def _evaluate(cfg: dict, models: list[str]):
    if not models:
        raise ConfigError("no models given (eval.models or positional MODEL arguments)")
    split, stats = load_bundle(cfg["data"]["prepared_dir"])
    e = cfg["eval"]
    reports = {}
    for spec in models:
        reports[_model_label(spec)] = scenario_eval(load_model(spec), split, int(e["H"]), int(e["past_len"]),
                                                    int(e["stride"]), stats)
    return reports


def _write_degc(reports, out: Path) -> None:
    rows = ["model,channel,full_degc,short_degc,long_degc"]
    for label, rep in reports.items():
        for ch, v in rep.per_channel_degc.items():
            rows.append(f"{label},{ch},{v['full']:.10g},{v['short']:.10g},{v['long']:.10g}")
    (out / "criteria_degc.csv").write_text("\n".join(rows) + "\n")


def cmd_eval(cfg: dict, out: Path, models: list[str]) -> int:
    reports = _evaluate(cfg, models or list(cfg["eval"].get("models") or []))
    export_report(reports, out)
    _write_degc(reports, out)
    for label, rep in reports.items():
        for msg in rep.missing:
            log.warning("%s: %s", label, msg)
        log.info("%s: full %.4f short %.4f long %.4f", label, rep.full, rep.short, rep.long)
    return EXIT_OK


def cmd_report(cfg: dict, out: Path, models: list[str]) -> int:
    from .plotting import plot_criteria, plot_horizon_curves

    reports = _evaluate(cfg, models or list(cfg["eval"].get("models") or []))
    export_report(reports, out)
    _write_degc(reports, out)
    plot_horizon_curves(reports, out / "horizon_curves.png")
    plot_criteria(reports, out / "criteria.png")
    return EXIT_OK


def cmd_hyperopt(cfg: dict, out: Path) -> int:
    h = cfg["hyperopt"]
    family = _family(h["family"])
    split, _ = load_bundle(cfg["data"]["prepared_dir"])
    space = default_space(family, **(h.get("fixed") or {}))
    restrict = {k: tuple(v) for k, v in (h.get("restrict") or {}).items()}
    if restrict:
        space = space.restrict(**restrict)
    plan = make_cv_plan(split, int(h["folds"]))
    ledger = Path(h["ledger"]) if h.get("ledger") else out / "trials.csv"
    res = run_search(space, plan, int(h["budget"]), cfg["seed"], int(h["parallelism"]), ledger,
                     int(cfg["eval"]["H"]), int(cfg["eval"]["past_len"]))
    best = {"model": {"family": family, "params": {**space.fixed, **res.best_params}},
            "score": res.best.mean_score, "trial_id": res.best.trial_id}
    (out / "best_config.yaml").write_text(yaml.safe_dump(best, sort_keys=True))
    log.info("best trial %d: %s (score %.4f)", res.best.trial_id, res.best_params, res.best.mean_score)
    return EXIT_OK


COMMANDS = ("simulate", "prepare", "train", "eval", "hyperopt", "report")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="poolid", description="Pool thermal model identification toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("models", nargs="*", help="model files (eval/report); 'oracle' for the perfect stub")
    p.add_argument("--config", help="YAML run config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output root directory")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--no-timestamp", action="store_true", help="write directly into --out")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_intermixed_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        out = run_dir(cfg, args.command)
        if args.command in ("eval", "report"):
            return {"eval": cmd_eval, "report": cmd_report}[args.command](cfg, out, args.models)
        if args.models:
            raise ConfigError(f"'{args.command}' takes no positional arguments")
        return {"simulate": cmd_simulate, "prepare": cmd_prepare, "train": cmd_train,
                "hyperopt": cmd_hyperopt}[args.command](cfg, out)
    except (ConfigError, SearchError, TypeError, KeyError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (DataError, EvalError, FileNotFoundError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except (TrainingDivergedError, IdentificationError, SimulationError, FloatingPointError,
            np.linalg.LinAlgError) as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except ValueError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
