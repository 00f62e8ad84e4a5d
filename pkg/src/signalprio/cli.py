"""``signalprio`` command line: simulate, sweep and shapley subcommands.

Exit codes: 0 on success, 2 on configuration or input errors.  The default
output directory is taken from ``SIGNALPRIO_OUT`` (fallback ``./out``).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import reference
from .controllers import ControllerKind
from .engine import TRAINING_DEMANDS, build_controller, run
from .games import CharacteristicFunction, shapley_ratios, shapley_value
from .scenario import CONTROLLER_NAMES, ConfigError, ScenarioConfig

OUT_ENV = "SIGNALPRIO_OUT"
EXIT_OK = 0
EXIT_CONFIG = 2

METRICS_COLUMNS = (
    "controller", "demand_vph", "headway_min", "seed", "avg_waiting", "avg_travel_time_s",
    "avg_bus_travel_time_s", "buses_completed", "stability_statistic", "stability", "slope",
)
TIMESERIES_COLUMNS = ("time_s", "waiting", "vehicles", "exited")
COMPARISON_COLUMNS = (
    "scenario_id", "controller", "demand_vph", "headway_min", "seed", "avg_waiting",
    "avg_travel_time_s", "avg_bus_travel_time_s", "stability", "slope",
)
REFERENCE_COLUMNS = ("demand_vph", "headway_min", "controller", "metric", "n_seeds", "artifact_mean_s", "reference_s")
DEFAULT_DEMANDS = tuple(range(5000, 13001, 1000))
DEFAULT_HEADWAYS = (20, 30)


def fmt(x) -> str:
    """Fixed-point text for CSV cells; None becomes an empty cell."""
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    if isinstance(x, str):
        return x
    v = float(x)
    if not np.isfinite(v):
        raise ValueError(f"non-finite value {v} in CSV output")
    s = f"{v:.6f}"
    return "0.000000" if s == "-0.000000" else s


def _write_csv(path: Path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([fmt(row[c]) for c in columns])


def _out_dir(arg: str | None) -> Path:
    d = Path(arg or os.environ.get(OUT_ENV) or "out")
    d.mkdir(parents=True, exist_ok=True)
    return d


def _csv_list(text: str, cast, field: str) -> list:
    try:
        items = [cast(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(field, f"cannot parse {text!r}") from None
    if not items:
        raise ConfigError(field, "must not be empty")
    return items


# -- simulate -------------------------------------------------------------

def _metrics_row(cfg: ScenarioConfig, rec) -> dict:
    row = rec.row()
    row.update(controller=cfg.controller, demand_vph=cfg.demand_vph, headway_min=cfg.bus_headway_min, seed=cfg.seed)
    return row


def cmd_simulate(args) -> int:
    cfg = ScenarioConfig.from_file(args.scenario) if args.scenario else ScenarioConfig()
    changes = {}
    if args.controller:
        if args.controller not in CONTROLLER_NAMES:
            raise ConfigError("controller", f"unknown controller {args.controller!r}")
        changes["controller"] = args.controller
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.checkpoint:
        if not Path(args.checkpoint).is_file():
            raise ConfigError("checkpoint", f"file not found: {args.checkpoint}")
        changes["controller_params"] = {**cfg.controller_params, "checkpoint": args.checkpoint}
    cfg = cfg.with_(**changes) if changes else cfg
    ctrl = build_controller(cfg, args.train_steps)
    rec = run(cfg, ctrl)
    out = _out_dir(args.out)
    _write_csv(out / "metrics.csv", METRICS_COLUMNS, [_metrics_row(cfg, rec)])
    series = rec.series
    rows = [{c: series[c][i] for c in TIMESERIES_COLUMNS} for i in range(len(series["time_s"]))]
    _write_csv(out / "timeseries.csv", TIMESERIES_COLUMNS, rows)
    if args.save_checkpoint and hasattr(ctrl, "save"):
        ctrl.save(args.save_checkpoint)
    print(f"wrote {out / 'metrics.csv'} and {out / 'timeseries.csv'}")
    return EXIT_OK


# -- sweep ----------------------------------------------------------------

def _sweep_job(job: tuple) -> dict:
    cfg_dict, checkpoint = job
    cfg = ScenarioConfig.from_dict(cfg_dict)
    if checkpoint is not None:
        cfg = cfg.with_(controller_params={**cfg.controller_params, "checkpoint": checkpoint})
    rec = run(cfg, build_controller(cfg, train_steps=0))
    row = rec.row()
    row.update(
        scenario_id=f"{cfg.network}-d{cfg.demand_vph:g}-h{cfg.bus_headway_min:g}-s{cfg.seed}",
        controller=cfg.controller, demand_vph=cfg.demand_vph, headway_min=cfg.bus_headway_min, seed=cfg.seed,
    )
    return row


def aggregate(rows) -> list[dict]:
    """Mean over seeds per (demand, headway, controller) for both travel-time metrics."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((float(r["demand_vph"]), float(r["headway_min"]), r["controller"]), []).append(r)
    out = []
    for (demand, headway, ctrl) in sorted(groups):
        members = groups[(demand, headway, ctrl)]
        for metric, column in (("travel_time", "avg_travel_time_s"), ("bus_travel_time", "avg_bus_travel_time_s")):
            vals = sorted(float(m[column]) for m in members if m[column] is not None)
            out.append({
                "demand_vph": demand, "headway_min": headway, "controller": ctrl, "metric": metric,
                "n_seeds": len(vals), "artifact_mean_s": float(np.mean(vals)) if vals else None,
                "reference_s": reference.lookup(metric, demand, ctrl, headway),
            })
    return out


def cmd_sweep(args) -> int:
    base = ScenarioConfig.from_file(args.scenario) if args.scenario else ScenarioConfig()
    demands = _csv_list(args.demands, float, "demands")
    headways = _csv_list(args.headways, float, "headways")
    seeds = _csv_list(args.seeds, int, "seeds")
    controllers = _csv_list(args.controllers, str, "controllers")
    for c in controllers:
        if c not in CONTROLLER_NAMES:
            raise ConfigError("controllers", f"unknown controller {c!r}")
    if args.jobs < 1:
        raise ConfigError("jobs", "must be at least 1")
    out = _out_dir(args.out)
    ckpt_dir = Path(tempfile.mkdtemp(prefix="ckpt-", dir=out))

    # learning controllers are trained once per headway, then evaluated frozen
    checkpoints: dict[tuple, str] = {}
    for c in controllers:
        if ControllerKind(c) not in (ControllerKind.CBQL_TSP, ControllerKind.CBQL_NOTSP):
            continue
        for h in headways:
            cfg = base.with_(controller=c, bus_headway_min=h)
            ctrl = build_controller(cfg, args.train_steps, TRAINING_DEMANDS)
            path = ckpt_dir / f"{c}-h{h:g}.json"
            ctrl.save(path)
            checkpoints[(c, h)] = str(path)
            print(f"trained {c} (headway {h:g} min)", file=sys.stderr)

    jobs = []
    for c in controllers:
        for d in demands:
            for h in headways:
                for s in seeds:
                    cfg = base.with_(controller=c, demand_vph=d, bus_headway_min=h, seed=s)
                    jobs.append((cfg.to_dict(), checkpoints.get((c, h))))
    if args.jobs == 1:
        rows = [_sweep_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_sweep_job, jobs))
    rows.sort(key=lambda r: (r["controller"], r["demand_vph"], r["headway_min"], r["seed"]))
    _write_csv(out / "comparison.csv", COMPARISON_COLUMNS, rows)
    _write_csv(out / "vs_reference.csv", REFERENCE_COLUMNS, aggregate(rows))
    print(f"wrote {len(rows)} rows to {out / 'comparison.csv'} and {out / 'vs_reference.csv'}")
    return EXIT_OK


# -- shapley --------------------------------------------------------------

def _parse_value(v, coalition: str):
    if isinstance(v, bool) or not isinstance(v, (int, float, str)):
        raise ConfigError(f"values[{coalition}]", "must be a number or a fraction string")
    try:
        return Fraction(v)
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"values[{coalition}]", f"cannot parse {v!r}") from None


def load_game(path: str | Path) -> CharacteristicFunction:
    """Characteristic function from JSON ``{"agents": [...], "values": {"a,b": v, ...}}``.

    Coalition keys list member agents separated by commas; the empty coalition
    may be omitted.  Values are numbers or fraction strings such as ``"1/3"``.
    """
    p = Path(path)
    if not p.is_file():
        raise ConfigError("file", f"file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("file", f"{p} is not valid JSON ({exc})") from None
    if not isinstance(data, dict) or "agents" not in data or "values" not in data:
        raise ConfigError("file", "expected an object with 'agents' and 'values'")
    agents = [str(a) for a in data["agents"]]
    values = {}
    for key, v in data["values"].items():
        members = frozenset(m.strip() for m in key.split(",") if m.strip())
        unknown = members - set(agents)
        if unknown:
            raise ConfigError(f"values[{key}]", f"unknown agents {sorted(unknown)}")
        values[members] = _parse_value(v, key)
    try:
        return CharacteristicFunction(agents, values)
    except KeyError as exc:
        raise ConfigError("values", exc.args[0]) from None
    except ValueError as exc:
        raise ConfigError("values", str(exc)) from None


def cmd_shapley(args) -> int:
    game = load_game(args.file)
    phi = {a: shapley_value(game, a) for a in game.agents}
    ratios = shapley_ratios(phi, floor=args.floor)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(("agent", "shapley", "shapley_exact", "ratio"))
    for a in game.agents:
        w.writerow((a, fmt(float(phi[a])), str(phi[a]), fmt(ratios[a])))
    return EXIT_OK


# -- entry point ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="signalprio", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run one scenario and write metrics.csv and timeseries.csv")
    s.add_argument("--scenario", help="scenario JSON file (defaults apply when omitted)")
    s.add_argument("--controller", help=f"one of {', '.join(CONTROLLER_NAMES)}")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./out)")
    s.add_argument("--train-steps", type=int, default=200_000,
                   help="decision steps of training for learning controllers")
    s.add_argument("--checkpoint", help="load a trained table file instead of training")
    s.add_argument("--save-checkpoint", help="write the trained tables here")
    s.set_defaults(func=cmd_simulate)

    w = sub.add_parser("sweep", help="compare controllers over demands, headways and seeds")
    w.add_argument("--scenario", help="base scenario JSON file")
    w.add_argument("--demands", default=",".join(str(d) for d in DEFAULT_DEMANDS))
    w.add_argument("--headways", default=",".join(str(h) for h in DEFAULT_HEADWAYS))
    w.add_argument("--controllers", default=",".join(CONTROLLER_NAMES))
    w.add_argument("--seeds", default="1")
    w.add_argument("--jobs", type=int, default=1)
    w.add_argument("--train-steps", type=int, default=200_000)
    w.add_argument("--out")
    w.set_defaults(func=cmd_sweep)

    g = sub.add_parser("shapley", help="Shapley values and ratios of a characteristic function")
    g.add_argument("file", help="JSON characteristic function")
    g.add_argument("--floor", type=float, default=1e-6)
    g.set_defaults(func=cmd_shapley)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
