"""Command-line pipeline: ``uavwind {scan,solve,index,fly,scenario,bench}``.

Every command writes its artifacts plus a ``manifest.json`` into ``--out``.

Exit codes:
    0  success
    2  invalid input (bad arguments, schema or parameter errors)
    3  I/O failure (missing, unreadable or corrupt files)
    4  wind solve did not converge (artifacts are still written)
    5  simulation fault (non-finite vehicle state)
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import __version__
from ._io import FormatError, file_sha256
from .dronesim import DroneParams, FlightPlan, SimulationFault, run_flight
from .geometry import load_scene
from .scenarios import (
    benchmark_pipeline,
    load_scenario,
    run_scenario,
    scan_scaling_slope,
    write_benchmark_csv,
)
from .voxelizer import ScanRange, export_grid, import_grid, scan_terrain
from .windfield import build_index, load_index, save_index
from .windsolver import WindConfig, load_field, save_field, solve_wind

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_NOT_CONVERGED = 4
EXIT_FAULT = 5


class _Stage(Exception):
    def __init__(self, stage, exc):
        super().__init__(f"{stage}: {exc}")
        self.stage = stage
        self.exc = exc


class Run:
    """Collects inputs, timings and outputs for one command's manifest."""

    def __init__(self, command, out):
        self.command = command
        self.out = Path(out)
        self.inputs = {}
        self.config = {}
        self.stages = {}
        self.outputs = []

    def input(self, path):
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"input file not found: {path}")
        self.inputs[str(path)] = file_sha256(path)
        return path

    def stage(self, name, fn, *args, **kwargs):
        t0 = time.perf_counter()
        try:
            return fn(*args, **kwargs)
        except (OSError, ValueError, SimulationFault) as exc:
            raise _Stage(name, exc) from exc
        finally:
            self.stages[name] = round(time.perf_counter() - t0, 6)

    def output(self, name):
        self.out.mkdir(parents=True, exist_ok=True)
        self.outputs.append(name)
        return self.out / name

    def write_manifest(self, status):
        manifest = {
            "tool": "uavwind",
            "version": __version__,
            "command": self.command,
            "status": status,
            "inputs": self.inputs,
            "config": self.config,
            "stage_seconds": self.stages,
            "outputs": {name: file_sha256(self.out / name) for name in self.outputs},
        }
        self.out.mkdir(parents=True, exist_ok=True)
        with open(self.out / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _read_json(path):
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None


def _range_from_args(args):
    nx, ny, nz = args.cells
    return ScanRange(tuple(args.origin), nx, ny, nz, args.cell_size)


# ---------------------------------------------------------------------------
# commands

def cmd_scan(args, run):
    rng = _range_from_args(args)
    scene_path = run.input(args.scene)
    run.config = {"range": rng.to_dict()}
    scene = run.stage("load", load_scene, scene_path)
    grid = run.stage("scan", scan_terrain, scene, rng)
    run.stage("write", export_grid, grid, run.output("grid.uwg"))
    print(f"scanned {rng.n_cells} cells, {grid.n_occupied} occupied -> {run.out / 'grid.uwg'}")
    return EXIT_OK


def cmd_solve(args, run):
    grid_path = run.input(args.grid)
    cfg_path = run.input(args.wind)
    data = _read_json(cfg_path)
    if args.max_iterations is not None:
        data = dict(data, max_iterations=args.max_iterations)
    config = run.stage("config", WindConfig.from_dict, data)
    run.config = config.to_dict()
    grid = run.stage("load", import_grid, grid_path)
    field = run.stage("solve", solve_wind, grid, config)
    run.stage("write", save_field, field, run.output("field.uwf"))
    print(f"solve: {field.iterations} iterations, residual {field.final_residual:.3g}, "
          f"max divergence {field.max_divergence:.3g}, converged={field.converged}")
    if not field.converged:
        print("warning: wind solve did not converge; field written anyway", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_index(args, run):
    field_path = run.input(args.field)
    field = run.stage("load", load_field, field_path)
    if args.wind is not None:
        config = run.stage("config", WindConfig.from_dict, _read_json(run.input(args.wind)))
        if config.digest() != field.config_hash:
            raise _Stage("config", ValueError(
                f"field was solved with config {field.config_hash}, not {config.digest()}"))
    run.config = {"config_hash": field.config_hash}
    index = run.stage("index", build_index, field)
    run.stage("write", save_index, index, run.output("index.uwi"))
    print(f"indexed {len(index)} empty cells (depth {index.depth})")
    return EXIT_OK


def cmd_fly(args, run):
    index_path = run.input(args.index)
    plan = run.stage("config", FlightPlan.from_dict, _read_json(run.input(args.plan)))
    params = DroneParams()
    if args.drone is not None:
        params = run.stage("config", DroneParams.from_dict, _read_json(run.input(args.drone)))
    run.config = {"plan": plan.to_dict(), "drone": params.to_dict(), "seed": args.seed,
                  "dt": args.dt, "timeout": args.timeout}
    index = run.stage("load", load_index, index_path)
    traj = run.stage("fly", run_flight, plan, index, params, args.seed, args.dt, args.timeout)
    run.stage("write", traj.to_csv, run.output("trajectory.csv"))
    print(f"flight {traj.status} after {traj.time[-1]:.2f} s ({len(traj)} samples)")
    return EXIT_OK


def cmd_scenario(args, run):
    spec_path = run.input(args.spec)
    spec = run.stage("config", load_scenario, spec_path)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    run.config = dict(_read_json(spec_path), seed=spec.seed)
    result = run.stage("pipeline", run_scenario, spec)
    for name, seconds in result.timings.items():
        run.stages[name] = round(seconds, 6)
    result.cfd_trajectory.to_csv(run.output("cfd_trajectory.csv"))
    result.baseline_trajectory.to_csv(run.output("baseline_trajectory.csv"))
    with open(run.output("metrics.txt"), "w") as fh:
        fh.write(result.metrics_text())
    m = result.metrics
    print(f"scenario {spec.name}: cfd mean deviation {m['cfd_mean_deviation']:.3f} m, "
          f"baseline {m['baseline_mean_deviation']:.3f} m")
    if not result.converged:
        print("warning: wind solve did not converge", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_bench(args, run):
    if any(n < 1 for n in args.sizes):
        raise _Stage("config", ValueError(f"sizes must be positive, got {args.sizes}"))
    scene = None
    if args.scene is not None:
        scene = run.stage("load", load_scene, run.input(args.scene))
    run.config = {"sizes": args.sizes, "extent": args.extent, "repeats": args.repeats}
    rows = run.stage("bench", benchmark_pipeline, args.sizes, scene=scene, repeats=args.repeats,
                     extent=args.extent)
    write_benchmark_csv(rows, run.output("bench.csv"))
    for r in rows:
        print(f"{r['cells_per_axis']:>4}^3  scan {r['scan_seconds']:.3f} s  solve+index {r['solve_index_seconds']:.3f} s")
    if len(rows) > 1:
        print(f"scan log-log slope {scan_scaling_slope(rows):.3f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def build_parser():
    parser = argparse.ArgumentParser(prog="uavwind", description="Obstacle-aware wind for small-UAV simulation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log solver progress")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def add(name, fn, help):
        p = sub.add_parser(name, help=help, description=help)
        p.add_argument("--out", required=True, help="output directory")
        p.set_defaults(func=fn)
        return p

    p = add("scan", cmd_scan, "classify grid cells of a scene as occupied or empty")
    p.add_argument("scene", help="scene JSON file")
    p.add_argument("--origin", type=float, nargs=3, default=(0.0, 0.0, 0.0), metavar=("X", "Y", "Z"))
    p.add_argument("--cells", type=int, nargs=3, default=(32, 32, 32), metavar=("NX", "NY", "NZ"))
    p.add_argument("--cell-size", type=float, default=1.0)

    p = add("solve", cmd_solve, "compute the steady wind field over an occupancy grid")
    p.add_argument("grid", help="grid file from 'scan'")
    p.add_argument("wind", help="wind config JSON file")
    p.add_argument("--max-iterations", type=int, default=None)

    p = add("index", cmd_index, "build the nearest-neighbor wind index from a field")
    p.add_argument("field", help="field file from 'solve'")
    p.add_argument("--wind", default=None, help="wind config to check the field against")

    p = add("fly", cmd_fly, "fly a plan through a wind index")
    p.add_argument("index", help="index file from 'index'")
    p.add_argument("plan", help="flight plan JSON file")
    p.add_argument("--drone", default=None, help="drone parameter JSON file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dt", type=float, default=0.02)
    p.add_argument("--timeout", type=float, default=120.0)

    p = add("scenario", cmd_scenario, "run a CFD-versus-uniform-wind scenario")
    p.add_argument("spec", help="scenario file")
    p.add_argument("--seed", type=int, default=None, help="override the scenario seed")

    p = add("bench", cmd_bench, "time scan and solve+index across grid sizes")
    p.add_argument("sizes", type=int, nargs="+", help="cells per axis, e.g. 32 48 64")
    p.add_argument("--scene", default=None, help="scene JSON (default: built-in tower)")
    p.add_argument("--extent", type=float, default=80.0, help="cube side in meters")
    p.add_argument("--repeats", type=int, default=3, help="scan repetitions (best is kept)")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    run = Run(args.command, args.out)
    try:
        code = args.func(args, run)
    except _Stage as err:
        exc = err.exc
        if isinstance(exc, SimulationFault):
            code = EXIT_FAULT
        elif isinstance(exc, (OSError, FormatError)):
            code = EXIT_IO
        else:
            code = EXIT_VALIDATION
        print(f"uavwind {args.command}: error in {err.stage}: {exc}", file=sys.stderr)
        return code
    except FileNotFoundError as exc:
        print(f"uavwind {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"uavwind {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    status = {EXIT_OK: "ok", EXIT_NOT_CONVERGED: "not_converged"}.get(code, "error")
    run.write_manifest(status)
    return code


if __name__ == "__main__":
    sys.exit(main())
