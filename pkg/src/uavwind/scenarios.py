"""Paired CFD-versus-uniform-wind flight scenarios and the pipeline benchmark."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dronesim import DroneParams, FlightPlan, Trajectory, run_flight
from .geometry import Box, Scene, load_scene, scene_from_dict, scene_to_dict
from .voxelizer import ScanRange, scan_terrain
from .windfield import WindIndex, build_index
from .windsolver import WindConfig, WindSource, solve_wind, turbulence_spec

FIXTURE_EXTENT = 80.0
FIXTURE_CELLS = 48


@dataclass(frozen=True)
class ScenarioSpec:
    """Everything needed to run one scenario.

    `split_point` (x, y) anchors the windward/leeward split and defaults to the
    centroid of the scene's obstacles; `split_altitude` defaults to the top of
    the tallest obstacle.
    """

    name: str
    scene: Scene
    range: ScanRange
    wind: WindConfig
    plan: FlightPlan
    drone: DroneParams = field(default_factory=DroneParams)
    seed: int = 0
    dt: float = 0.02
    timeout: float = 120.0
    split_point: tuple = None
    split_altitude: float = None

    def __post_init__(self):
        lo = np.asarray(self.range.origin)
        hi = np.asarray(self.range.upper)
        path = self.plan.nominal_path()
        if np.any(path < lo) or np.any(path > hi):
            raise ValueError(f"scenario {self.name!r}: flight plan leaves the scan range")
        box_lo, box_hi = self.scene.solid_boxes
        if self.split_point is None:
            if len(box_lo):
                c = 0.5 * (box_lo + box_hi).mean(axis=0)
            else:
                c = 0.5 * (lo + hi)
            object.__setattr__(self, "split_point", (float(c[0]), float(c[1])))
        if self.split_altitude is None:
            top = float(box_hi[:, 2].max()) if len(box_lo) else 0.5 * (lo[2] + hi[2])
            object.__setattr__(self, "split_altitude", top)

    def to_dict(self, scene_path=None):
        return {
            "name": self.name,
            "scene": scene_path if scene_path is not None else scene_to_dict(self.scene),
            "range": self.range.to_dict(),
            "wind": self.wind.to_dict(),
            "plan": self.plan.to_dict(),
            "drone": self.drone.to_dict(),
            "seed": self.seed,
            "dt": self.dt,
            "timeout": self.timeout,
            "split_point": list(self.split_point),
            "split_altitude": self.split_altitude,
        }


def scenario_from_dict(data, base_dir="."):
    """Build a ScenarioSpec; a string ``scene`` entry is a path relative to `base_dir`."""
    scene = data["scene"]
    if isinstance(scene, str):
        scene = load_scene(Path(base_dir) / scene)
    else:
        scene = scene_from_dict(scene)
    return ScenarioSpec(
        name=data["name"],
        scene=scene,
        range=ScanRange.from_dict(data["range"]),
        wind=WindConfig.from_dict(data["wind"]),
        plan=FlightPlan.from_dict(data["plan"]),
        drone=DroneParams.from_dict(data.get("drone", {})),
        seed=int(data.get("seed", 0)),
        dt=float(data.get("dt", 0.02)),
        timeout=float(data.get("timeout", 120.0)),
        split_point=tuple(data["split_point"]) if data.get("split_point") is not None else None,
        split_altitude=data.get("split_altitude"),
    )


def load_scenario(path):
    """Read a scenario file (JSON text)."""
    path = Path(path)
    with open(path) as fh:
        data = json.load(fh)
    return scenario_from_dict(data, base_dir=path.parent)


# ---------------------------------------------------------------------------
# built-in fixtures

def tower_scene():
    """One 10 x 10 x 30 m tower in the middle of an 80 m square site."""
    return Scene((Box((35.0, 35.0, 0.0), (45.0, 45.0, 30.0)),))


def two_buildings_scene():
    """A 40 m building south of a 20 m one, separated by a 10 m corridor running east-west."""
    return Scene((
        Box((25.0, 25.0, 0.0), (55.0, 35.0, 40.0)),
        Box((25.0, 45.0, 0.0), (55.0, 55.0, 20.0)),
    ))


def fixture_range(cells=FIXTURE_CELLS):
    return ScanRange.cube(cells, FIXTURE_EXTENT)


def tower_spec(cells=FIXTURE_CELLS, seed=0):
    """Orbit around the tower under a gusty 10 m/s westerly."""
    wind = WindConfig((WindSource("west", 10.0, "turbulent", 0.3),))
    plan = FlightPlan.orbit((40.0, 40.0, 10.0), 12.0, 0.125, laps=1.0)
    return ScenarioSpec("tower", tower_scene(), fixture_range(cells), wind, plan, seed=seed, timeout=120.0)


def two_buildings_spec(cells=FIXTURE_CELLS, seed=0):
    """Vertical takeoff from the corridor into a gusty 20 m/s wind blowing north."""
    wind = WindConfig((WindSource("south", 20.0, "turbulent", 0.3),))
    plan = FlightPlan.vertical_takeoff((40.0, 40.0, 0.0), 55.0)
    return ScenarioSpec("two_buildings", two_buildings_scene(), fixture_range(cells), wind, plan,
                        seed=seed, timeout=30.0)


FIXTURES = {"tower": tower_spec, "two_buildings": two_buildings_spec}


# ---------------------------------------------------------------------------
# wind arms

def uniform_wind_baseline(config, range):
    """Obstacle-blind index: every cell of `range` holds the summed source velocity."""
    nx, ny, nz = range.shape
    k, j, i = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    cells = np.stack([i.ravel(), j.ravel(), k.ravel()], axis=1)
    vel = np.broadcast_to(config.mean_velocity, cells.shape)
    return WindIndex(
        range.centers(cells), vel, cells, bounds=range,
        fluctuation=turbulence_spec(config)["fluctuation"], config_hash=config.digest(),
    )


# ---------------------------------------------------------------------------
# metrics

def cross_track_vectors(points, nominal):
    """Offset from the nearest point of the `nominal` polyline to each point, shape (n, 3)."""
    nominal = np.asarray(nominal, float).reshape(-1, 3)
    if len(nominal) == 0:
        raise ValueError("nominal path is empty")
    points = np.asarray(points, float).reshape(-1, 3)
    if len(nominal) == 1:
        return points - nominal[0]
    a = nominal[:-1]
    d = nominal[1:] - a
    dd = np.einsum("ij,ij->i", d, d)
    dd = np.where(dd > 0, dd, 1.0)
    out = np.empty_like(points)
    best = np.full(len(points), np.inf)
    for s in range(len(a)):
        t = np.clip((points - a[s]) @ d[s] / dd[s], 0.0, 1.0)
        off = points - (a[s] + t[:, None] * d[s])
        dist = np.einsum("ij,ij->i", off, off)
        better = dist < best
        best[better] = dist[better]
        out[better] = off[better]
    return out


def _mean(x):
    return float(np.mean(x)) if len(x) else float("nan")


def deviation_metrics(traj, nominal, mean_wind=None, split_point=None, split_altitude=None):
    """Cross-track deviation summary of a trajectory against its nominal path.

    Windward samples lie upwind of the plane through `split_point` normal to
    the horizontal mean wind; the altitude split reports horizontal deviation.
    """
    positions = traj.position if isinstance(traj, Trajectory) else np.asarray(traj, float)
    if len(positions) == 0:
        raise ValueError("trajectory is empty")
    off = cross_track_vectors(positions, nominal)
    dev = np.linalg.norm(off, axis=1)
    m = {"max_deviation": float(dev.max()), "mean_deviation": float(dev.mean()), "samples": len(dev)}
    if mean_wind is not None and split_point is not None:
        w = np.asarray(mean_wind, float)[:2]
        if np.linalg.norm(w) > 0:
            along = (positions[:, :2] - np.asarray(split_point, float)) @ (w / np.linalg.norm(w))
            m["windward_mean"] = _mean(dev[along < 0])
            m["leeward_mean"] = _mean(dev[along >= 0])
            m["leeward_minus_windward"] = m["leeward_mean"] - m["windward_mean"]
    if split_altitude is not None:
        horiz = np.linalg.norm(off[:, :2], axis=1)
        above = positions[:, 2] >= split_altitude
        m["above_mean"] = _mean(horiz[above])
        m["below_mean"] = _mean(horiz[~above])
        m["above_below_ratio"] = m["above_mean"] / m["below_mean"] if m["below_mean"] > 0 else float("inf")
    if isinstance(traj, Trajectory):
        m["status"] = traj.status
    return m


# ---------------------------------------------------------------------------
# running

@dataclass
class ScenarioResult:
    cfd_trajectory: Trajectory
    baseline_trajectory: Trajectory
    nominal_path: np.ndarray
    metrics: dict
    converged: bool
    timings: dict = field(default_factory=dict)
    field: object = None

    def metrics_text(self):
        """``key=value`` lines, sorted, deterministic."""
        lines = []
        for key in sorted(self.metrics):
            v = self.metrics[key]
            lines.append(f"{key}={v!r}" if isinstance(v, float) else f"{key}={v}")
        return "\n".join(lines) + "\n"


def run_scenario(spec, field=None):
    """Scan, solve and index the scene, then fly the plan under the CFD index and the uniform baseline.

    A precomputed wind `field` for the same scene and config may be supplied to
    skip the scan and solve. Solver non-convergence is flagged, not raised.
    """
    timings = {}
    if field is None:
        t0 = time.perf_counter()
        grid = scan_terrain(spec.scene, spec.range)
        timings["scan"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        field = solve_wind(grid, spec.wind)
        timings["solve"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    cfd_index = build_index(field)
    base_index = uniform_wind_baseline(spec.wind, spec.range)
    timings["index"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    kwargs = dict(params=spec.drone, seed=spec.seed, dt=spec.dt, timeout=spec.timeout,
                  air_density=spec.wind.air_density, ground_z=spec.scene.ground_z)
    cfd = run_flight(spec.plan, cfd_index, **kwargs)
    base = run_flight(spec.plan, base_index, **kwargs)
    timings["fly"] = time.perf_counter() - t0

    nominal = spec.plan.nominal_path()
    split = dict(mean_wind=spec.wind.mean_velocity, split_point=spec.split_point,
                 split_altitude=spec.split_altitude)
    metrics = {"converged": bool(field.converged)}
    for prefix, traj in (("cfd", cfd), ("baseline", base)):
        for key, value in deviation_metrics(traj, nominal, **split).items():
            metrics[f"{prefix}_{key}"] = value
    return ScenarioResult(cfd, base, nominal, metrics, bool(field.converged), timings, field)


# ---------------------------------------------------------------------------
# benchmark

BENCH_COLUMNS = ("cells_per_axis", "n_cells", "scan_seconds", "solve_index_seconds", "iterations", "converged")


def benchmark_pipeline(sizes, scene=None, wind=None, repeats=3, extent=FIXTURE_EXTENT):
    """Wall-clock scan and solve+index time per grid size.

    `sizes` holds ScanRanges or integers (cubes of side `extent`). Scan time is
    the best of `repeats` runs; the solve is run once.
    """
    if not len(sizes):
        raise ValueError("sizes must be non-empty")
    scene = scene if scene is not None else tower_scene()
    wind = wind if wind is not None else WindConfig((WindSource("west", 10.0),))
    rows = []
    for size in sizes:
        rng = size if isinstance(size, ScanRange) else ScanRange.cube(int(size), extent)
        scan_times = []
        for _ in range(max(1, int(repeats))):
            t0 = time.perf_counter()
            grid = scan_terrain(scene, rng)
            scan_times.append(time.perf_counter() - t0)
        t0 = time.perf_counter()
        fld = solve_wind(grid, wind)
        build_index(fld)
        solve_time = time.perf_counter() - t0
        rows.append({
            "cells_per_axis": rng.nx if rng.nx == rng.ny == rng.nz else f"{rng.nx}x{rng.ny}x{rng.nz}",
            "n_cells": rng.n_cells,
            "scan_seconds": min(scan_times),
            "solve_index_seconds": solve_time,
            "iterations": fld.iterations,
            "converged": fld.converged,
        })
    return rows


def scan_scaling_slope(rows):
    """Least-squares slope of log(scan time) against log(cell count)."""
    x = np.log([r["n_cells"] for r in rows])
    y = np.log([r["scan_seconds"] for r in rows])
    return float(np.polyfit(x, y, 1)[0])


def write_benchmark_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def write_fixture_files(directory):
    """Write the built-in fixture scenes and scenario files into `directory`."""
    from .geometry import save_scene

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for name, factory in FIXTURES.items():
        spec = factory()
        scene_file = f"{name}.scene.json"
        save_scene(spec.scene, directory / scene_file)
        with open(directory / f"{name}.spec", "w") as fh:
            json.dump(spec.to_dict(scene_path=scene_file), fh, indent=2)
            fh.write("\n")
        written += [directory / scene_file, directory / f"{name}.spec"]
    return written
