"""Obstacle-aware wind fields for small-UAV flight simulation.

Pipeline: scan a scene into an occupancy grid, solve a steady incompressible
wind field over its empty cells, index the field for nearest-neighbor lookup,
and fly a point-mass vehicle through it.
"""

__version__ = "0.1.0"

from .geometry import Box, Heightmap, Scene, SceneError, Segment, load_scene, save_scene, segment_blocked
from .voxelizer import OccupancyGrid, ScanRange, TerrainScanner, export_grid, import_grid, obstruction_check, scan_terrain
from .windsolver import WindConfig, WindField, WindSolver, WindSource, load_field, save_field, solve_wind
from .windfield import (
    FluctuationState,
    NearestWindRegressor,
    WindIndex,
    advance_fluctuation,
    build_index,
    load_index,
    query_wind,
    save_index,
)
from .dronesim import DroneParams, DroneState, FlightPlan, Trajectory, controller_update, run_flight, step, wind_force
from .scenarios import (
    ScenarioResult,
    ScenarioSpec,
    benchmark_pipeline,
    deviation_metrics,
    load_scenario,
    run_scenario,
    uniform_wind_baseline,
)

__all__ = [
    "Box", "Heightmap", "Scene", "SceneError", "Segment", "load_scene", "save_scene", "segment_blocked",
    "OccupancyGrid", "ScanRange", "TerrainScanner", "export_grid", "import_grid", "obstruction_check", "scan_terrain",
    "WindConfig", "WindField", "WindSolver", "WindSource", "load_field", "save_field", "solve_wind",
    "FluctuationState", "NearestWindRegressor", "WindIndex", "advance_fluctuation", "build_index", "load_index",
    "query_wind", "save_index",
    "DroneParams", "DroneState", "FlightPlan", "Trajectory", "controller_update", "run_flight", "step", "wind_force",
    "ScenarioResult", "ScenarioSpec", "benchmark_pipeline", "deviation_metrics", "load_scenario", "run_scenario",
    "uniform_wind_baseline",
]
