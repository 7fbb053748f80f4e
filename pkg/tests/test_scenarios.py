import json
from pathlib import Path

import numpy as np
import pytest

from uavwind.dronesim import FlightPlan, Trajectory
from uavwind.geometry import Scene
from uavwind.scenarios import (
    BENCH_COLUMNS,
    FIXTURES,
    ScenarioSpec,
    benchmark_pipeline,
    cross_track_vectors,
    deviation_metrics,
    fixture_range,
    load_scenario,
    run_scenario,
    scan_scaling_slope,
    tower_spec,
    two_buildings_spec,
    uniform_wind_baseline,
    write_benchmark_csv,
    write_fixture_files,
)
from uavwind.voxelizer import ScanRange
from uavwind.windfield import FluctuationState, advance_fluctuation, query_wind
from uavwind.windsolver import WindConfig, WindSource

SMALL = ScanRange((0, 0, 0), 6, 6, 6, 2.0)


def fake_trajectory(points):
    n = len(points)
    z = np.zeros((n, 3))
    return Trajectory(0.02, 0.02 * np.arange(n), np.asarray(points, float), z, z, z, np.ones(n), "completed")


class TestUniformBaseline:
    def test_constant_everywhere(self):
        idx = uniform_wind_baseline(WindConfig((WindSource("east", 10.0),)), SMALL)
        assert len(idx) == 216
        for q in [(0, 0, 0), (5.5, 7.1, 11.9), (-100, 50, 3)]:
            assert query_wind(idx, q).tolist() == [-10.0, 0.0, 0.0]

    def test_opposed_sources_cancel(self):
        cfg = WindConfig((WindSource("east", 10.0), WindSource("west", 10.0)))
        assert np.all(uniform_wind_baseline(cfg, SMALL).velocities == 0.0)

    def test_turbulent_baseline_stays_in_band(self):
        cfg = WindConfig((WindSource("south", 20.0, "turbulent", 0.3),))
        idx = uniform_wind_baseline(cfg, SMALL)
        assert idx.turbulent
        fl = FluctuationState.for_index(idx, seed=2)
        for _ in range(2000):
            fl = advance_fluctuation(fl, 0.02)
            v = query_wind(idx, (3, 3, 3), 0.0, fl)
            assert v[0] == 0.0 and v[2] == 0.0 and 14.0 <= v[1] <= 26.0


class TestDeviationMetrics:
    line = np.array([[0.0, 0, 5], [10.0, 0, 5]])

    def test_on_path(self):
        m = deviation_metrics(fake_trajectory(self.line), self.line)
        assert m["max_deviation"] == 0.0 and m["mean_deviation"] == 0.0

    def test_constant_offset(self):
        pts = self.line + (0, 2.0, 0)
        m = deviation_metrics(fake_trajectory(pts), self.line)
        assert m["max_deviation"] == pytest.approx(2.0) and m["mean_deviation"] == pytest.approx(2.0)

    def test_orbit_one_meter_outside(self):
        plan = FlightPlan.orbit((0, 0, 10), 12, 0.5)
        theta = np.linspace(0, 2 * np.pi, 500)
        pts = np.stack([13 * np.cos(theta), 13 * np.sin(theta), np.full_like(theta, 10)], axis=1)
        m = deviation_metrics(pts, plan.nominal_path())
        assert m["mean_deviation"] == pytest.approx(1.0, abs=1e-3)

    def test_cross_track_is_perpendicular(self):
        off = cross_track_vectors([(4.0, 3.0, 5.0), (-2.0, 0.0, 5.0)], self.line)
        assert off.tolist() == [[0, 3, 0], [-2, 0, 0]]

    def test_windward_leeward_split(self):
        pts = [(-5, 1, 5), (-3, 1, 5), (3, 2, 5), (5, 2, 5)]
        nominal = [(-10, 0, 5), (10, 0, 5)]
        m = deviation_metrics(pts, nominal, mean_wind=(10, 0, 0), split_point=(0, 0))
        assert m["windward_mean"] == 1.0 and m["leeward_mean"] == 2.0 and m["leeward_minus_windward"] == 1.0

    def test_altitude_split_uses_horizontal_offset(self):
        nominal = [(0, 0, 0), (0, 0, 50)]
        pts = [(1, 0, 10), (0, 1, 20), (3, 0, 40), (0, 0, 60)]
        m = deviation_metrics(pts, nominal, split_altitude=30)
        assert m["below_mean"] == 1.0 and m["above_mean"] == 1.5 and m["above_below_ratio"] == 1.5

    def test_empty(self):
        with pytest.raises(ValueError):
            deviation_metrics(np.empty((0, 3)), self.line)


class TestScenarioSpec:
    def test_fixture_defaults(self):
        spec = tower_spec(cells=16)
        assert spec.split_point == (40.0, 40.0) and spec.split_altitude == 30.0
        assert two_buildings_spec(cells=16).split_altitude == 40.0

    def test_plan_outside_range_rejected(self):
        plan = FlightPlan.orbit((40, 40, 10), 50, 0.1)
        with pytest.raises(ValueError, match="leaves the scan range"):
            ScenarioSpec("x", Scene(), fixture_range(16), tower_spec(16).wind, plan)

    def test_fixture_files_round_trip(self, tmp_path):
        write_fixture_files(tmp_path)
        for name, factory in FIXTURES.items():
            loaded = load_scenario(tmp_path / f"{name}.spec")
            assert loaded == factory()
            assert json.loads((tmp_path / f"{name}.spec").read_text())["scene"] == f"{name}.scene.json"

    def test_shipped_fixtures_match_builtins(self):
        root = Path(__file__).resolve().parents[1] / "fixtures"
        for name, factory in FIXTURES.items():
            assert load_scenario(root / f"{name}.spec") == factory()


class TestRunScenario:
    def test_open_site_arms_agree(self):
        """Without obstacles the solved field is the uniform stream, so both flights coincide."""
        wind = WindConfig((WindSource("west", 6.0),))
        plan = FlightPlan.waypoint_list([(40, 40, 30)], (30, 40, 30))
        spec = ScenarioSpec("open", Scene(), ScanRange.cube(12, 80.0), wind, plan, timeout=20)
        r = run_scenario(spec)
        assert r.converged and r.metrics["converged"]
        assert r.cfd_trajectory.status == r.baseline_trajectory.status
        n = min(len(r.cfd_trajectory), len(r.baseline_trajectory))
        assert np.max(np.abs(r.cfd_trajectory.position[:n] - r.baseline_trajectory.position[:n])) < 1e-4

    def test_deterministic_and_field_reuse(self):
        spec = tower_spec(cells=16, seed=5)
        a = run_scenario(spec)
        b = run_scenario(spec, field=a.field)
        assert a.metrics_text() == b.metrics_text()
        assert np.array_equal(a.cfd_trajectory.position, b.cfd_trajectory.position)
        assert set(a.timings) == {"scan", "solve", "index", "fly"}
        for key in ("cfd_mean_deviation", "baseline_leeward_minus_windward", "cfd_above_below_ratio"):
            assert key in a.metrics

    def test_metrics_text_sorted_key_value(self):
        r = run_scenario(tower_spec(cells=16))
        lines = r.metrics_text().splitlines()
        assert lines == sorted(lines) and all("=" in line for line in lines)


class TestBenchmark:
    def test_rows(self, tmp_path):
        rows = benchmark_pipeline([8, 12], repeats=1)
        assert [r["cells_per_axis"] for r in rows] == [8, 12]
        assert all(set(r) == set(BENCH_COLUMNS) for r in rows)
        assert all(r["scan_seconds"] > 0 and r["solve_index_seconds"] > 0 for r in rows)
        assert np.isfinite(scan_scaling_slope(rows))
        write_benchmark_csv(rows, tmp_path / "b.csv")
        lines = (tmp_path / "b.csv").read_text().splitlines()
        assert lines[0] == ",".join(BENCH_COLUMNS) and len(lines) == 3

    def test_empty_sizes(self):
        with pytest.raises(ValueError):
            benchmark_pipeline([])
