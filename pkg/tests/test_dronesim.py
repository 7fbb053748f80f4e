import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uavwind.dronesim import (
    GRAVITY,
    TRAJECTORY_COLUMNS,
    DroneParams,
    DroneState,
    FlightPlan,
    SimulationFault,
    controller_update,
    read_trajectory_csv,
    run_flight,
    step,
    wind_force,
)
from uavwind.scenarios import cross_track_vectors, uniform_wind_baseline
from uavwind.voxelizer import ScanRange
from uavwind.windfield import WindIndex
from uavwind.windsolver import WindConfig, WindSource

P = DroneParams()
AREA = ScanRange((-20, -20, 0), 30, 30, 15, 2.0)


def uniform_index(face="west", speed=1e-9, kind="normal", fluctuation=0.0):
    src = WindSource(face, speed, kind, fluctuation)
    return uniform_wind_baseline(WindConfig((src,)), AREA)


def calm_index():
    """Exactly zero wind everywhere."""
    idx = uniform_index()
    return WindIndex(idx.points, np.zeros_like(idx.velocities), idx.cells, bounds=AREA)


class TestDroneParams:
    def test_cannot_hover(self):
        with pytest.raises(ValueError, match="hover"):
            DroneParams(max_thrust_accel=9.0)

    @pytest.mark.parametrize("name", ["mass", "drag_coefficient", "reference_area", "max_speed"])
    def test_positive(self, name):
        with pytest.raises(ValueError):
            DroneParams(**{name: 0.0})

    def test_dict_round_trip(self):
        p = DroneParams(mass=2.0, kp=1.5)
        assert DroneParams.from_dict(p.to_dict()) == p


class TestWindForce:
    def test_ten_meters_per_second_on_a_hovering_drone(self):
        f = wind_force((10, 0, 0), (0, 0, 0), P)
        assert f == pytest.approx([6.125, 0, 0])

    def test_no_relative_air_no_force(self):
        assert np.all(wind_force((3, -2, 1), (3, -2, 1), P) == 0.0)

    @given(st.floats(0.1, 30), st.floats(1.1, 4))
    @settings(max_examples=50, deadline=None)
    def test_quadratic_in_relative_speed(self, speed, scale):
        a = np.linalg.norm(wind_force((speed, 0, 0), (0, 0, 0), P))
        b = np.linalg.norm(wind_force((speed * scale, 0, 0), (0, 0, 0), P))
        assert b == pytest.approx(a * scale**2, rel=1e-9)

    def test_points_along_relative_wind(self):
        f = wind_force((0, 5, 0), (0, 0, 3), P)
        rel = np.array([0, 5, -3.0])
        assert np.allclose(np.cross(f, rel), 0) and f @ rel > 0


class TestController:
    def test_equilibrium_at_target_is_hover(self):
        a = controller_update(DroneState((1, 2, 3)), (1, 2, 3), P)
        assert a.tolist() == [0.0, 0.0, GRAVITY]

    def test_large_error_is_clamped_keeping_hover(self):
        a = controller_update(DroneState((0, 0, 10)), (10, 0, 10), P)
        assert a == pytest.approx([17.43, 0, 9.81], abs=0.005)
        assert np.linalg.norm(a) == pytest.approx(P.max_thrust_accel)

    def test_small_error_is_unclamped(self):
        a = controller_update(DroneState((0, 0, 0), (0.5, 0, 0)), (1, 0, 0), P)
        assert a.tolist() == pytest.approx([2.0 - 1.5, 0, GRAVITY])

    @given(st.tuples(*[st.floats(-200, 200)] * 3), st.tuples(*[st.floats(-15, 15)] * 3))
    @settings(max_examples=100, deadline=None)
    def test_never_exceeds_thrust_limit(self, target, velocity):
        a = controller_update(DroneState((0, 0, 0), velocity), target, P)
        assert np.linalg.norm(a) <= P.max_thrust_accel * (1 + 1e-12)


class TestStep:
    def test_hover_is_an_equilibrium(self):
        s = DroneState((1, 1, 5))
        for _ in range(100):
            s = step(s, (0, 0, GRAVITY), (0, 0, 0), P)
        assert s.position.tolist() == [1, 1, 5] and s.velocity.tolist() == [0, 0, 0]
        assert s.time == pytest.approx(2.0)

    def test_wind_kick_over_one_step(self):
        s = step(DroneState((0, 0, 5)), (0, 0, GRAVITY), (10, 0, 0), P, dt=0.02)
        assert s.velocity[0] == pytest.approx(0.0817, abs=5e-5)
        assert s.velocity[2] == 0.0

    def test_speed_clamp(self):
        s = step(DroneState((0, 0, 5), (14.9, 0, 0)), (20, 0, GRAVITY), (0, 0, 0), P, dt=0.5)
        assert np.linalg.norm(s.velocity) == pytest.approx(P.max_speed)

    def test_non_finite_raises(self):
        with pytest.raises(SimulationFault):
            step(DroneState((0, 0, 5)), (np.nan, 0, 0), (0, 0, 0), P)

    def test_bad_dt(self):
        with pytest.raises(ValueError):
            step(DroneState((0, 0, 5)), (0, 0, GRAVITY), (0, 0, 0), P, dt=0.0)


class TestFlightPlan:
    def test_orbit_starts_due_east(self):
        plan = FlightPlan.orbit((40, 40, 10), 12, 0.125)
        assert plan.start == (52.0, 40.0, 10.0)
        assert len(plan.targets()) == 72
        assert np.allclose(plan.targets()[-1], plan.start)

    def test_takeoff_targets(self):
        plan = FlightPlan.vertical_takeoff((5, 5, 0), 30, [(10, 5, 30)])
        assert plan.targets().tolist() == [[5, 5, 30], [10, 5, 30]]
        assert plan.nominal_path().tolist() == [[5, 5, 0], [5, 5, 30], [10, 5, 30]]

    @pytest.mark.parametrize("plan", [
        FlightPlan.orbit((1, 2, 3), 4, -0.5, laps=2),
        FlightPlan.vertical_takeoff((0, 0, 0), 12, [(1, 1, 12)]),
        FlightPlan.waypoint_list([(1, 2, 3), (4, 5, 6)], (0, 0, 1), 0.25),
    ])
    def test_dict_round_trip(self, plan):
        assert FlightPlan.from_dict(plan.to_dict()) == plan

    def test_invalid(self):
        with pytest.raises(ValueError):
            FlightPlan.waypoint_list([], (0, 0, 0))
        with pytest.raises(ValueError):
            FlightPlan.orbit((0, 0, 0), 5, 0.0)
        with pytest.raises(ValueError):
            FlightPlan.from_dict({"kind": "spiral"})


class TestRunFlight:
    def test_waypoints_reached_in_still_air(self):
        plan = FlightPlan.waypoint_list([(5, 0, 10), (5, 5, 12)], (0, 0, 10))
        traj = run_flight(plan, calm_index(), timeout=60)
        assert traj.status == "completed"
        assert np.linalg.norm(traj.final_position - (5, 5, 12)) <= 0.5
        assert np.all(traj.wind == 0.0) and np.all(traj.factor == 1.0)

    def test_orbit_tracks_circle_in_still_air(self):
        plan = FlightPlan.orbit((0, 0, 10), 12, 0.125)
        traj = run_flight(plan, calm_index(), timeout=120)
        assert traj.status == "completed"
        assert traj.time[-1] == pytest.approx(plan.lap_time, abs=0.02)
        dev = np.linalg.norm(cross_track_vectors(traj.position, plan.nominal_path()), axis=1)
        assert dev.max() < 0.5

    def test_timestamps(self):
        traj = run_flight(FlightPlan.waypoint_list([(3, 0, 5)], (0, 0, 5)), calm_index(), dt=0.05, timeout=2.0)
        assert np.allclose(traj.time, 0.05 * np.arange(len(traj)))
        assert traj.status in ("completed", "timeout")

    def test_timeout(self):
        traj = run_flight(FlightPlan.waypoint_list([(50, 0, 5)], (0, 0, 5)), calm_index(), timeout=1.0)
        assert traj.status == "timeout" and len(traj) == 51

    def test_crash_below_ground(self):
        traj = run_flight(FlightPlan.waypoint_list([(0, 0, -5)], (0, 0, 2)), calm_index(), timeout=20)
        assert traj.status == "crashed" and traj.final_position[2] < 0

    def test_deterministic_with_turbulence(self):
        idx = uniform_index("west", 6.0, "turbulent", 0.3)
        plan = FlightPlan.waypoint_list([(10, 10, 12)], (0, 0, 10))
        a, b = run_flight(plan, idx, seed=3, timeout=15), run_flight(plan, idx, seed=3, timeout=15)
        assert np.array_equal(a.position, b.position) and np.array_equal(a.factor, b.factor)
        c = run_flight(plan, idx, seed=4, timeout=15)
        assert not np.array_equal(a.factor, c.factor)

    def test_recorded_wind_replays_from_index(self):
        idx = uniform_index("south", 5.0, "turbulent", 0.2)
        traj = run_flight(FlightPlan.waypoint_list([(4, 4, 8)], (0, 0, 8)), idx, seed=1, timeout=10)
        looked_up = idx.lookup(traj.position) * traj.factor[:, None]
        assert np.array_equal(traj.wind, looked_up)
        assert np.all((traj.factor >= 0.8) & (traj.factor <= 1.2))

    def test_stronger_crosswind_pushes_further(self):
        plan = FlightPlan.waypoint_list([(0, 20, 10)], (0, 0, 10))
        devs = []
        for speed in (2.0, 5.0, 10.0):
            traj = run_flight(plan, uniform_index("west", speed), timeout=30)
            devs.append(np.abs(traj.position[:, 0]).max())
        assert devs[0] < devs[1] < devs[2]


class TestTrajectoryCsv:
    def test_header_and_round_trip(self, tmp_path):
        traj = run_flight(FlightPlan.waypoint_list([(2, 0, 5)], (0, 0, 5)), uniform_index("west", 3.0), timeout=5)
        traj.to_csv(tmp_path / "t.csv")
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0] == ",".join(TRAJECTORY_COLUMNS)
        assert len(lines) == len(traj) + 1
        assert all(line.endswith(",active") for line in lines[1:-1])
        cols, status = read_trajectory_csv(tmp_path / "t.csv")
        assert status == traj.status
        assert np.array_equal(cols["x"], traj.position[:, 0]) and np.array_equal(cols["wz"], traj.wind[:, 2])
        assert np.array_equal(cols["az_cmd"], traj.command[:, 2])
