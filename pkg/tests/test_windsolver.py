import logging

import numpy as np
import pytest

from uavwind._io import FormatError
from uavwind.geometry import Box, Scene
from uavwind.voxelizer import OccupancyGrid, ScanRange, scan_terrain
from uavwind.windsolver import (
    NoFluidError,
    WindConfig,
    WindField,
    WindSolver,
    WindSource,
    boundary_conditions,
    divergence,
    divergence_field,
    export_field_csv,
    face_mass_flux,
    load_field,
    mass_flux,
    max_divergence,
    save_field,
    solve_wind,
)

WEST10 = WindConfig((WindSource("west", 10.0),))


def make_field(velocity, occupied=None, h=1.0, config=WEST10):
    velocity = np.asarray(velocity, dtype=float)
    shape = velocity.shape[1:]
    occupied = np.zeros(shape, bool) if occupied is None else occupied
    kinds, values = boundary_conditions(config)
    return WindField(ScanRange((0, 0, 0), *shape, h), velocity, occupied, True, 0.0, kinds, values)


@pytest.fixture(scope="module")
def tower_field():
    """Coarse version of the tower fixture: 24^3 cells of 10/3 m."""
    scene = Scene((Box((35, 35, 0), (45, 45, 30)),))
    grid = scan_terrain(scene, ScanRange.cube(24, 80.0))
    return solve_wind(grid, WEST10)


class TestWindSource:
    def test_compass_convention(self):
        assert WindSource("east", 10).velocity.tolist() == [-10, 0, 0]
        assert WindSource("west", 10).velocity.tolist() == [10, 0, 0]
        assert WindSource("south", 20).velocity.tolist() == [0, 20, 0]
        assert WindSource("+y", 5).velocity.tolist() == [0, -5, 0]

    @pytest.mark.parametrize("kwargs", [
        dict(face="west", speed=0),
        dict(face="west", speed=-3),
        dict(face="up", speed=5),
        dict(face="west", speed=5, kind="gusty"),
        dict(face="west", speed=5, kind="turbulent", fluctuation=1.5),
        dict(face="west", speed=5, kind="normal", fluctuation=0.2),
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            WindSource(**kwargs)


class TestWindConfig:
    def test_needs_a_source(self):
        with pytest.raises(ValueError):
            WindConfig(())

    def test_one_source_per_face(self):
        with pytest.raises(ValueError, match="one source per face"):
            WindConfig((WindSource("west", 1), WindSource("-x", 2)))

    def test_all_four_faces_rejected(self):
        with pytest.raises(ValueError):
            WindConfig(tuple(WindSource(f, 1) for f in ("west", "east", "south", "north")))

    def test_max_iterations_positive(self):
        with pytest.raises(ValueError):
            WindConfig((WindSource("west", 1),), max_iterations=0)

    def test_dict_round_trip_and_digest(self):
        cfg = WindConfig((WindSource("east", 10), WindSource("west", 30, "turbulent", 0.4)), relaxation=0.5)
        again = WindConfig.from_dict(cfg.to_dict())
        assert again == cfg and again.digest() == cfg.digest()
        assert WindConfig.from_dict({"sources": [{"face": "east", "speed": 10}],
                                     "solver": {"max_iterations": 7}}).max_iterations == 7

    def test_default_tolerance(self):
        assert WEST10.tolerance_for(2.0) == pytest.approx(1e-4 * 10 / 2.0)


class TestBoundaryConditions:
    def test_single_source(self):
        kinds, values = boundary_conditions(WEST10)
        assert kinds.tolist() == [[1, 2], [0, 0], [0, 0]]
        assert values[0, 0].tolist() == [10, 0, 0]

    def test_opposed_sources_open_the_sides(self):
        kinds, _ = boundary_conditions(WindConfig((WindSource("east", 10), WindSource("west", 30))))
        assert kinds.tolist() == [[1, 1], [2, 2], [0, 0]]

    def test_perpendicular_sources(self):
        kinds, _ = boundary_conditions(WindConfig((WindSource("west", 10), WindSource("south", 5))))
        assert kinds.tolist() == [[1, 2], [1, 2], [0, 0]]


class TestDivergenceOperator:
    def test_uniform_field_is_divergence_free(self):
        u = np.zeros((3, 6, 5, 4))
        u[0] = 10.0
        f = make_field(u)
        assert np.all(divergence_field(f) == 0.0)

    def test_linear_field(self):
        n = 6
        u = np.zeros((3, n, n, n))
        u[0] = (np.arange(n) + 0.5)[:, None, None]
        f = make_field(u)
        for cell in [(1, 1, 1), (2, 3, 4), (4, 2, 2)]:
            assert divergence(f, cell) == pytest.approx(1.0)

    def test_occupied_and_out_of_range_cells_rejected(self):
        occ = np.zeros((4, 4, 4), bool)
        occ[1, 1, 1] = True
        f = make_field(np.zeros((3, 4, 4, 4)), occ)
        with pytest.raises(ValueError, match="occupied"):
            divergence(f, (1, 1, 1))
        with pytest.raises(IndexError):
            divergence(f, (4, 0, 0))

    def test_solid_neighbor_counts_as_zero(self):
        occ = np.zeros((5, 3, 3), bool)
        occ[3] = True
        u = np.zeros((3, 5, 3, 3))
        u[0] = 2.0
        f = make_field(u, occ)
        # face toward the solid carries nothing; face from the fluid side carries 2
        assert divergence(f, (2, 1, 1)) == pytest.approx(-2.0)


class TestMassFlux:
    def test_uniform_section(self):
        u = np.zeros((3, 4, 10, 10))
        u[0] = 10.0
        assert mass_flux(make_field(u), "x", 2) == pytest.approx(1000.0)

    def test_zero_field(self):
        assert mass_flux(make_field(np.zeros((3, 4, 4, 4))), 0, 1) == 0.0

    def test_out_of_range_plane(self):
        with pytest.raises(IndexError):
            mass_flux(make_field(np.zeros((3, 4, 4, 4))), 0, 4)

    def test_sealed_channel_conserves_flux(self):
        rng = ScanRange((0, 0, 0), 40, 16, 16, 1.0)
        grid = scan_terrain(Scene((Box((18, 5, 0), (22, 11, 7)),)), rng)
        f = solve_wind(grid, WEST10)
        assert f.converged
        upstream, downstream = mass_flux(f, 0, 7), mass_flux(f, 0, 32)
        assert upstream == pytest.approx(10.0 * 256, rel=0.01)
        assert abs(upstream - downstream) <= 0.01 * abs(upstream)

    def test_face_planes_carry_identical_flux(self):
        """Heavy blockage: layer sums ripple, face-plane fluxes stay exact."""
        rng = ScanRange((0, 0, 0), 30, 10, 10, 1.0)
        f = solve_wind(scan_terrain(Scene((Box((13, 0, 0), (17, 6, 7)),)), rng), WEST10)
        fluxes = [face_mass_flux(f, "x", i) for i in range(31)]
        assert np.allclose(fluxes, 1000.0, rtol=1e-5)
        layers = np.array([mass_flux(f, "x", i) for i in range(30)])
        assert np.all(np.abs(layers / 1000.0 - 1) < 0.05)


class TestSolveWind:
    def test_uniform_flow_recovered(self):
        grid = OccupancyGrid(ScanRange((0, 0, 0), 12, 12, 12, 2.0))
        f = solve_wind(grid, WEST10)
        assert f.converged
        assert np.max(np.abs(f.velocity - np.array([10.0, 0, 0])[:, None, None, None])) <= 1e-6 * 10

    def test_perpendicular_sources_share_one_solve(self):
        cfg = WindConfig((WindSource("west", 10), WindSource("south", 5)))
        f = solve_wind(OccupancyGrid(ScanRange((0, 0, 0), 10, 10, 6, 2.0)), cfg)
        assert f.converged and max_divergence(f) <= cfg.tolerance_for(2.0)
        # net throughput: what enters through the west and south faces leaves through east and north
        inflow = 10 * 10 * 6 * 4 + 5 * 10 * 6 * 4
        outflow = face_mass_flux(f, "x", 10) + face_mass_flux(f, "y", 10)
        assert outflow == pytest.approx(inflow, rel=1e-6)

    def test_fully_occupied_grid(self):
        rng = ScanRange((0, 0, 0), 3, 3, 3)
        with pytest.raises(NoFluidError, match="no fluid cells"):
            solve_wind(OccupancyGrid(rng, np.ones(rng.shape, bool)), WEST10)

    def test_divergence_within_tolerance(self, tower_field):
        assert tower_field.converged
        assert max_divergence(tower_field) <= WEST10.tolerance_for(tower_field.range.cell_size)

    def test_occupied_cells_are_zero(self, tower_field):
        assert np.all(tower_field.velocity[:, tower_field.occupied] == 0.0)

    def test_flow_accelerates_past_the_tower(self, tower_field):
        i = tower_field.range.cell_of([(40, 40, 10)])[0, 0]
        speed = tower_field.speed()[i]
        assert speed[~tower_field.occupied[i]].max() > 10.0

    def test_wake_is_slower(self, tower_field):
        c = tower_field.range.cell_of([(48, 40, 10)])[0]
        assert tower_field.speed()[tuple(c)] < 10.0

    def test_mirror_symmetry_about_the_tower_plane(self, tower_field):
        u = tower_field.velocity
        mirrored = u[:, :, ::-1, :].copy()
        mirrored[1] *= -1
        tol = 10 * WEST10.tolerance_for(tower_field.range.cell_size) * tower_field.range.cell_size
        assert np.max(np.abs(mirrored - u)) <= tol

    def test_deterministic(self, tower_field):
        grid = OccupancyGrid(tower_field.range, tower_field.occupied)
        again = solve_wind(grid, WEST10)
        assert np.array_equal(again.velocity, tower_field.velocity)

    def test_iteration_cap_is_soft(self):
        grid = scan_terrain(Scene((Box((35, 35, 0), (45, 45, 30)),)), ScanRange.cube(16, 80.0))
        cfg = WindConfig((WindSource("west", 10.0),), max_iterations=1)
        f = solve_wind(grid, cfg)
        assert not f.converged and f.iterations == 1 and np.isfinite(f.final_residual)

    def test_low_domain_warns(self, caplog):
        grid = scan_terrain(Scene((Box((3, 3, 0), (5, 5, 6)),)), ScanRange((0, 0, 0), 8, 8, 8))
        with caplog.at_level(logging.WARNING):
            solve_wind(grid, WindConfig((WindSource("west", 1.0),), max_iterations=2))
        assert "twice the tallest obstacle" in caplog.text


class TestFieldFiles:
    def test_round_trip(self, tower_field, tmp_path):
        save_field(tower_field, tmp_path / "f.uwf")
        f = load_field(tmp_path / "f.uwf")
        assert np.array_equal(f.velocity, tower_field.velocity)
        assert np.array_equal(f.occupied, tower_field.occupied)
        assert f.config_hash == WEST10.digest() and f.converged == tower_field.converged

    def test_truncated(self, tower_field, tmp_path):
        path = tmp_path / "f.uwf"
        save_field(tower_field, path)
        path.write_bytes(path.read_bytes()[:-100])
        with pytest.raises(FormatError):
            load_field(path)

    def test_csv_export(self, tower_field, tmp_path):
        export_field_csv(tower_field, tmp_path / "f.csv")
        lines = (tmp_path / "f.csv").read_text().splitlines()
        assert lines[0] == "i,j,k,x,y,z,u,v,w"
        assert len(lines) == tower_field.n_empty + 1


class TestWindSolverEstimator:
    def test_fit_predict(self):
        est = WindSolver(sources=(WindSource("east", 4.0),))
        est.fit(OccupancyGrid(ScanRange((0, 0, 0), 6, 6, 6)))
        assert est.converged_
        pred = est.predict([[1.0, 1.0, 1.0], [100.0, -5.0, 2.0]])
        assert np.allclose(pred, [[-4, 0, 0], [-4, 0, 0]])

    def test_params(self):
        assert WindSolver(relaxation=0.5).get_params()["relaxation"] == 0.5
