"""Steady incompressible wind field on an occupancy grid.

Pseudo-time marching of a Chorin projection scheme on a uniform collocated
grid: explicit first-order upwind advection plus effective-viscosity
diffusion, then an exact discrete projection onto the divergence-free set.

Discrete divergence of cell c is ``sum_a (F[a, c+1/2] - F[a, c-1/2]) / h``
with face flux F the mean of the two adjacent cell values between fluid
cells. Faces shared with an occupied cell, a slip wall or the ground carry
zero normal velocity; inflow faces carry the source velocity; outflow faces
copy the adjacent cell (zero gradient). Between fluid cells this is the
central difference. The projection solves ``D D^T lam = D u* + d0`` with
AMG-preconditioned CG and sets ``u = u* - D^T lam``.

Boundary faces: a face with a source is inflow; the face opposite a source is
outflow; when both faces of an axis carry sources the remaining lateral faces
are outflow; other lateral faces, the top and the ground are slip walls.
Compass convention: wind *from the east* enters through the +x face moving -x.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional

import numba
import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from ._io import FormatError, read_container, write_container
from .voxelizer import OccupancyGrid, ScanRange

log = logging.getLogger(__name__)

FIELD_MAGIC = b"UWFIELD\x00"
FIELD_VERSION = 1

FACES = ("-x", "+x", "-y", "+y")
_FACE_ALIASES = {"west": "-x", "east": "+x", "south": "-y", "north": "+y"}
_SLIP, _INFLOW, _OUTFLOW = 0, 1, 2
_KIND_NAMES = {_SLIP: "slip", _INFLOW: "inflow", _OUTFLOW: "outflow"}


class NoFluidError(ValueError):
    """The occupancy grid has no empty cell to carry flow."""


def _face_index(face):
    """(axis, side) with side 0 for the low face, 1 for the high face."""
    face = _FACE_ALIASES.get(face, face)
    if face not in FACES:
        raise ValueError(f"unknown face {face!r}; use one of {FACES} or west/east/south/north")
    return "xyz".index(face[1]), 0 if face[0] == "-" else 1


@dataclass(frozen=True)
class WindSource:
    """Wind entering through one lateral boundary face.

    `face` names where the wind comes *from*: ``"east"``/``"+x"`` blows toward -x.
    """

    face: str
    speed: float
    kind: str = "normal"
    fluctuation: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "face", _FACE_ALIASES.get(self.face, self.face))
        _face_index(self.face)
        if not (math.isfinite(self.speed) and self.speed > 0):
            raise ValueError(f"source speed must be > 0, got {self.speed!r}")
        if self.kind not in ("normal", "turbulent"):
            raise ValueError(f"source kind must be 'normal' or 'turbulent', got {self.kind!r}")
        if not (0 <= self.fluctuation < 1):
            raise ValueError(f"fluctuation must lie in [0, 1), got {self.fluctuation!r}")
        if self.kind == "normal" and self.fluctuation != 0:
            raise ValueError("fluctuation is only meaningful for turbulent sources")
        object.__setattr__(self, "speed", float(self.speed))
        object.__setattr__(self, "fluctuation", float(self.fluctuation))

    @property
    def velocity(self):
        """Mean velocity vector the source drives into the domain."""
        axis, side = _face_index(self.face)
        v = np.zeros(3)
        v[axis] = self.speed if side == 0 else -self.speed
        return v


@dataclass(frozen=True)
class WindConfig:
    sources: tuple
    air_density: float = 1.225
    kinematic_viscosity: float = 1.5e-5
    # the molecular value is far too small for a desk-scale grid; this is what the solver uses
    effective_viscosity: Optional[float] = 1.0
    max_iterations: int = 5000
    divergence_tolerance: Optional[float] = None
    steady_tolerance: float = 1e-3
    relaxation: float = 0.8

    def __post_init__(self):
        sources = tuple(s if isinstance(s, WindSource) else WindSource(**s) for s in self.sources)
        if not sources:
            raise ValueError("wind config needs at least one source")
        faces = [s.face for s in sources]
        if len(set(faces)) != len(faces):
            raise ValueError(f"at most one source per face, got {faces}")
        if len(faces) == 4:
            raise ValueError("sources on all four lateral faces leave no outflow boundary")
        object.__setattr__(self, "sources", sources)
        if self.air_density <= 0 or self.kinematic_viscosity <= 0:
            raise ValueError("air_density and kinematic_viscosity must be > 0")
        if self.effective_viscosity is not None and self.effective_viscosity <= 0:
            raise ValueError("effective_viscosity must be > 0")
        if int(self.max_iterations) < 1:
            raise ValueError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if self.divergence_tolerance is not None and not self.divergence_tolerance > 0:
            raise ValueError("divergence_tolerance must be > 0")
        if not self.steady_tolerance > 0:
            raise ValueError("steady_tolerance must be > 0")
        if not 0 < self.relaxation <= 1:
            raise ValueError("relaxation (CFL factor) must lie in (0, 1]")

    @property
    def reference_speed(self):
        return max(s.speed for s in self.sources)

    @property
    def viscosity(self):
        return self.effective_viscosity if self.effective_viscosity is not None else self.kinematic_viscosity

    @property
    def mean_velocity(self):
        return np.sum([s.velocity for s in self.sources], axis=0)

    def tolerance_for(self, cell_size):
        """Divergence tolerance in 1/s; defaults to 1e-4 * reference speed / cell size."""
        if self.divergence_tolerance is not None:
            return float(self.divergence_tolerance)
        return 1e-4 * self.reference_speed / cell_size

    def to_dict(self):
        d = asdict(self)
        d["sources"] = [asdict(s) for s in self.sources]
        return d

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        solver = data.pop("solver", {}) or {}
        data.update(solver)
        data["sources"] = tuple(WindSource(**s) for s in data.get("sources", ()))
        return cls(**data)

    def digest(self):
        """Stable hash of the configuration, used to tie artifacts together."""
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def boundary_conditions(config):
    """Kind code per (axis, side) and inflow velocity per face: arrays (3, 2) and (3, 2, 3)."""
    kinds = np.full((3, 2), _SLIP, dtype=np.int64)
    values = np.zeros((3, 2, 3))
    for s in config.sources:
        a, side = _face_index(s.face)
        kinds[a, side] = _INFLOW
        values[a, side] = s.velocity
    opposed = any(kinds[a, 0] == _INFLOW and kinds[a, 1] == _INFLOW for a in (0, 1))
    for a in (0, 1):
        for side in (0, 1):
            if kinds[a, side] == _INFLOW:
                continue
            if kinds[a, 1 - side] == _INFLOW or opposed:
                kinds[a, side] = _OUTFLOW
    return kinds, values


@dataclass
class WindField:
    """Cell-centered wind on a scan range; occupied cells carry zero velocity."""

    range: ScanRange
    velocity: np.ndarray  # (3, nx, ny, nz)
    occupied: np.ndarray  # (nx, ny, nz) bool
    converged: bool
    final_residual: float
    bc_kinds: np.ndarray
    bc_values: np.ndarray
    config_hash: str = ""
    iterations: int = 0
    max_divergence: float = float("nan")
    turbulence: dict = field(default_factory=dict)

    @property
    def empty(self):
        return ~self.occupied

    @property
    def n_empty(self):
        return int(self.empty.sum())

    def speed(self):
        return np.sqrt((self.velocity**2).sum(axis=0))

    def empty_cells(self):
        """Empty cell coordinates in storage order (k outermost, then j, then i)."""
        k, j, i = np.nonzero(self.empty.transpose(2, 1, 0))
        return np.stack([i, j, k], axis=1)

    def empty_velocities(self):
        c = self.empty_cells()
        return self.velocity[:, c[:, 0], c[:, 1], c[:, 2]].T.copy()


# ---------------------------------------------------------------------------
# discrete operators

def _face_fluxes(velocity, fluid, kinds, values):
    """Normal face velocity on every face, per axis: shapes (n_a + 1, ...)."""
    out = []
    for a in range(3):
        u = np.moveaxis(velocity[a], a, 0)
        f = np.moveaxis(fluid, a, 0)
        flux = np.zeros((u.shape[0] + 1,) + u.shape[1:])
        both = f[:-1] & f[1:]
        flux[1:-1] = np.where(both, 0.5 * (u[:-1] + u[1:]), 0.0)
        for side, idx, fidx in ((0, 0, 0), (1, -1, -1)):
            kind = kinds[a, side]
            if kind == _INFLOW:
                flux[fidx] = np.where(f[idx], values[a, side, a], 0.0)
            elif kind == _OUTFLOW:
                flux[fidx] = np.where(f[idx], u[idx], 0.0)
        out.append(np.moveaxis(flux, 0, a))
    return out


def divergence_field(field):
    """Discrete divergence (1/s) at every cell; NaN at occupied cells."""
    fluid = field.empty
    fx, fy, fz = _face_fluxes(field.velocity, fluid, field.bc_kinds, field.bc_values)
    h = field.range.cell_size
    div = (np.diff(fx, axis=0) + np.diff(fy, axis=1) + np.diff(fz, axis=2)) / h
    return np.where(fluid, div, np.nan)


def interior_mask(shape):
    m = np.zeros(shape, dtype=bool)
    m[1:-1, 1:-1, 1:-1] = True
    return m


def divergence(field, cell):
    """Divergence at one empty cell."""
    cell = tuple(int(c) for c in cell)
    if not field.range.contains_cells(np.array(cell))[0]:
        raise IndexError(f"cell {cell} outside range {field.range.shape}")
    if field.occupied[cell]:
        raise ValueError(f"cell {cell} is occupied; divergence is defined on empty cells only")
    return float(divergence_field(field)[cell])


def max_divergence(field, interior_only=True):
    div = divergence_field(field)
    sel = field.empty & (interior_mask(field.occupied.shape) if interior_only else True)
    return float(np.max(np.abs(div[sel]))) if sel.any() else 0.0


def mass_flux(field, axis, index):
    """Volume flux (m^3/s) through the cell layer `index` normal to `axis`."""
    if isinstance(axis, str):
        axis = "xyz".index(axis)
    n = field.range.shape[axis]
    if not 0 <= index < n:
        raise IndexError(f"plane index {index} outside 0..{n - 1} on axis {axis}")
    u = np.take(field.velocity[axis], index, axis=axis)
    fluid = np.take(field.empty, index, axis=axis)
    return float(u[fluid].sum() * field.range.cell_size**2)


def face_mass_flux(field, axis, face):
    """Volume flux (m^3/s) through face plane `face` (between layers face-1 and face).

    Uses the same face velocities as the divergence operator, so on a
    divergence-free field every plane of a sealed channel carries the same flux.
    Cell-layer sums from :func:`mass_flux` can differ from it by an odd-even
    ripple of the collocated grid upstream of blunt obstacles.
    """
    if isinstance(axis, str):
        axis = "xyz".index(axis)
    n = field.range.shape[axis]
    if not 0 <= face <= n:
        raise IndexError(f"face index {face} outside 0..{n} on axis {axis}")
    flux = _face_fluxes(field.velocity, field.empty, field.bc_kinds, field.bc_values)[axis]
    return float(np.take(flux, face, axis=axis).sum() * field.range.cell_size**2)


def _divergence_matrix(fluid, h, kinds, values):
    """Sparse D (N x 3N) and constant term d0 so that div = D x + d0 on fluid cells."""
    idx = -np.ones(fluid.shape, dtype=np.int64)
    n = int(fluid.sum())
    # fluid cells numbered in storage order (k outermost)
    order = np.nonzero(fluid.transpose(2, 1, 0))
    idx.transpose(2, 1, 0)[order] = np.arange(n)
    rows, cols, vals = [], [], []
    d0 = np.zeros(n)
    for a in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[a] = slice(0, -1)
        hi[a] = slice(1, None)
        left = idx[tuple(lo)]
        right = idx[tuple(hi)]
        both = (left >= 0) & (right >= 0)
        c, r = left[both], right[both]
        for row, sign in ((c, 1.0), (r, -1.0)):
            for col in (c, r):
                rows.append(row)
                cols.append(a * n + col)
                vals.append(np.full(row.size, sign * 0.5 / h))
        for side in (0, 1):
            sl = [slice(None)] * 3
            sl[a] = 0 if side == 0 else -1
            cells = idx[tuple(sl)]
            cells = cells[cells >= 0]
            sign = -1.0 if side == 0 else 1.0
            if kinds[a, side] == _INFLOW:
                d0[cells] += sign * values[a, side, a] / h
            elif kinds[a, side] == _OUTFLOW:
                rows.append(cells)
                cols.append(a * n + cells)
                vals.append(np.full(cells.size, sign / h))
    D = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, 3 * n)
    )
    D.sum_duplicates()
    return D, d0, idx


@numba.njit(cache=True)
def _ghost(phi, nb, nb_fluid, inside, kind, inflow, normal):
    """Neighbor value seen from a fluid cell holding `phi`."""
    if inside:
        return nb if nb_fluid else -phi  # no-slip at a solid face
    if kind == 1:
        return inflow
    if kind == 2 or not normal:
        return phi
    return -phi  # slip wall mirrors the normal component


@numba.njit(cache=True)
def _advect_diffuse(u, fluid, kinds, values, h, nu, dt, out):
    """One explicit upwind advection + diffusion step into `out`."""
    nx, ny, nz = fluid.shape
    inv_h = 1.0 / h
    inv_h2 = 1.0 / (h * h)
    for i in range(nx):
        im, ip = max(i - 1, 0), min(i + 1, nx - 1)
        for j in range(ny):
            jm, jp = max(j - 1, 0), min(j + 1, ny - 1)
            for k in range(nz):
                km, kp = max(k - 1, 0), min(k + 1, nz - 1)
                if not fluid[i, j, k]:
                    for m in range(3):
                        out[m, i, j, k] = 0.0
                    continue
                for m in range(3):
                    phi = u[m, i, j, k]
                    acc = 0.0
                    for a in range(3):
                        if a == 0:
                            lo = _ghost(phi, u[m, im, j, k], fluid[im, j, k], i > 0, kinds[0, 0], values[0, 0, m], m == 0)
                            hi = _ghost(phi, u[m, ip, j, k], fluid[ip, j, k], i < nx - 1, kinds[0, 1], values[0, 1, m], m == 0)
                        elif a == 1:
                            lo = _ghost(phi, u[m, i, jm, k], fluid[i, jm, k], j > 0, kinds[1, 0], values[1, 0, m], m == 1)
                            hi = _ghost(phi, u[m, i, jp, k], fluid[i, jp, k], j < ny - 1, kinds[1, 1], values[1, 1, m], m == 1)
                        else:
                            lo = _ghost(phi, u[m, i, j, km], fluid[i, j, km], k > 0, kinds[2, 0], values[2, 0, m], m == 2)
                            hi = _ghost(phi, u[m, i, j, kp], fluid[i, j, kp], k < nz - 1, kinds[2, 1], values[2, 1, m], m == 2)
                        ua = u[a, i, j, k]
                        if ua > 0:
                            acc -= ua * (phi - lo) * inv_h
                        else:
                            acc -= ua * (hi - phi) * inv_h
                        acc += nu * (hi - 2.0 * phi + lo) * inv_h2
                    out[m, i, j, k] = phi + dt * acc


class _Projector:
    def __init__(self, fluid, h, kinds, values):
        import pyamg

        self.fluid = fluid
        self.D, self.d0, self.idx = _divergence_matrix(fluid, h, kinds, values)
        self.DT = self.D.T.tocsr()
        A = (self.D @ self.DT).tocsr()
        self.amg = pyamg.ruge_stuben_solver(A, max_coarse=500)
        self.n = self.D.shape[0]
        self.lam = np.zeros(self.n)
        order = np.nonzero(fluid.transpose(2, 1, 0))
        self.cells = (order[2], order[1], order[0])

    def gather(self, u):
        return np.concatenate([u[m][self.cells] for m in range(3)])

    def scatter(self, x, u):
        for m in range(3):
            u[m][self.cells] = x[m * self.n:(m + 1) * self.n]

    def residual(self, x):
        return self.D @ x + self.d0

    def project(self, u, atol, maxiter=50):
        """Project in place; returns max |div| after projection."""
        x = self.gather(u)
        r = self.residual(x)
        rnorm = np.linalg.norm(r)
        if rnorm > atol:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                self.lam = self.amg.solve(
                    r, x0=self.lam, tol=atol / rnorm, accel="cg", maxiter=maxiter
                )
            x = x - self.DT @ self.lam
            self.scatter(x, u)
            r = self.residual(x)
        return float(np.abs(r).max()) if r.size else 0.0


def solve_wind(grid, config):
    """Steady wind field over the empty cells of `grid`.

    Non-convergence within ``config.max_iterations`` is reported through
    ``converged=False`` and ``final_residual`` rather than raised.
    """
    rng = grid.range
    fluid = ~grid.mask
    if not fluid.any():
        raise NoFluidError("no fluid cells: the occupancy grid is fully occupied")
    h = rng.cell_size
    kinds, values = boundary_conditions(config)
    nu = config.viscosity
    u_ref = config.reference_speed
    tol = config.tolerance_for(h)
    top = rng.upper[2]
    occ_z = np.nonzero(grid.mask.any(axis=(0, 1)))[0]
    if occ_z.size:
        tallest = (occ_z.max() + 1) * h
        if top - rng.origin[2] < 2 * tallest:
            log.warning("domain top %.1f m is below twice the tallest obstacle (%.1f m)", top, tallest)

    u = np.zeros((3,) + rng.shape)
    mean = config.mean_velocity
    for m in range(3):
        u[m][fluid] = mean[m]
    proj = _Projector(fluid, h, kinds, values)
    proj.project(u, atol=0.5 * tol, maxiter=500)

    fluid_c = np.ascontiguousarray(fluid)
    kinds_c = np.ascontiguousarray(kinds)
    values_c = np.ascontiguousarray(values)
    new = np.empty_like(u)
    residual = math.inf
    iterations = 0
    converged = False
    for iterations in range(1, int(config.max_iterations) + 1):
        smax = float((np.abs(u[0]) + np.abs(u[1]) + np.abs(u[2])).max())
        dt = config.relaxation * h / max(smax, 1e-12)
        dt = min(dt, config.relaxation * h * h / (6.0 * nu))
        _advect_diffuse(u, fluid_c, kinds_c, values_c, h, nu, dt, new)
        proj.project(new, atol=5.0 * tol, maxiter=20)
        residual = float(np.abs(new - u).max()) * h / (dt * u_ref * u_ref)
        u, new = new, u
        if residual <= config.steady_tolerance:
            converged = True
            break
    final_div = proj.project(u, atol=0.5 * tol, maxiter=1000)
    u[:, ~fluid] = 0.0
    field = WindField(
        range=rng,
        velocity=u,
        occupied=grid.mask.copy(),
        converged=bool(converged),
        final_residual=residual,
        bc_kinds=kinds,
        bc_values=values,
        config_hash=config.digest(),
        iterations=iterations,
    )
    field.max_divergence = max_divergence(field)
    if field.max_divergence > tol:
        field.converged = False
    field.turbulence = turbulence_spec(config)
    log.info(
        "wind solve: %d iterations, residual %.3g, max div %.3g (tol %.3g), converged=%s",
        iterations, residual, field.max_divergence, tol, field.converged,
    )
    return field


def turbulence_spec(config):
    """Fluctuation carried to query time: turbulent sources share one factor."""
    turbulent = [s for s in config.sources if s.kind == "turbulent"]
    if not turbulent:
        return {"fluctuation": 0.0}
    return {"fluctuation": max(s.fluctuation for s in turbulent)}


# ---------------------------------------------------------------------------
# persistence

def save_field(field, path):
    header = {
        "kind": "wind-field",
        "range": field.range.to_dict(),
        "config_hash": field.config_hash,
        "converged": field.converged,
        "final_residual": field.final_residual,
        "iterations": field.iterations,
        "max_divergence": field.max_divergence,
        "bc_kinds": field.bc_kinds.tolist(),
        "bc_values": field.bc_values.tolist(),
        "turbulence": field.turbulence,
        "order": "empty cells, k outermost then j then i",
    }
    arrays = {
        "occupied_bits": np.packbits(field.occupied.reshape(-1)),
        "velocity": field.empty_velocities(),
    }
    write_container(path, FIELD_MAGIC, FIELD_VERSION, header, arrays)


def load_field(path):
    header, arrays = read_container(path, FIELD_MAGIC, FIELD_VERSION)
    rng = ScanRange.from_dict(header["range"])
    occ = np.unpackbits(arrays["occupied_bits"], count=rng.n_cells).astype(bool).reshape(rng.shape)
    vel = arrays["velocity"]
    if vel.shape != (int((~occ).sum()), 3):
        raise FormatError(f"{path}: velocity table does not match the occupancy mask")
    field = WindField(
        range=rng,
        velocity=np.zeros((3,) + rng.shape),
        occupied=occ,
        converged=header["converged"],
        final_residual=header["final_residual"],
        bc_kinds=np.asarray(header["bc_kinds"], dtype=np.int64),
        bc_values=np.asarray(header["bc_values"], dtype=np.float64),
        config_hash=header["config_hash"],
        iterations=header["iterations"],
        max_divergence=header["max_divergence"],
        turbulence=header.get("turbulence", {}),
    )
    c = field.empty_cells()
    field.velocity[:, c[:, 0], c[:, 1], c[:, 2]] = vel.T
    return field


def export_field_csv(field, path):
    c = field.empty_cells()
    centers = field.range.centers(c)
    v = field.empty_velocities()
    with open(path, "w") as fh:
        fh.write("i,j,k,x,y,z,u,v,w\n")
        for (i, j, k), p, w in zip(c, centers, v):
            fh.write(f"{i},{j},{k},{p[0]!r},{p[1]!r},{p[2]!r},{w[0]!r},{w[1]!r},{w[2]!r}\n")


class WindSolver(BaseEstimator, RegressorMixin):
    """Estimator wrapper: ``fit(grid)`` solves the flow, ``predict(X)`` returns
    the velocity of the cell containing each point (clipped into the range)."""

    def __init__(self, sources=(), effective_viscosity=1.0, max_iterations=5000,
                 divergence_tolerance=None, steady_tolerance=1e-3, relaxation=0.8):
        self.sources = sources
        self.effective_viscosity = effective_viscosity
        self.max_iterations = max_iterations
        self.divergence_tolerance = divergence_tolerance
        self.steady_tolerance = steady_tolerance
        self.relaxation = relaxation

    def _config(self):
        return WindConfig(
            sources=tuple(self.sources),
            effective_viscosity=self.effective_viscosity,
            max_iterations=self.max_iterations,
            divergence_tolerance=self.divergence_tolerance,
            steady_tolerance=self.steady_tolerance,
            relaxation=self.relaxation,
        )

    def fit(self, X, y=None):
        if not isinstance(X, OccupancyGrid):
            raise TypeError(f"WindSolver.fit expects an OccupancyGrid, got {type(X).__name__}")
        self.field_ = solve_wind(X, self._config())
        self.converged_ = self.field_.converged
        return self

    def predict(self, X):
        check_is_fitted(self, "field_")
        X = check_array(X, dtype=np.float64)
        rng = self.field_.range
        cells = np.clip(rng.cell_of(X), 0, np.asarray(rng.shape) - 1)
        return self.field_.velocity[:, cells[:, 0], cells[:, 1], cells[:, 2]].T
