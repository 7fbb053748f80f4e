"""Terrain scanning: classify every cell of a regular grid as occupied or open.

A cell is occupied when geometry obstructs the line of sight between any of
its three pairs of opposite face centers. Each pair is traced in both
directions, six rays per cell.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from ._io import FormatError, read_container, write_container
from ._validation import as_vector3, check_positive, check_positive_int
from .geometry import Scene, segments_blocked

GRID_MAGIC = b"UWGRID\x00\x00"
GRID_VERSION = 1


@dataclass(frozen=True)
class ScanRange:
    """Grid registration: cell (i, j, k) spans origin + [i, i+1) * cell_size per axis."""

    origin: tuple
    nx: int
    ny: int
    nz: int
    cell_size: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(as_vector3(self.origin, "origin").tolist()))
        for name in ("nx", "ny", "nz"):
            object.__setattr__(self, name, check_positive_int(getattr(self, name), name))
        object.__setattr__(self, "cell_size", check_positive(self.cell_size, "cell_size"))

    @classmethod
    def cube(cls, n, extent, origin=(0.0, 0.0, 0.0)):
        """n^3 cells covering a cube of side `extent` meters."""
        return cls(origin, n, n, n, extent / n)

    @property
    def shape(self):
        return (self.nx, self.ny, self.nz)

    @property
    def n_cells(self):
        return self.nx * self.ny * self.nz

    @property
    def upper(self):
        h = self.cell_size
        return tuple(o + n * h for o, n in zip(self.origin, self.shape))

    def centers(self, cells):
        """Centers of integer cell coordinates, shape (n, 3)."""
        cells = np.asarray(cells, dtype=np.float64).reshape(-1, 3)
        return np.asarray(self.origin) + (cells + 0.5) * self.cell_size

    def cell_of(self, points):
        """Integer cell containing each point (may lie outside the range)."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return np.floor((pts - np.asarray(self.origin)) / self.cell_size).astype(np.int64)

    def contains_cells(self, cells):
        cells = np.asarray(cells).reshape(-1, 3)
        return np.all((cells >= 0) & (cells < np.asarray(self.shape)), axis=1)

    def to_dict(self):
        return {"origin": list(self.origin), "cells": list(self.shape), "cell_size": self.cell_size}

    @classmethod
    def from_dict(cls, data):
        nx, ny, nz = data["cells"]
        return cls(tuple(data["origin"]), nx, ny, nz, data.get("cell_size", 1.0))


class OccupancyGrid:
    """Occupied-cell set over a :class:`ScanRange`, stored as a boolean mask."""

    def __init__(self, range, mask=None):
        self.range = range
        if mask is None:
            mask = np.zeros(range.shape, dtype=bool)
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != range.shape:
            raise ValueError(f"mask shape {mask.shape} does not match range {range.shape}")
        self.mask = mask
        self.mask.flags.writeable = False

    @classmethod
    def from_cells(cls, range, cells):
        mask = np.zeros(range.shape, dtype=bool)
        cells = np.asarray(list(cells), dtype=np.int64).reshape(-1, 3)
        if not np.all(range.contains_cells(cells)):
            raise ValueError("occupied cell outside the scan range")
        mask[cells[:, 0], cells[:, 1], cells[:, 2]] = True
        return cls(range, mask)

    @property
    def occupied(self):
        """Set of occupied (i, j, k) tuples."""
        return set(map(tuple, np.argwhere(self.mask).tolist()))

    @property
    def n_occupied(self):
        return int(self.mask.sum())

    def __eq__(self, other):
        if not isinstance(other, OccupancyGrid):
            return NotImplemented
        return self.range == other.range and np.array_equal(self.mask, other.mask)

    def __repr__(self):
        return f"OccupancyGrid({self.range!r}, occupied={self.n_occupied})"


def _face_segments(centers, h):
    """Opposite face-center pairs (x, y, z) for every center: arrays (3, n, 3)."""
    starts = np.empty((3,) + centers.shape)
    ends = np.empty((3,) + centers.shape)
    for a in range(3):
        off = np.zeros(3)
        off[a] = h / 2
        starts[a] = centers - off
        ends[a] = centers + off
    return starts, ends


def obstruction_check(scene, cell_center, cell_size, bidirectional=True):
    """True iff any of the cell's six face-to-face rays is obstructed."""
    center = as_vector3(cell_center, "cell_center")
    h = check_positive(cell_size, "cell_size")
    starts, ends = _face_segments(center[None], h)
    starts, ends = starts.reshape(-1, 3), ends.reshape(-1, 3)
    hit = segments_blocked(scene, starts, ends)
    if bidirectional:
        hit |= segments_blocked(scene, ends, starts)
    return bool(hit.any())


def scan_terrain(scene, range, bidirectional=True, chunk_cells=1 << 16):
    """Classify every cell of `range`; z-major (k, then j, then i) evaluation order."""
    nx, ny, nz = range.shape
    h = range.cell_size
    origin = np.asarray(range.origin)
    mask = np.zeros((nz, ny, nx), dtype=bool)
    flat = mask.reshape(-1)
    # flat index f = (k*ny + j)*nx + i, so a plain arange walks k outermost
    for lo in np.arange(0, flat.size, chunk_cells):
        f = np.arange(lo, min(lo + chunk_cells, flat.size))
        i = f % nx
        j = (f // nx) % ny
        k = f // (nx * ny)
        centers = origin + (np.stack([i, j, k], axis=1) + 0.5) * h
        starts, ends = _face_segments(centers, h)
        starts, ends = starts.reshape(-1, 3), ends.reshape(-1, 3)
        hit = segments_blocked(scene, starts, ends)
        if bidirectional:
            hit |= segments_blocked(scene, ends, starts)
        flat[f] = hit.reshape(3, -1).any(axis=0)
    return OccupancyGrid(range, mask.transpose(2, 1, 0).copy())


def export_grid(grid, path):
    header = {"kind": "occupancy", "range": grid.range.to_dict(), "n_occupied": grid.n_occupied}
    bits = np.packbits(grid.mask.reshape(-1))
    write_container(path, GRID_MAGIC, GRID_VERSION, header, {"occupied_bits": bits})


def import_grid(path):
    header, arrays = read_container(path, GRID_MAGIC, GRID_VERSION)
    rng = ScanRange.from_dict(header["range"])
    bits = arrays["occupied_bits"]
    mask = np.unpackbits(bits, count=rng.n_cells).astype(bool).reshape(rng.shape)
    grid = OccupancyGrid(rng, mask)
    if grid.n_occupied != header["n_occupied"]:
        raise FormatError(f"{path}: occupied count mismatch")
    return grid


def export_grid_text(grid, path):
    """Debug dump: range header then one ``i j k`` line per occupied cell."""
    r = grid.range
    lines = [f"# origin {' '.join(map(repr, r.origin))} cells {r.nx} {r.ny} {r.nz} cell_size {r.cell_size!r}"]
    lines += [f"{i} {j} {k}" for i, j, k in sorted(grid.occupied)]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


class TerrainScanner(BaseEstimator, TransformerMixin):
    """Estimator wrapper around :func:`scan_terrain`.

    ``fit(scene)`` scans the scene; ``transform(X)`` maps points of shape
    (n, 3) to 1.0 where the containing cell is occupied, else 0.0.
    """

    def __init__(self, origin=(0.0, 0.0, 0.0), cells=(32, 32, 32), cell_size=1.0, bidirectional=True):
        self.origin = origin
        self.cells = cells
        self.cell_size = cell_size
        self.bidirectional = bidirectional

    def fit(self, X, y=None):
        if not isinstance(X, Scene):
            raise TypeError(f"TerrainScanner.fit expects a Scene, got {type(X).__name__}")
        nx, ny, nz = self.cells
        self.range_ = ScanRange(tuple(self.origin), nx, ny, nz, self.cell_size)
        self.grid_ = scan_terrain(X, self.range_, bidirectional=self.bidirectional)
        return self

    def transform(self, X):
        check_is_fitted(self, "grid_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != 3:
            raise ValueError(f"expected points of shape (n, 3), got {X.shape}")
        cells = self.range_.cell_of(X)
        inside = self.range_.contains_cells(cells)
        out = np.zeros(len(X))
        c = cells[inside]
        out[inside] = self.grid_.mask[c[:, 0], c[:, 1], c[:, 2]]
        return out[:, None]
