"""Wind lookup database: a k-d tree over empty-cell centers.

The tree is stored implicitly. Entries are permuted so that every subtree
occupies a contiguous slice ``[lo, hi)`` whose splitting entry sits at
``mid = (lo + hi) // 2``; the split axis cycles x, y, z with depth. Within
a slice the order along the split axis is total: ties on the coordinate are
broken by the lexicographic order of the cell coordinate, so construction
is deterministic and nearest-neighbor ties resolve to the smallest cell.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, replace

import numba
import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ._io import FormatError, read_container, write_container
from ._validation import as_vector3, check_positive
from .voxelizer import ScanRange

INDEX_MAGIC = b"UWINDEX\x00"
INDEX_VERSION = 1


@numba.njit(cache=True)
def _build(ranks, inverse, n):
    """Permutation placing entries in implicit k-d tree order."""
    perm = np.arange(n)
    stack_lo = np.empty(64, np.int64)
    stack_hi = np.empty(64, np.int64)
    stack_d = np.empty(64, np.int64)
    top = 0
    stack_lo[0], stack_hi[0], stack_d[0] = 0, n, 0
    top = 1
    while top > 0:
        top -= 1
        lo, hi, depth = stack_lo[top], stack_hi[top], stack_d[top]
        if hi - lo <= 1:
            continue
        axis = depth % 3
        mid = (lo + hi) // 2
        keys = np.empty(hi - lo, np.int64)
        for t in range(lo, hi):
            keys[t - lo] = ranks[axis, perm[t]]
        keys = np.partition(keys, mid - lo)
        for t in range(lo, hi):
            perm[t] = inverse[axis, keys[t - lo]]
        stack_lo[top], stack_hi[top], stack_d[top] = lo, mid, depth + 1
        top += 1
        stack_lo[top], stack_hi[top], stack_d[top] = mid + 1, hi, depth + 1
        top += 1
    return perm


@numba.njit(cache=True)
def _nearest(points, lex, qx, qy, qz):
    """Index (in tree order) of the nearest entry; ties go to the smallest lex key."""
    n = points.shape[0]
    stack_lo = np.empty(128, np.int64)
    stack_hi = np.empty(128, np.int64)
    stack_d = np.empty(128, np.int64)
    stack_b = np.empty(128, np.float64)
    stack_lo[0], stack_hi[0], stack_d[0], stack_b[0] = 0, n, 0, 0.0
    top = 1
    best = -1
    best_d2 = np.inf
    best_lex = 0
    while top > 0:
        top -= 1
        lo, hi, depth, bound = stack_lo[top], stack_hi[top], stack_d[top], stack_b[top]
        if lo >= hi or bound > best_d2:
            continue
        mid = (lo + hi) // 2
        dx = qx - points[mid, 0]
        dy = qy - points[mid, 1]
        dz = qz - points[mid, 2]
        d2 = dx * dx + dy * dy + dz * dz
        if d2 < best_d2 or (d2 == best_d2 and lex[mid] < best_lex):
            best, best_d2, best_lex = mid, d2, lex[mid]
        axis = depth % 3
        diff = dx if axis == 0 else (dy if axis == 1 else dz)
        gap = diff * diff
        # left slice holds coordinates <= split, right slice >= split
        if diff >= 0:
            stack_lo[top], stack_hi[top], stack_d[top], stack_b[top] = lo, mid, depth + 1, gap
            top += 1
            stack_lo[top], stack_hi[top], stack_d[top], stack_b[top] = mid + 1, hi, depth + 1, 0.0
            top += 1
        else:
            stack_lo[top], stack_hi[top], stack_d[top], stack_b[top] = mid + 1, hi, depth + 1, gap
            top += 1
            stack_lo[top], stack_hi[top], stack_d[top], stack_b[top] = lo, mid, depth + 1, 0.0
            top += 1
    return best


@numba.njit(cache=True)
def _nearest_many(points, lex, queries):
    out = np.empty(queries.shape[0], np.int64)
    for q in range(queries.shape[0]):
        out[q] = _nearest(points, lex, queries[q, 0], queries[q, 1], queries[q, 2])
    return out


def _lex_rank(cells):
    order = np.lexsort((cells[:, 2], cells[:, 1], cells[:, 0]))
    rank = np.empty(len(cells), np.int64)
    rank[order] = np.arange(len(cells))
    return rank


def tree_depth(n):
    """Depth of the implicit tree holding n entries."""
    return int(math.ceil(math.log2(n + 1))) if n > 0 else 0


class WindIndex:
    """Immutable nearest-neighbor wind database.

    Arrays are held in tree order: ``points`` (cell centers, m), ``velocities``
    (m/s), ``cells`` (integer cell coordinates) and ``lex`` (lexicographic rank
    of each cell, the tie-break key).
    """

    def __init__(self, points, velocities, cells, bounds=None, fluctuation=0.0, config_hash=""):
        points = np.ascontiguousarray(points, dtype=np.float64)
        velocities = np.ascontiguousarray(velocities, dtype=np.float64)
        cells = np.ascontiguousarray(cells, dtype=np.int64)
        n = len(points)
        if n == 0:
            raise ValueError("cannot index a wind field with no empty cells")
        if points.shape != (n, 3) or velocities.shape != (n, 3) or cells.shape != (n, 3):
            raise ValueError("points, velocities and cells must all have shape (n, 3)")
        if len(np.unique(cells, axis=0)) != n:
            raise ValueError("cell coordinates must be unique")
        lex = _lex_rank(cells)
        ranks = np.empty((3, n), np.int64)
        inverse = np.empty((3, n), np.int64)
        for a in range(3):
            order = np.lexsort((cells[:, 2], cells[:, 1], cells[:, 0], points[:, a]))
            ranks[a, order] = np.arange(n)
            inverse[a] = order
        perm = _build(ranks, inverse, n)
        self._set(points[perm], velocities[perm], cells[perm], lex[perm], perm, bounds, fluctuation, config_hash)

    def _set(self, points, velocities, cells, lex, perm, bounds, fluctuation, config_hash):
        self.points = points
        self.velocities = velocities
        self.cells = cells
        self.lex = lex
        self.perm = perm
        self.bounds = bounds
        self.fluctuation = float(fluctuation)
        self.config_hash = config_hash
        for arr in (points, velocities, cells, lex, perm):
            arr.flags.writeable = False

    @classmethod
    def _from_tree(cls, points, velocities, cells, lex, perm, bounds, fluctuation, config_hash):
        obj = cls.__new__(cls)
        obj._set(points, velocities, cells, lex, perm, bounds, fluctuation, config_hash)
        return obj

    def __len__(self):
        return len(self.points)

    @property
    def depth(self):
        return tree_depth(len(self))

    @property
    def turbulent(self):
        return self.fluctuation > 0

    def nearest(self, position):
        """Tree-order index of the entry nearest to `position`."""
        q = np.asarray(position, dtype=np.float64)
        return int(_nearest(self.points, self.lex, q[0], q[1], q[2]))

    def nearest_many(self, positions):
        q = np.ascontiguousarray(positions, dtype=np.float64).reshape(-1, 3)
        return _nearest_many(self.points, self.lex, q)

    def lookup(self, positions):
        """Stored (unfluctuated) velocities nearest to each position, shape (n, 3)."""
        return self.velocities[self.nearest_many(positions)]

    def same_structure(self, other):
        return (
            np.array_equal(self.perm, other.perm)
            and np.array_equal(self.points, other.points)
            and np.array_equal(self.velocities, other.velocities)
            and np.array_equal(self.cells, other.cells)
        )


def build_index(field):
    """k-d tree over every empty cell of a wind field."""
    cells = field.empty_cells()
    if len(cells) == 0:
        raise ValueError("wind field has no empty cells to index")
    return WindIndex(
        field.range.centers(cells),
        field.empty_velocities(),
        cells,
        bounds=field.range,
        fluctuation=field.turbulence.get("fluctuation", 0.0),
        config_hash=field.config_hash,
    )


def brute_force_nearest(points, cells, position):
    """Linear-scan reference: nearest entry, ties to the smallest cell coordinate."""
    q = np.asarray(position, dtype=np.float64)
    dx = q[0] - points[:, 0]
    dy = q[1] - points[:, 1]
    dz = q[2] - points[:, 2]
    d2 = dx * dx + dy * dy + dz * dz
    tied = np.flatnonzero(d2 == d2.min())
    if len(tied) == 1:
        return int(tied[0])
    c = cells[tied]
    return int(tied[np.lexsort((c[:, 2], c[:, 1], c[:, 0]))[0]])


# ---------------------------------------------------------------------------
# fluctuation

_NOISE_BLOCK = 4096


@functools.lru_cache(maxsize=64)
def _noise_block(seed, block):
    out = np.random.default_rng([seed, block]).standard_normal(_NOISE_BLOCK)
    out.flags.writeable = False
    return out


def _noise(seed, step):
    return float(_noise_block(seed, step // _NOISE_BLOCK)[step % _NOISE_BLOCK])


def _reflect(x, lo, hi):
    """Fold x back into [lo, hi] by mirror reflection at the bounds."""
    if hi <= lo:
        return lo
    width = hi - lo
    y = (x - lo) % (2 * width)
    return lo + (y if y <= width else 2 * width - y)


@dataclass(frozen=True)
class FluctuationState:
    """Multiplicative gust factor following a reflected Ornstein-Uhlenbeck process.

    The factor reverts toward 1 with time constant `correlation_time` and has
    stationary standard deviation ``intensity * fluctuation`` before reflection
    at ``[1 - fluctuation, 1 + fluctuation]``. The noise drawn at each step is a
    pure function of (seed, step), so states can be copied and replayed freely.
    """

    fluctuation: float = 0.0
    seed: int = 0
    correlation_time: float = 1.0
    intensity: float = 0.5
    factor: float = 1.0
    step: int = 0

    def __post_init__(self):
        if not 0 <= self.fluctuation < 1:
            raise ValueError(f"fluctuation must lie in [0, 1), got {self.fluctuation!r}")
        check_positive(self.correlation_time, "correlation_time")
        check_positive(self.intensity, "intensity")

    @classmethod
    def for_index(cls, index, seed=0, **kwargs):
        return cls(fluctuation=index.fluctuation, seed=int(seed), **kwargs)

    @property
    def bounds(self):
        return 1.0 - self.fluctuation, 1.0 + self.fluctuation


def advance_fluctuation(fluct, dt):
    """One exact OU step of length dt, reflected into the allowed band."""
    if not dt > 0:
        raise ValueError(f"dt must be > 0, got {dt!r}")
    if fluct.fluctuation == 0:
        return replace(fluct, factor=1.0, step=fluct.step + 1)
    decay = math.exp(-dt / fluct.correlation_time)
    sigma = fluct.intensity * fluct.fluctuation
    x = 1.0 + (fluct.factor - 1.0) * decay + sigma * math.sqrt(1.0 - decay * decay) * _noise(fluct.seed, fluct.step)
    lo, hi = fluct.bounds
    return replace(fluct, factor=_reflect(x, lo, hi), step=fluct.step + 1)


def query_wind(index, position, time=0.0, fluct=None):
    """Nearest stored wind vector, scaled by the gust factor when the field is turbulent.

    `time` is carried for interface symmetry; the fluctuation timeline lives in
    `fluct`. Positions outside the indexed volume return the nearest entry.
    """
    p = as_vector3(position, "position")
    v = index.velocities[index.nearest(p)]
    if index.turbulent and fluct is not None:
        return v * fluct.factor
    return v.copy()


# ---------------------------------------------------------------------------
# persistence

def save_index(index, path):
    header = {
        "kind": "wind-index",
        "entries": len(index),
        "config_hash": index.config_hash,
        "fluctuation": index.fluctuation,
        "bounds": index.bounds.to_dict() if index.bounds is not None else None,
        "layout": "implicit median tree; node of slice [lo,hi) at (lo+hi)//2; axis = depth % 3",
    }
    arrays = {
        "points": index.points,
        "velocities": index.velocities,
        "cells": index.cells,
        "lex": index.lex,
        "perm": index.perm,
    }
    write_container(path, INDEX_MAGIC, INDEX_VERSION, header, arrays)


def load_index(path, expected_config_hash=None):
    header, arrays = read_container(path, INDEX_MAGIC, INDEX_VERSION)
    if expected_config_hash is not None and header["config_hash"] != expected_config_hash:
        raise FormatError(
            f"{path}: index built from config {header['config_hash']}, expected {expected_config_hash}"
        )
    n = header["entries"]
    for name in ("points", "velocities", "cells"):
        if arrays[name].shape != (n, 3):
            raise FormatError(f"{path}: array {name!r} does not hold {n} entries")
    bounds = ScanRange.from_dict(header["bounds"]) if header.get("bounds") else None
    return WindIndex._from_tree(
        arrays["points"], arrays["velocities"], arrays["cells"], arrays["lex"], arrays["perm"],
        bounds, header["fluctuation"], header["config_hash"],
    )


class NearestWindRegressor(BaseEstimator, RegressorMixin):
    """scikit-learn style front end to :class:`WindIndex`.

    ``fit(X, y)`` takes cell centers (n, 3) and their velocities (n, 3);
    cell coordinates for tie-breaking are derived from `cell_size` when not given.
    """

    def __init__(self, cell_size=1.0, origin=(0.0, 0.0, 0.0)):
        self.cell_size = cell_size
        self.origin = origin

    def fit(self, X, y, cells=None):
        X, y = check_X_y(X, y, dtype=np.float64, multi_output=True)
        if X.shape[1] != 3 or y.ndim != 2 or y.shape[1] != 3:
            raise ValueError("X and y must both have shape (n, 3)")
        if cells is None:
            cells = np.floor((X - np.asarray(self.origin)) / self.cell_size).astype(np.int64)
        self.index_ = WindIndex(X, y, cells)
        self.n_features_in_ = 3
        return self

    def predict(self, X):
        check_is_fitted(self, "index_")
        X = check_array(X, dtype=np.float64)
        return self.index_.lookup(X)
