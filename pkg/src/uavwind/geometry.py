"""Scene description and segment intersection queries.

Frame: right-handed, x east, y north, z up, meters.

A segment is treated as *open*: contact at an endpoint alone does not block
it, but any contact strictly between the endpoints does, including tangent
(grazing) contact with a face or edge. Segments are canonicalized
(endpoints sorted lexicographically) before any arithmetic so that
``segment_blocked(a, b) == segment_blocked(b, a)`` holds bit-for-bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from ._validation import as_vector3


class SceneError(ValueError):
    """Raised for malformed scene files or geometry violating invariants."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned solid box."""

    lo: tuple
    hi: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        if len(lo) != 3 or len(hi) != 3:
            raise SceneError("box corners must be 3-vectors")
        if not all(math.isfinite(v) for v in lo + hi):
            raise SceneError(f"box corners must be finite: {lo} {hi}")
        if not all(a < b for a, b in zip(lo, hi)):
            raise SceneError(f"box min must be < max on every axis: min={lo} max={hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def center(self):
        return tuple((a + b) / 2 for a, b in zip(self.lo, self.hi))


@dataclass(frozen=True)
class Heightmap:
    """Regular elevation grid; ``rows[r][c]`` covers x in origin.x + [c, c+1)*cell_size
    and y in origin.y + [r, r+1)*cell_size. Each cell is a solid column."""

    origin: tuple
    cell_size: float
    rows: tuple

    def __post_init__(self):
        origin = tuple(float(v) for v in self.origin)
        if len(origin) != 2:
            raise SceneError("heightmap origin must be [x, y]")
        if not (self.cell_size > 0 and math.isfinite(self.cell_size)):
            raise SceneError(f"heightmap cell_size must be > 0, got {self.cell_size}")
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.ndim != 2 or rows.size == 0:
            raise SceneError("heightmap rows must be a non-empty rectangular 2D list")
        if not np.all(np.isfinite(rows)):
            raise SceneError("heightmap elevations must be finite")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "cell_size", float(self.cell_size))
        object.__setattr__(self, "rows", tuple(tuple(r) for r in rows.tolist()))

    def columns(self, base):
        """Solid boxes for every heightmap cell rising above `base`."""
        boxes = []
        h = self.cell_size
        for r, row in enumerate(self.rows):
            for c, z in enumerate(row):
                if z > base:
                    x0 = self.origin[0] + c * h
                    y0 = self.origin[1] + r * h
                    boxes.append(Box((x0, y0, base), (x0 + h, y0 + h, z)))
        return boxes


@dataclass(frozen=True)
class Segment:
    start: np.ndarray
    end: np.ndarray

    def __post_init__(self):
        start = as_vector3(self.start, "segment start")
        end = as_vector3(self.end, "segment end")
        if np.array_equal(start, end):
            raise ValueError("segment start and end must differ")
        object.__setattr__(self, "start", start)
        object.__setattr__(self, "end", end)


class Bounds(NamedTuple):
    lo: tuple
    hi: tuple

    @property
    def is_empty(self):
        return any(a > b for a, b in zip(self.lo, self.hi))


EMPTY_BOUNDS = Bounds((math.inf,) * 3, (-math.inf,) * 3)


@dataclass(frozen=True)
class Scene:
    """Immutable scene: boxes, optional heightmap, optional triangles, ground plane.

    ``ground_z=None`` disables the ground half-space.
    """

    obstacles: tuple = ()
    heightmap: Optional[Heightmap] = None
    triangles: tuple = ()
    ground_z: Optional[float] = 0.0
    _box_lo: np.ndarray = field(init=False, repr=False, compare=False)
    _box_hi: np.ndarray = field(init=False, repr=False, compare=False)
    _tris: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        obstacles = tuple(b if isinstance(b, Box) else Box(*b) for b in self.obstacles)
        object.__setattr__(self, "obstacles", obstacles)
        if self.ground_z is not None:
            gz = float(self.ground_z)
            if not math.isfinite(gz):
                raise SceneError("ground_z must be finite")
            object.__setattr__(self, "ground_z", gz)
        tris = np.asarray(self.triangles, dtype=np.float64).reshape(-1, 3, 3)
        if not np.all(np.isfinite(tris)):
            raise SceneError("triangle vertices must be finite")
        for n, tri in enumerate(tris):
            if np.linalg.norm(np.cross(tri[1] - tri[0], tri[2] - tri[0])) == 0:
                raise SceneError(f"triangle {n} is degenerate (zero area)")
        object.__setattr__(self, "triangles", tuple(map(tuple, tris.tolist())))
        solids = list(obstacles)
        if self.heightmap is not None:
            solids += self.heightmap.columns(self._column_base())
        lo = np.array([b.lo for b in solids], dtype=np.float64).reshape(-1, 3)
        hi = np.array([b.hi for b in solids], dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "_box_lo", lo)
        object.__setattr__(self, "_box_hi", hi)
        object.__setattr__(self, "_tris", tris)

    def _column_base(self):
        if self.ground_z is not None:
            return self.ground_z
        return min(min(r) for r in self.heightmap.rows) - self.heightmap.cell_size

    @property
    def solid_boxes(self):
        """(lo, hi) arrays of every solid box, heightmap columns included."""
        return self._box_lo, self._box_hi

    def translated(self, offset):
        """Copy of the scene shifted by `offset` (used by invariance checks)."""
        off = as_vector3(offset, "offset")
        hm = None
        if self.heightmap is not None:
            hm = Heightmap(
                (self.heightmap.origin[0] + off[0], self.heightmap.origin[1] + off[1]),
                self.heightmap.cell_size,
                np.asarray(self.heightmap.rows) + off[2],
            )
        return Scene(
            obstacles=tuple(Box(np.add(b.lo, off), np.add(b.hi, off)) for b in self.obstacles),
            heightmap=hm,
            triangles=self._tris + off if len(self._tris) else (),
            ground_z=None if self.ground_z is None else self.ground_z + off[2],
        )


# ---------------------------------------------------------------------------
# loading

def _vec(value, where, size=3):
    if not isinstance(value, (list, tuple)) or len(value) != size:
        raise SceneError(f"{where}: expected a list of {size} numbers, got {value!r}")
    try:
        return tuple(float(v) for v in value)
    except (TypeError, ValueError):
        raise SceneError(f"{where}: expected numbers, got {value!r}") from None


def scene_from_dict(data, source="<scene>"):
    if not isinstance(data, dict):
        raise SceneError(f"{source}: top level must be an object with an 'obstacles' list")
    if "obstacles" not in data:
        raise SceneError(f"{source}: missing required key 'obstacles'")
    raw = data["obstacles"]
    if not isinstance(raw, list):
        raise SceneError(f"{source}: 'obstacles' must be a list")
    boxes = []
    for n, item in enumerate(raw):
        where = f"{source}: obstacles[{n}]"
        if not isinstance(item, dict) or "min" not in item or "max" not in item:
            raise SceneError(f"{where}: expected {{'min': [x,y,z], 'max': [x,y,z]}}")
        try:
            boxes.append(Box(_vec(item["min"], where + ".min"), _vec(item["max"], where + ".max")))
        except SceneError as exc:
            if str(exc).startswith(source):
                raise
            raise SceneError(f"{where}: {exc}") from None
    heightmap = None
    if data.get("heightmap") is not None:
        hm = data["heightmap"]
        where = f"{source}: heightmap"
        if not isinstance(hm, dict) or not {"origin", "cell_size", "rows"} <= hm.keys():
            raise SceneError(f"{where}: requires 'origin', 'cell_size' and 'rows'")
        try:
            heightmap = Heightmap(_vec(hm["origin"], where + ".origin", 2), float(hm["cell_size"]), hm["rows"])
        except (TypeError, ValueError) as exc:
            raise SceneError(f"{where}: {exc}") from None
    triangles = []
    for n, tri in enumerate(data.get("triangles") or []):
        where = f"{source}: triangles[{n}]"
        if not isinstance(tri, list) or len(tri) != 3:
            raise SceneError(f"{where}: expected three vertices")
        triangles.append([_vec(v, f"{where}[{m}]") for m, v in enumerate(tri)])
    ground = data.get("ground_z", 0.0)
    try:
        return Scene(tuple(boxes), heightmap, tuple(triangles), None if ground is None else float(ground))
    except SceneError as exc:
        raise SceneError(f"{source}: {exc}") from None


def load_scene(path):
    """Read and validate a JSON scene file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise SceneError(f"cannot read scene file {path}: {exc.strerror}") from exc
    if not text.strip():
        raise SceneError(f"{path}: empty file; a scene needs at least {{\"obstacles\": []}}")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return scene_from_dict(data, str(path))


def scene_to_dict(scene):
    out = {
        "obstacles": [{"min": list(b.lo), "max": list(b.hi)} for b in scene.obstacles],
        "ground_z": scene.ground_z,
    }
    if scene.heightmap is not None:
        out["heightmap"] = {
            "origin": list(scene.heightmap.origin),
            "cell_size": scene.heightmap.cell_size,
            "rows": [list(r) for r in scene.heightmap.rows],
        }
    if scene.triangles:
        out["triangles"] = [[list(v) for v in tri] for tri in scene.triangles]
    return out


def save_scene(scene, path):
    Path(path).write_text(json.dumps(scene_to_dict(scene), indent=2))


def scene_bounds(scene):
    """Tightest AABB around all finite geometry; ``EMPTY_BOUNDS`` if there is none.

    The ground plane is unbounded and does not contribute.
    """
    lo, hi = scene.solid_boxes
    pts = [lo, hi, scene._tris.reshape(-1, 3)]
    pts = np.concatenate(pts, axis=0)
    if len(pts) == 0:
        return EMPTY_BOUNDS
    return Bounds(tuple(pts.min(axis=0).tolist()), tuple(pts.max(axis=0).tolist()))


# ---------------------------------------------------------------------------
# segment queries

def _canonical(starts, ends):
    # lexicographic endpoint ordering, so both directions share one computation
    swap = (ends[:, 0] < starts[:, 0]) | (
        (ends[:, 0] == starts[:, 0])
        & ((ends[:, 1] < starts[:, 1]) | ((ends[:, 1] == starts[:, 1]) & (ends[:, 2] < starts[:, 2])))
    )
    s = np.where(swap[:, None], ends, starts)
    e = np.where(swap[:, None], starts, ends)
    return s, e


def _segments_hit_box(s, d, lo, hi):
    """Slab test of open segments s + t*d, t in (0, 1), against a closed box."""
    t_enter = np.full(len(s), -np.inf)
    t_exit = np.full(len(s), np.inf)
    ok = np.ones(len(s), dtype=bool)
    with np.errstate(divide="ignore", invalid="ignore"):
        for a in range(3):
            da = d[:, a]
            flat = da == 0
            ok &= ~flat | ((s[:, a] >= lo[a]) & (s[:, a] <= hi[a]))
            t1 = (lo[a] - s[:, a]) / da
            t2 = (hi[a] - s[:, a]) / da
            near = np.where(flat, -np.inf, np.minimum(t1, t2))
            far = np.where(flat, np.inf, np.maximum(t1, t2))
            t_enter = np.maximum(t_enter, near)
            t_exit = np.minimum(t_exit, far)
    return ok & (t_enter <= t_exit) & (t_enter < 1.0) & (t_exit > 0.0)


def _coplanar_hit(s, e, tri):
    """Closed 2D overlap test for a segment lying in the triangle's plane."""
    n = np.cross(tri[1] - tri[0], tri[2] - tri[0])
    drop = int(np.argmax(np.abs(n)))
    keep = [a for a in range(3) if a != drop]
    p, q = s[keep], e[keep]
    v = tri[:, keep]

    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    def inside(pt):
        o = [orient(v[k], v[(k + 1) % 3], pt) for k in range(3)]
        return all(x >= 0 for x in o) or all(x <= 0 for x in o)

    def on_seg(a, b, c):
        return min(a[0], b[0]) <= c[0] <= max(a[0], b[0]) and min(a[1], b[1]) <= c[1] <= max(a[1], b[1])

    def cross(a, b, c, d):
        o1, o2, o3, o4 = orient(a, b, c), orient(a, b, d), orient(c, d, a), orient(c, d, b)
        if ((o1 > 0 > o2) or (o1 < 0 < o2)) and ((o3 > 0 > o4) or (o3 < 0 < o4)):
            return True
        return (
            (o1 == 0 and on_seg(a, b, c)) or (o2 == 0 and on_seg(a, b, d))
            or (o3 == 0 and on_seg(c, d, a)) or (o4 == 0 and on_seg(c, d, b))
        )

    if inside((p + q) / 2):
        return True
    return any(cross(p, q, v[k], v[(k + 1) % 3]) for k in range(3))


def _segments_hit_triangle(s, d, tri):
    """Moller-Trumbore with inclusive edges and an open parameter interval."""
    v0, v1, v2 = tri
    e1 = v1 - v0
    e2 = v2 - v0
    pvec = np.cross(d, e2)
    det = pvec @ e1
    scale = np.linalg.norm(d, axis=1) * np.linalg.norm(e1) * np.linalg.norm(e2)
    parallel = np.abs(det) <= 1e-12 * scale
    hit = np.zeros(len(s), dtype=bool)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / det
        tvec = s - v0
        u = np.einsum("ij,ij->i", tvec, pvec) * inv
        qvec = np.cross(tvec, e1)
        v = np.einsum("ij,ij->i", qvec, d) * inv
        t = (qvec @ e2) * inv
    hit[~parallel] = ((u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0) & (t < 1))[~parallel]
    if np.any(parallel):
        normal = np.cross(e1, e2)
        for n in np.flatnonzero(parallel):
            if abs((s[n] - v0) @ normal) <= 1e-12 * np.linalg.norm(normal) * (1 + np.abs(s[n]).max()):
                hit[n] = _coplanar_hit(s[n], s[n] + d[n], tri)
    return hit


def segments_blocked(scene, starts, ends):
    """Vectorized :func:`segment_blocked` over arrays of shape (n, 3)."""
    starts = np.asarray(starts, dtype=np.float64).reshape(-1, 3)
    ends = np.asarray(ends, dtype=np.float64).reshape(-1, 3)
    s, e = _canonical(starts, ends)
    d = e - s
    blocked = np.zeros(len(s), dtype=bool)
    if scene.ground_z is not None:
        blocked |= np.minimum(s[:, 2], e[:, 2]) < scene.ground_z
    seg_lo = np.minimum(s, e)
    seg_hi = np.maximum(s, e)
    box_lo, box_hi = scene.solid_boxes
    for lo, hi in zip(box_lo, box_hi):
        # cheap AABB overlap prefilter, then the exact slab test on survivors
        cand = ~blocked & np.all(seg_hi >= lo, axis=1) & np.all(seg_lo <= hi, axis=1)
        if cand.any():
            idx = np.flatnonzero(cand)
            blocked[idx] = _segments_hit_box(s[idx], d[idx], lo, hi)
    for tri in scene._tris:
        cand = ~blocked & np.all(seg_hi >= tri.min(axis=0), axis=1) & np.all(seg_lo <= tri.max(axis=0), axis=1)
        if cand.any():
            idx = np.flatnonzero(cand)
            blocked[idx] = _segments_hit_triangle(s[idx], d[idx], tri)
    return blocked


def segment_blocked(scene, seg):
    """True iff any scene geometry touches the open segment, or it dips below ground."""
    if not isinstance(seg, Segment):
        seg = Segment(*seg)
    return bool(segments_blocked(scene, seg.start[None], seg.end[None])[0])
