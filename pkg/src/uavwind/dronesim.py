"""Point-mass UAV flying a plan through a wind index."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._validation import as_points, as_vector3, check_positive
from .windfield import FluctuationState, advance_fluctuation, query_wind

GRAVITY = 9.81
TRAJECTORY_COLUMNS = ("t", "x", "y", "z", "vx", "vy", "vz", "wx", "wy", "wz", "ax_cmd", "ay_cmd", "az_cmd", "status")
ORBIT_WAYPOINTS_PER_LAP = 72
NOMINAL_SAMPLES_PER_LAP = 720


class SimulationFault(RuntimeError):
    """The integrator produced a non-finite state."""


@dataclass(frozen=True)
class DroneParams:
    mass: float = 1.5
    drag_coefficient: float = 1.0
    reference_area: float = 0.1
    max_thrust_accel: float = 20.0
    max_speed: float = 15.0
    kp: float = 2.0
    kd: float = 3.0

    def __post_init__(self):
        for name in ("mass", "drag_coefficient", "reference_area", "max_thrust_accel", "max_speed", "kp", "kd"):
            object.__setattr__(self, name, check_positive(getattr(self, name), name))
        if self.max_thrust_accel <= GRAVITY:
            raise ValueError(f"max_thrust_accel must exceed {GRAVITY} m/s^2 to hover, got {self.max_thrust_accel}")

    def to_dict(self):
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


@dataclass(frozen=True)
class DroneState:
    position: np.ndarray
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    time: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "position", as_vector3(self.position, "position"))
        object.__setattr__(self, "velocity", as_vector3(self.velocity, "velocity"))


@dataclass(frozen=True)
class FlightPlan:
    """A waypoint list, a circular orbit, or a vertical takeoff followed by waypoints.

    Use the ``waypoint_list``, ``orbit`` and ``vertical_takeoff`` constructors.
    Orbits start on the circle at angle 0 (due east of the center) and advance
    counter-clockwise for positive angular speed; their waypoints are released
    on a time schedule so the lap time is fixed.
    """

    kind: str
    start: tuple
    waypoints: tuple = ()
    tolerance: float = 0.5
    center: tuple = None
    radius: float = None
    angular_speed: float = None
    laps: float = 1.0
    target_altitude: float = None

    def __post_init__(self):
        if self.kind not in ("waypoints", "orbit", "vertical_takeoff"):
            raise ValueError(f"unknown plan kind {self.kind!r}")
        check_positive(self.tolerance, "tolerance")
        object.__setattr__(self, "start", tuple(as_vector3(self.start, "start").tolist()))
        wps = as_points(self.waypoints, "waypoints") if len(self.waypoints) else np.empty((0, 3))
        object.__setattr__(self, "waypoints", tuple(map(tuple, wps.tolist())))
        if self.kind == "waypoints" and not self.waypoints:
            raise ValueError("waypoint plan needs at least one waypoint")
        if self.kind == "orbit":
            check_positive(self.radius, "radius")
            check_positive(self.laps, "laps")
            if not (math.isfinite(self.angular_speed) and self.angular_speed != 0):
                raise ValueError(f"angular_speed must be finite and non-zero, got {self.angular_speed!r}")
        if self.kind == "vertical_takeoff" and not math.isfinite(self.target_altitude):
            raise ValueError("target_altitude must be finite")

    @classmethod
    def waypoint_list(cls, waypoints, start, tolerance=0.5):
        return cls("waypoints", start, tuple(map(tuple, np.asarray(waypoints, float).reshape(-1, 3))), tolerance)

    @classmethod
    def orbit(cls, center, radius, angular_speed, laps=1.0, tolerance=0.5):
        c = as_vector3(center, "center")
        start = c + np.array([radius, 0.0, 0.0])
        return cls("orbit", tuple(start), (), tolerance, tuple(c.tolist()), float(radius),
                   float(angular_speed), float(laps))

    @classmethod
    def vertical_takeoff(cls, start, target_altitude, waypoints=(), tolerance=0.5):
        wps = tuple(map(tuple, np.asarray(waypoints, float).reshape(-1, 3)))
        return cls("vertical_takeoff", start, wps, tolerance, target_altitude=float(target_altitude))

    @property
    def lap_time(self):
        return 2 * math.pi / abs(self.angular_speed)

    def targets(self):
        """Waypoints in capture order (orbit: the scheduled circle points)."""
        if self.kind == "orbit":
            n = int(math.ceil(self.laps * ORBIT_WAYPOINTS_PER_LAP))
            return self._circle(np.arange(1, n + 1) / ORBIT_WAYPOINTS_PER_LAP)
        wps = np.asarray(self.waypoints, float).reshape(-1, 3)
        if self.kind == "vertical_takeoff":
            top = np.array([[self.start[0], self.start[1], self.target_altitude]])
            wps = np.vstack([top, wps])
        return wps

    def _circle(self, fraction_of_lap):
        theta = np.sign(self.angular_speed) * 2 * math.pi * np.asarray(fraction_of_lap, float)
        c = np.asarray(self.center)
        return np.stack([c[0] + self.radius * np.cos(theta), c[1] + self.radius * np.sin(theta),
                         np.full_like(theta, c[2])], axis=1)

    def nominal_path(self):
        """Polyline the vehicle is meant to follow."""
        if self.kind == "orbit":
            n = int(math.ceil(self.laps * NOMINAL_SAMPLES_PER_LAP))
            return self._circle(np.arange(n + 1) / NOMINAL_SAMPLES_PER_LAP)
        return np.vstack([np.asarray(self.start)[None], self.targets()])

    def to_dict(self):
        out = {"kind": self.kind, "tolerance": self.tolerance}
        if self.kind == "orbit":
            out.update(center=list(self.center), radius=self.radius, angular_speed=self.angular_speed, laps=self.laps)
        else:
            out.update(start=list(self.start), waypoints=[list(w) for w in self.waypoints])
            if self.kind == "vertical_takeoff":
                out["target_altitude"] = self.target_altitude
        return out

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        kind = data.pop("kind")
        tol = data.pop("tolerance", 0.5)
        if kind == "orbit":
            return cls.orbit(data["center"], data["radius"], data["angular_speed"], data.get("laps", 1.0), tol)
        if kind == "vertical_takeoff":
            return cls.vertical_takeoff(data["start"], data["target_altitude"], data.get("waypoints", ()), tol)
        if kind == "waypoints":
            return cls.waypoint_list(data["waypoints"], data["start"], tol)
        raise ValueError(f"unknown plan kind {kind!r}")


@dataclass
class Trajectory:
    """Per-step samples; row k holds the state at time t[k] and the wind and command applied from it."""

    dt: float
    time: np.ndarray
    position: np.ndarray
    velocity: np.ndarray
    wind: np.ndarray
    command: np.ndarray
    factor: np.ndarray
    status: str

    def __len__(self):
        return len(self.time)

    @property
    def final_position(self):
        return self.position[-1]

    def rows(self):
        n = len(self)
        for k in range(n):
            state = "active" if k < n - 1 else self.status
            yield (self.time[k], *self.position[k], *self.velocity[k], *self.wind[k], *self.command[k], state)

    def to_csv(self, path):
        lines = [",".join(TRAJECTORY_COLUMNS)]
        for row in self.rows():
            lines.append(",".join(repr(float(v)) for v in row[:-1]) + "," + row[-1])
        with open(path, "w", newline="") as fh:
            fh.write("\n".join(lines) + "\n")


def read_trajectory_csv(path):
    """Load the numeric columns and terminal status of a trajectory CSV."""
    data = np.genfromtxt(path, delimiter=",", names=True, dtype=None, encoding="utf-8")
    data = np.atleast_1d(data)
    cols = {name: np.asarray(data[name], float) for name in TRAJECTORY_COLUMNS[:-1]}
    return cols, str(data["status"][-1])


def wind_force(wind, drone_velocity, params, air_density=1.225):
    """Quadratic drag on the air-relative velocity, in newtons."""
    rel = np.asarray(wind, float) - np.asarray(drone_velocity, float)
    return 0.5 * air_density * params.drag_coefficient * params.reference_area * np.linalg.norm(rel) * rel


def _clamp_with_hover(pd, limit):
    """g + s*pd with the largest s in [0, 1] keeping |g + s*pd| <= limit."""
    g = np.array([0.0, 0.0, GRAVITY])
    a = g + pd
    if np.linalg.norm(a) <= limit:
        return a
    pp = float(pd @ pd)
    gp = float(g @ pd)
    s = (-gp + math.sqrt(gp * gp - pp * (GRAVITY * GRAVITY - limit * limit))) / pp
    return g + s * pd


def controller_update(state, target, params):
    """PD command toward `target` plus hover thrust; the PD part is scaled down to respect the thrust limit."""
    pd = params.kp * (as_vector3(target, "target") - state.position) - params.kd * state.velocity
    return _clamp_with_hover(pd, params.max_thrust_accel)


def step(state, commanded_accel, wind, params, dt=0.02, air_density=1.225):
    """Semi-implicit Euler; the command is total thrust acceleration, gravity always acts."""
    check_positive(dt, "dt")
    accel = np.asarray(commanded_accel, float) + wind_force(wind, state.velocity, params, air_density) / params.mass
    accel[2] -= GRAVITY
    v = state.velocity + accel * dt
    speed = np.linalg.norm(v)
    if speed > params.max_speed:
        v = v * (params.max_speed / speed)
    p = state.position + v * dt
    if not (np.all(np.isfinite(v)) and np.all(np.isfinite(p))):
        raise SimulationFault(f"non-finite state at t={state.time + dt:.3f}")
    return DroneState(p, v, state.time + dt)


def run_flight(plan, index, params=None, seed=0, dt=0.02, timeout=120.0, air_density=1.225, ground_z=0.0):
    """Closed-loop flight of `plan` through the wind `index`.

    Each step queries the wind at the current position, advances the gust
    factor, computes the controller command and integrates. Ends when the plan
    is complete, the vehicle drops below `ground_z`, or `timeout` seconds pass.
    """
    params = params or DroneParams()
    check_positive(dt, "dt")
    check_positive(timeout, "timeout")
    targets = plan.targets()
    tol2 = plan.tolerance ** 2
    fluct = FluctuationState.for_index(index, seed=seed)
    state = DroneState(plan.start)
    n_max = int(math.ceil(timeout / dt)) + 1

    times, pos, vel, winds, cmds, factors = [], [], [], [], [], []
    current = 0
    status = "timeout"
    for k in range(n_max):
        t = k * dt
        state = DroneState(state.position, state.velocity, t)
        w = query_wind(index, state.position, t, fluct)
        if plan.kind == "orbit":
            # waypoint i is released at the time the schedule reaches it
            current = min(int(t / plan.lap_time * ORBIT_WAYPOINTS_PER_LAP), len(targets) - 1)
            done = t >= plan.laps * plan.lap_time
        else:
            while current < len(targets) and np.sum((state.position - targets[current]) ** 2) <= tol2:
                current += 1
            done = current >= len(targets)
        a = controller_update(state, targets[min(current, len(targets) - 1)], params)
        times.append(t)
        pos.append(state.position)
        vel.append(state.velocity)
        winds.append(w)
        cmds.append(a)
        factors.append(fluct.factor)
        if state.position[2] < ground_z:
            status = "crashed"
            break
        if done:
            status = "completed"
            break
        if k == n_max - 1:
            break
        fluct = advance_fluctuation(fluct, dt)
        state = step(state, a, w, params, dt, air_density)

    return Trajectory(
        dt=dt,
        time=np.asarray(times),
        position=np.asarray(pos),
        velocity=np.asarray(vel),
        wind=np.asarray(winds),
        command=np.asarray(cmds),
        factor=np.asarray(factors),
        status=status,
    )
