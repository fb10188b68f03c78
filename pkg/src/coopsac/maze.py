"""Multi-room continuous maze with a unicycle robot and a planar range scan.

Rooms tile left to right. Every dividing wall has two gaps: a true door
into the next room and a dead-end gap opening onto a walled corridor that
protrudes into the next room's footprint but connects to nothing. The
corridor counts as part of the room it opens from, so an agent that enters
it never hands over to the next agent. The last room's right edge is the
goal line.

Walls are zero-thickness segments; the robot is a point.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .envs import StepResult

COLLISION_MARGIN = 0.01


class MazeConfigError(ValueError):
    pass


class RobotState(NamedTuple):
    x: float
    y: float
    theta: float


@dataclass
class MazeSpec:
    n_rooms: int
    room_width: float = 10.0
    room_height: float = 10.0
    door_width: float = 1.5
    dead_end_depth: float = 4.0
    true_doors: list[float] = field(default_factory=list)      # lower y of each true door
    dead_end_doors: list[float] = field(default_factory=list)  # lower y of each dead-end gap
    start_region: list[float] = field(default_factory=list)    # x0, x1, y0, y1
    max_steps: int = 1000
    dt: float = 0.1
    v_max: float = 1.0
    omega_max: float = math.pi
    n_beams: int = 72
    max_range: float = 5.0

    @property
    def goal_x(self) -> float:
        return self.n_rooms * self.room_width

    @classmethod
    def generate(cls, n_rooms: int, room_width: float = 10.0, room_height: float | None = None,
                 door_width: float = 1.5, dead_end_depth: float | None = None,
                 door_margin: float = 0.5, door_separation: float = 1.0, **kw) -> "MazeSpec":
        """Place doors so the greedy (nearer) gap of every wall is the dead end.

        The dead-end gap sits on the line the robot approaches along (the
        start height for the first wall, the previous true door afterwards);
        the true door goes to the opposite side of the wall, so door sides
        alternate from room to room.
        """
        h = room_width if room_height is None else room_height
        depth = 0.4 * room_width if dead_end_depth is None else dead_end_depth
        approach = h / 2.0
        true_doors, dead_doors = [], []
        for _ in range(n_rooms - 1):
            if approach <= h / 2.0:
                t_lo = h - door_margin - door_width
                d_hi = min(approach + door_width / 2.0, t_lo - door_separation)
                d_lo = d_hi - door_width
            else:
                t_lo = door_margin
                d_lo = max(approach - door_width / 2.0, t_lo + door_width + door_separation)
            true_doors.append(round(t_lo, 9))
            dead_doors.append(round(d_lo, 9))
            approach = t_lo + door_width / 2.0
        start = [0.5, 1.5, door_margin, h - door_margin]
        spec = cls(n_rooms, room_width, h, door_width, depth, true_doors, dead_doors, start, **kw)
        spec.validate()
        return spec

    @classmethod
    def desk(cls, n_rooms: int = 2) -> "MazeSpec":
        """Small maze used for the per-commit and nightly checks."""
        return cls.generate(n_rooms, room_width=6.0, max_steps=300)

    def validate(self) -> None:
        if self.n_rooms < 1:
            raise MazeConfigError("need at least one room")
        if len(self.true_doors) != self.n_rooms - 1 or len(self.dead_end_doors) != self.n_rooms - 1:
            raise MazeConfigError("need one true door and one dead-end gap per dividing wall")
        w, h, dw = self.room_width, self.room_height, self.door_width
        if w <= 0 or h <= 0 or dw <= 0:
            raise MazeConfigError("dimensions must be positive")
        if not 0 < self.dead_end_depth < w:
            raise MazeConfigError("dead-end corridor must be shallower than a room")
        for k, (t, d) in enumerate(zip(self.true_doors, self.dead_end_doors), start=1):
            for lo in (t, d):
                if lo <= 0 or lo + dw >= h:
                    raise MazeConfigError(f"wall {k}: gap must lie strictly inside the wall")
            if not (t + dw < d or d + dw < t):
                raise MazeConfigError(f"wall {k}: gaps overlap or touch")
        if len(self.start_region) != 4:
            raise MazeConfigError("start_region must be [x0, x1, y0, y1]")
        x0, x1, y0, y1 = self.start_region
        if not (x1 > x0 and y1 > y0):
            raise MazeConfigError("degenerate start region")
        if not (0 < x0 and x1 < w and 0 < y0 and y1 < h):
            raise MazeConfigError("start region must lie inside the first room")
        if self.max_steps < 1 or self.n_beams < 1 or self.max_range <= 0 or self.dt <= 0:
            raise MazeConfigError("invalid kinematic or sensor setting")

    def corridors(self) -> list[tuple[float, float, float, float, int]]:
        """Dead-end corridors as (x0, x1, y0, y1, owning room)."""
        w, dw, L = self.room_width, self.door_width, self.dead_end_depth
        return [((k + 1) * w, (k + 1) * w + L, d, d + dw, k + 1)
                for k, d in enumerate(self.dead_end_doors)]

    def walls(self) -> np.ndarray:
        """All wall segments as rows (ax, ay, bx, by)."""
        w, h, dw = self.room_width, self.room_height, self.door_width
        X = self.goal_x
        ext = 5.0 * self.v_max * self.dt
        segs = [(0.0, 0.0, X + ext, 0.0), (0.0, h, X + ext, h), (0.0, 0.0, 0.0, h)]
        for k, (t, d) in enumerate(zip(self.true_doors, self.dead_end_doors), start=1):
            x = k * w
            y = 0.0
            for lo in sorted((t, d)):
                segs.append((x, y, x, lo))
                y = lo + dw
            segs.append((x, y, x, h))
        for x0, x1, y0, y1, _ in self.corridors():
            segs += [(x0, y0, x1, y0), (x0, y1, x1, y1), (x1, y0, x1, y1)]
        return np.array(segs, dtype=np.float64)

    def approach_points(self) -> list[tuple[float, float]]:
        """Where the robot meets each dividing wall's room: start centre, then true doors."""
        x0, x1, y0, y1 = self.start_region
        pts = [((x0 + x1) / 2.0, (y0 + y1) / 2.0)]
        for k, t in enumerate(self.true_doors[:-1], start=1):
            pts.append((k * self.room_width, t + self.door_width / 2.0))
        return pts

    def certify_deadlock(self) -> list[bool]:
        """Per wall: is the dead-end gap closer to the approach point than the true door?

        Every room shares the same reward slope in ``x``, so the closer gap
        is the one a greedy per-room agent reaches for.
        """
        out = []
        for k, (p, t, d) in enumerate(zip(self.approach_points(), self.true_doors,
                                          self.dead_end_doors), start=1):
            x = k * self.room_width
            half = self.door_width / 2.0
            dist_true = math.hypot(x - p[0], t + half - p[1])
            dist_dead = math.hypot(x - p[0], d + half - p[1])
            out.append(dist_dead < dist_true)
        return out

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MazeSpec":
        data = json.loads(text)
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise MazeConfigError(f"unknown maze keys: {sorted(unknown)}")
        spec = cls(**data)
        spec.validate()
        return spec


# -- geometry ---------------------------------------------------------------

def _cross(ax, ay, bx, by):
    return ax * by - ay * bx


def segment_hits(px: float, py: float, dx: float, dy: float, walls: np.ndarray) -> np.ndarray:
    """Parameter ``t`` along ``p + t d`` where it meets each wall (inf if it misses).

    Only ``t >= 0`` is reported; callers bound ``t`` from above themselves.
    """
    ax, ay = walls[:, 0], walls[:, 1]
    ex, ey = walls[:, 2] - ax, walls[:, 3] - ay
    denom = _cross(dx, dy, ex, ey)
    qx, qy = ax - px, ay - py
    with np.errstate(divide="ignore", invalid="ignore"):
        t = _cross(qx, qy, ex, ey) / denom
        u = _cross(qx, qy, dx, dy) / denom
    ok = (np.abs(denom) > 1e-15) & (t >= 0.0) & (u >= 0.0) & (u <= 1.0)
    return np.where(ok, t, np.inf)


def raycast_scan(state: RobotState, spec: MazeSpec, walls: np.ndarray | None = None) -> np.ndarray:
    """Distance to the nearest wall on ``n_beams`` bearings spaced evenly around the heading."""
    walls = spec.walls() if walls is None else walls
    angles = state.theta + 2.0 * np.pi * np.arange(spec.n_beams) / spec.n_beams
    dx, dy = np.cos(angles)[:, None], np.sin(angles)[:, None]
    ax, ay = walls[None, :, 0], walls[None, :, 1]
    ex, ey = walls[None, :, 2] - ax, walls[None, :, 3] - ay
    denom = dx * ey - dy * ex
    qx, qy = ax - state.x, ay - state.y
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (qx * ey - qy * ex) / denom
        u = (qx * dy - qy * dx) / denom
    ok = (np.abs(denom) > 1e-15) & (t >= 0.0) & (u >= 0.0) & (u <= 1.0)
    dist = np.where(ok, t, np.inf).min(axis=1)
    return np.minimum(dist, spec.max_range)


def subtask_index(state: RobotState, spec: MazeSpec) -> int:
    """1-based room containing the robot; a dead-end corridor belongs to the room it opens from."""
    for x0, x1, y0, y1, owner in spec.corridors():
        if x0 <= state.x <= x1 and y0 < state.y < y1:
            return owner
    room = int(math.floor(state.x / spec.room_width)) + 1
    return min(max(room, 1), spec.n_rooms)


def reward_vector(state: RobotState, spec: MazeSpec) -> np.ndarray:
    """Per-room rewards: finished rooms pay 1, rooms ahead pay 0, the current room pays its x-progress."""
    n = subtask_index(state, spec)
    r = np.zeros(spec.n_rooms)
    r[: n - 1] = 1.0
    left = (n - 1) * spec.room_width
    r[n - 1] = min(max((state.x - left) / spec.room_width, 0.0), 1.0)
    return r


def move(state: RobotState, v: float, omega: float, spec: MazeSpec,
         walls: np.ndarray | None = None) -> RobotState:
    """Unicycle step: turn first, then translate, stopping short of the first wall hit."""
    walls = spec.walls() if walls is None else walls
    theta = (state.theta + omega * spec.dt + math.pi) % (2.0 * math.pi) - math.pi
    dist = v * spec.dt
    if dist == 0.0:
        return RobotState(state.x, state.y, theta)
    dx, dy = dist * math.cos(theta), dist * math.sin(theta)
    t_hit = float(segment_hits(state.x, state.y, dx, dy, walls).min())
    if t_hit <= 1.0:
        travel = max(0.0, t_hit * abs(dist) - COLLISION_MARGIN) / abs(dist)
        dx, dy = dx * travel, dy * travel
    return RobotState(state.x + dx, state.y + dy, theta)


class MazeEnv:
    """Gym-style wrapper: normalised actions in, observation and reward vector out."""

    act_dim = 2

    def __init__(self, spec: MazeSpec, seed: int | None = None):
        spec.validate()
        self.spec = spec
        self.walls = spec.walls()
        self.obs_dim = spec.n_beams + 4
        self.n_subtasks = spec.n_rooms
        self.max_steps = spec.max_steps
        self.rng = np.random.default_rng(seed)
        self.state = RobotState(0.0, 0.0, 0.0)
        self.t = 0

    def observe(self, state: RobotState | None = None) -> np.ndarray:
        s = self.state if state is None else state
        spec = self.spec
        scan = raycast_scan(s, spec, self.walls) / spec.max_range
        pos = [2.0 * s.x / spec.goal_x - 1.0, 2.0 * s.y / spec.room_height - 1.0,
               math.sin(s.theta), math.cos(s.theta)]
        return np.clip(np.concatenate([scan, pos]), -1.0, 1.0)

    def reset(self, seed: int | None = None) -> tuple[np.ndarray, int]:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        x0, x1, y0, y1 = self.spec.start_region
        x, y = self.rng.uniform(x0, x1), self.rng.uniform(y0, y1)
        self.state = RobotState(float(x), float(y), float(self.rng.uniform(-math.pi, math.pi)))
        self.t = 0
        return self.observe(), subtask_index(self.state, self.spec)

    def step(self, action: np.ndarray) -> StepResult:
        a = np.asarray(action, dtype=np.float64).reshape(-1)
        if a.shape != (2,) or not np.all(np.isfinite(a)):
            raise ValueError(f"action must be two finite numbers, got {action!r}")
        a = np.clip(a, -1.0, 1.0)
        spec = self.spec
        self.state = move(self.state, a[0] * spec.v_max, a[1] * spec.omega_max, spec, self.walls)
        self.t += 1
        success = self.state.x >= spec.goal_x
        done = success or self.t >= spec.max_steps
        return StepResult(self.observe(), reward_vector(self.state, spec), done, success,
                          subtask_index(self.state, spec))
