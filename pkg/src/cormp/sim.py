"""Quasi-static tabletop pushing world with a perturbed corridor.

A point gripper pushes an axis-aligned square object.  The object only moves
while the gripper is at or below ``z_contact`` and moves into one of its
faces; the object then translates along that face normal so the face stays
under the gripper (sticking contact, no rotation).  Corridor walls stop the
object, and any object-wall contact latches ``contact_with_corridor``.

Coordinates are metres.  ``y`` points from the start area through the
corridor, ``x`` is the axis along which the corridor is offset.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import ContractViolation

_TOL = 1e-9


@dataclass(frozen=True)
class WorldConfig:
    table_size: float = 0.60
    object_half: float = 0.02
    gap_width: float = 0.08
    wall_length: float = 0.12
    wall_thickness: float = 0.02
    corridor_entrance_y: float = 0.05
    staging_clearance: float = 0.06
    goal_past_midpoint: float = 0.05
    z_contact: float = 0.02
    push_z: float = 0.01
    hover_z: float = 0.05
    dead_band: float = 0.005
    max_offset: float = 0.03
    max_step: float = 0.005
    object_start: tuple = (0.0, -0.20)
    gripper_start: tuple = (0.0, -0.26, 0.05)
    image_size: int = 64

    def __post_init__(self):
        if self.gap_width <= 2 * self.object_half:
            raise ValueError("corridor gap must be wider than the object")

    @property
    def midpoint_y(self):
        return self.corridor_entrance_y + 0.5 * self.wall_length

    @property
    def staging_y(self):
        """Line the object's leading face reaches at the end of the first push."""
        return self.corridor_entrance_y - self.staging_clearance

    @property
    def goal_y(self):
        return self.midpoint_y + self.goal_past_midpoint

    def walls(self, offset):
        """Wall rectangles ``(x0, x1, y0, y1)`` for a corridor offset."""
        y0, y1 = self.corridor_entrance_y, self.corridor_entrance_y + self.wall_length
        inner = 0.5 * self.gap_width
        return [(offset - inner - self.wall_thickness, offset - inner, y0, y1),
                (offset + inner, offset + inner + self.wall_thickness, y0, y1)]

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        for key in ("object_start", "gripper_start"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


@dataclass(frozen=True)
class SceneState:
    gripper: tuple
    object_center: tuple
    corridor_offset: float
    contact_with_corridor: bool = False

    @property
    def gripper_array(self):
        return np.array(self.gripper)


@dataclass
class EpisodeLog:
    """Per-step records ``(step, gripper xyz, object xy, contact flag)``."""

    rows: list = field(default_factory=list)

    def record(self, state):
        self.rows.append((len(self.rows),) + tuple(state.gripper) + tuple(state.object_center)
                         + (int(state.contact_with_corridor),))

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "gripper_x", "gripper_y", "gripper_z", "object_x",
                             "object_y", "contact_with_corridor"])
            for row in self.rows:
                writer.writerow([row[0]] + [repr(float(v)) for v in row[1:6]] + [row[6]])


def initial_state(corridor_offset, config=WorldConfig()):
    return SceneState(tuple(float(v) for v in config.gripper_start),
                      tuple(float(v) for v in config.object_start), float(corridor_offset))


def sample_scene(rng, config=WorldConfig()):
    return initial_state(rng.uniform(-config.max_offset, config.max_offset), config)


def _entry_face(p0, p1, box):
    """Axis and side through which the segment p0->p1 entered ``box``.

    Returns ``(axis, sign)`` where ``sign`` is the direction the object must
    move, or None when p0 already lies inside (no face is crossed).
    """
    x0, x1, y0, y1 = box
    inside0 = (x0 + _TOL < p0[0] < x1 - _TOL) and (y0 + _TOL < p0[1] < y1 - _TOL)
    if not inside0:
        best = None
        for axis, (lo, hi) in enumerate(((x0, x1), (y0, y1))):
            d = p1[axis] - p0[axis]
            if d == 0.0:
                continue
            t_near = ((lo if d > 0 else hi) - p0[axis]) / d
            if best is None or t_near > best[0]:
                best = (t_near, axis, 1.0 if d > 0 else -1.0)
        if best is not None:
            return best[1], best[2]
    return None


def _limit_by_walls(center, half, axis, delta, walls):
    """Clip a single-axis translation so the object stops at the first wall."""
    other = 1 - axis
    blocked = False
    for wall in walls:
        lo_w, hi_w = wall[2 * axis], wall[2 * axis + 1]
        lo_o, hi_o = wall[2 * other], wall[2 * other + 1]
        if not (center[other] - half < hi_o and center[other] + half > lo_o):
            continue
        if delta > 0 and center[axis] + half <= lo_w + _TOL:
            room = lo_w - (center[axis] + half)
            if delta >= room:
                delta, blocked = max(room, 0.0), True
        elif delta < 0 and center[axis] - half >= hi_w - _TOL:
            room = (center[axis] - half) - hi_w
            if -delta >= room:
                delta, blocked = -max(room, 0.0), True
    return delta, blocked


def _touches(center, half, wall):
    return (center[0] - half <= wall[1] + _TOL and center[0] + half >= wall[0] - _TOL
            and center[1] - half <= wall[3] + _TOL and center[1] + half >= wall[2] - _TOL)


def step(state, gripper_target, config=WorldConfig()):
    """Move the gripper to ``gripper_target`` (at most ``max_step`` away)."""
    p0 = state.gripper
    p1 = tuple(float(v) for v in gripper_target)
    if not all(math.isfinite(v) for v in p1):
        raise ContractViolation(f"non-finite gripper target {p1}")
    if math.dist(p0, p1) > config.max_step + _TOL:
        raise ContractViolation(
            f"gripper step of {math.dist(p0, p1) * 1000:.2f} mm exceeds "
            f"{config.max_step * 1000:.1f} mm")
    center = state.object_center
    contact = state.contact_with_corridor
    h = config.object_half
    box = (center[0] - h, center[0] + h, center[1] - h, center[1] + h)
    entry = None
    if p1[2] <= config.z_contact and box[0] < p1[0] < box[1] and box[2] < p1[1] < box[3]:
        entry = _entry_face(p0, p1, box)
    if entry is not None:
        axis, sign = entry
        face = center[axis] - sign * h
        delta = p1[axis] - face
        walls = config.walls(state.corridor_offset)
        delta, blocked = _limit_by_walls(center, h, axis, delta, walls)
        moved = list(center)
        moved[axis] += delta
        center = tuple(moved)
        if blocked or any(_touches(center, h, w) for w in walls):
            contact = True
    return SceneState(p1, center, state.corridor_offset, contact)


def execute(state, waypoints, config=WorldConfig(), log=None):
    """Drive the gripper through ``waypoints``, subdividing long moves."""
    for target in np.asarray(waypoints, dtype=np.float64):
        if not np.all(np.isfinite(target)):
            raise ContractViolation(f"non-finite waypoint {target.tolist()}")
        p0 = np.array(state.gripper)
        n_sub = max(1, math.ceil(float(np.linalg.norm(target - p0)) / config.max_step))
        for i in range(1, n_sub + 1):
            state = step(state, p0 + (target - p0) * (i / n_sub), config)
            if log is not None:
                log.record(state)
    return state


def check_success(state, config=WorldConfig()):
    return state.object_center[1] > config.midpoint_y and not state.contact_with_corridor


def _coverage(lo, hi, edges):
    return np.clip(np.minimum(hi, edges[1:]) - np.maximum(lo, edges[:-1]), 0.0, None) / (
        edges[1] - edges[0])


def pixel_edges(config=WorldConfig()):
    """Column edges in x (left to right) and row edges in y (top to bottom)."""
    half = 0.5 * config.table_size
    xs = np.linspace(-half, half, config.image_size + 1)
    return xs, xs[::-1].copy()


def world_to_pixel(x, y, config=WorldConfig()):
    """Continuous ``(row, col)`` of a world point; pixel centres are at +0.5."""
    half = 0.5 * config.table_size
    scale = config.image_size / config.table_size
    return (half - y) * scale, (x + half) * scale


BACKGROUND, WALL, OBJECT = 0.05, 0.5, 1.0


def render(state, config=WorldConfig()):
    """Top-down orthographic grayscale image with area-weighted edges."""
    xs, ys = pixel_edges(config)
    ys_up = ys[::-1]
    img = np.full((config.image_size, config.image_size), BACKGROUND)

    def paint(x0, x1, y0, y1, value):
        cov = np.outer(_coverage(y0, y1, ys_up)[::-1], _coverage(x0, x1, xs))
        img[...] = img * (1.0 - cov) + value * cov

    for wall in config.walls(state.corridor_offset):
        paint(*wall, WALL)
    cx, cy = state.object_center
    h = config.object_half
    paint(cx - h, cx + h, cy - h, cy + h, OBJECT)
    return np.clip(img, 0.0, 1.0)


def with_offset(state, offset):
    return replace(state, corridor_offset=float(offset))
