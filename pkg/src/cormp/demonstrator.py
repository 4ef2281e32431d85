"""Scripted expert that demonstrates the three-phase corridor push.

Phases:

* ``pre``  -- descend behind the object and push it to the staging line.
* ``cor``  -- align the object with the corridor: push it in +x, or reach
  over it and drag it in -x.  Inside the dead band the same motion only
  touches the face.  Every variant ends hovering behind the object.
* ``post`` -- descend behind the object and push it through the corridor.

Each phase is a waypoint path resampled to ``n_points`` samples, with equal
time per segment and a minimum-jerk profile inside each segment.  Every
correction path has six segments, so the contact window of push and pull
falls at the same normalised time whatever the shift.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import sim
from .errors import SimulationError
from .trajectory import Trajectory

log = logging.getLogger(__name__)

KINDS = ("push", "no_correction", "pull")
N_POINTS = 200
APPROACH = 0.01  # gripper stand-off from a face before contact, metres


@dataclass(frozen=True)
class Demonstration:
    pre: Trajectory
    cor: Trajectory
    post: Trajectory
    context_corridor: float
    context_object: float
    images: tuple  # (after pre, after cor) uint8 arrays
    correction_kind: str
    scene: sim.SceneState

    @property
    def full(self):
        """Concatenated phases on one uniform [0, 1] time span."""
        values = np.vstack([self.pre.values, self.cor.values, self.post.values])
        return Trajectory(np.linspace(0.0, 1.0, values.shape[0]), values, "full")


def min_jerk_path(waypoints, n_points=N_POINTS):
    """Sample a polyline at ``n_points``: equal time per segment, each segment
    following a minimum-jerk profile (rest at every waypoint).

    Repeated waypoints therefore become dwells of one segment duration.
    """
    wp = np.asarray(waypoints, dtype=np.float64)
    n_seg = wp.shape[0] - 1
    if n_seg < 1:
        return np.repeat(wp[:1], n_points, axis=0)
    u = np.linspace(0.0, 1.0, n_points) * n_seg
    k = np.minimum(u.astype(int), n_seg - 1)
    s = u - k
    blend = (10 * s ** 3 - 15 * s ** 4 + 6 * s ** 5)[:, None]
    return wp[k] + blend * (wp[k + 1] - wp[k])


def correction_kind(required_shift, dead_band):
    if required_shift > dead_band:
        return "push"
    if required_shift < -dead_band:
        return "pull"
    return "no_correction"


def pre_waypoints(config=sim.WorldConfig()):
    x0, _ = config.object_start
    h = config.object_half
    back = config.object_start[1] - h - 2 * APPROACH
    return [config.gripper_start, (x0, back, config.push_z),
            (x0, config.staging_y - 2 * h, config.push_z)]


def cor_waypoints(state, config=sim.WorldConfig()):
    """Correction path from ``state`` and its kind.

    Push works on the -x face, pull reaches over the object to the +x face.
    Inside the dead band the gripper still visits the face on the side of
    the misalignment but only touches it, so all kinds share one motion
    shape and differ only in the drag length.
    """
    gx, gy, _ = state.gripper
    ox, oy = state.object_center
    h, pz, hz = config.object_half, config.push_z, config.hover_z
    shift = state.corridor_offset - (ox - config.object_start[0])
    kind = correction_kind(shift, config.dead_band)
    side = -1.0 if shift >= 0.0 else 1.0
    move = 0.0 if kind == "no_correction" else shift
    x_face = ox + side * h
    path = [state.gripper, (gx, gy, hz),
            (x_face + side * APPROACH, oy, hz), (x_face + side * APPROACH, oy, pz),
            (x_face + move, oy, pz), (x_face + move, oy, hz),
            (ox + move, oy - h - APPROACH, hz)]
    return path, kind


def post_waypoints(state, config=sim.WorldConfig()):
    gx, gy, gz = state.gripper
    goal = config.goal_y - config.object_half
    return [state.gripper, (gx, gy, config.push_z), (gx, goal, config.push_z),
            (gx, goal, config.hover_z)]


def quantize(image):
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def _phase(points, phase):
    return Trajectory(np.linspace(0.0, 1.0, points.shape[0]), points, phase)


def demonstrate(scene, config=sim.WorldConfig(), n_points=N_POINTS):
    """Run the scripted expert on ``scene`` and record a :class:`Demonstration`."""
    pre = min_jerk_path(pre_waypoints(config), n_points)
    state = sim.execute(scene, pre, config)
    image_pre = quantize(sim.render(state, config))
    path, kind = cor_waypoints(state, config)
    cor = min_jerk_path(path, n_points)
    x_before = state.object_center[0]
    state = sim.execute(state, cor, config)
    image_cor = quantize(sim.render(state, config))
    object_x = state.object_center[0]
    post = min_jerk_path(post_waypoints(state, config), n_points)
    state = sim.execute(state, post, config)
    if state.contact_with_corridor or not sim.check_success(state, config):
        raise SimulationError(
            f"scripted demonstration failed for corridor offset {scene.corridor_offset:+.4f}")
    if correction_kind(object_x - x_before, config.dead_band) != kind:
        raise SimulationError(f"demonstrated displacement disagrees with {kind}")
    return Demonstration(_phase(pre, "pre"), _phase(cor, "cor"), _phase(post, "post"),
                         float(scene.corridor_offset), float(object_x),
                         (image_pre, image_cor), kind, scene)


def collect(n, rng, config=sim.WorldConfig(), n_points=N_POINTS, max_failures=10):
    """Sample ``n`` scenes and demonstrate each, resampling rejected scenes."""
    demos, failures = [], 0
    while len(demos) < n:
        scene = sim.sample_scene(rng, config)
        try:
            demos.append(demonstrate(scene, config, n_points))
            failures = 0
        except SimulationError as exc:
            failures += 1
            log.warning("rejected demonstration: %s", exc)
            if failures >= max_failures:
                raise
    return demos


def build_test_scenes(rng, exclude_offsets=(), config=sim.WorldConfig(),
                      counts=(("push", 9), ("no_correction", 6), ("pull", 10)),
                      min_separation=1e-4):
    """Stratified unseen scenes: offsets at least ``min_separation`` from every
    excluded (training) offset and from each other."""
    tau, lim = config.dead_band, config.max_offset
    bounds = {"push": (tau, lim), "no_correction": (-tau, tau), "pull": (-lim, -tau)}
    taken = list(exclude_offsets)
    scenes = []
    for kind, count in counts:
        lo, hi = bounds[kind]
        chosen = 0
        for _ in range(100000):
            offset = float(rng.uniform(lo, hi))
            if correction_kind(offset, tau) != kind:
                continue
            if taken and np.min(np.abs(np.asarray(taken) - offset)) < min_separation:
                continue
            taken.append(offset)
            scenes.append(sim.initial_state(offset, config))
            chosen += 1
            if chosen == count:
                break
        else:
            raise SimulationError(f"could not place {count} unseen {kind} scenes")
    return scenes
