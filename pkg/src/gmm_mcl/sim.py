"""Synthetic worlds and trajectories for closed-loop, ground-truth experiments.

Scenes are collections of axis-aligned boxes and finite axis-aligned
rectangles ("planes", encoded as boxes with zero extent along their normal).
Depth rendering casts a ray through every pixel center and records the
z-depth (camera-frame z, not ray length) of the nearest surface, matching
the back-projection convention used by the likelihood. Surface sampling of
the same primitives produces the point clouds that maps are fitted to.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .gmm_map import PointCloud
from .likelihood import DepthImage
from .particle_filter import OdometryDelta, delta_between
from .projection import NEAR_PLANE, CameraIntrinsics, Pose, wrap_angle

# Attitude of a level camera (optical axis horizontal, image rows horizontal)
# in the Z-Y-X Euler convention; the heading of the optical axis is then
# yaw + pi/2 in the world x-y plane.
LEVEL_PITCH = 0.0
LEVEL_ROLL = -0.5 * math.pi


def heading_to_yaw(heading: float) -> float:
    """Yaw that points a level camera's optical axis along ``heading``."""
    return wrap_angle(heading - 0.5 * math.pi)


@dataclass(frozen=True)
class Primitive:
    """Axis-aligned box or finite plane: center and full extents, meters.

    Boxes have all extents positive; planes have exactly one zero extent
    (the surface normal axis) and positive extents elsewhere.
    """

    kind: str
    center: np.ndarray
    extents: np.ndarray

    def __post_init__(self):
        center = np.asarray(self.center, dtype=float)
        extents = np.asarray(self.extents, dtype=float)
        if center.shape != (3,) or extents.shape != (3,):
            raise ValueError("primitive needs 3-vector center and extents")
        if self.kind == "box":
            if np.any(extents <= 0):
                raise ValueError("box extents must all be positive")
        elif self.kind == "plane":
            if np.count_nonzero(extents == 0) != 1 or np.any(extents < 0):
                raise ValueError("plane needs exactly one zero extent, others positive")
        else:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "extents", extents)

    @property
    def lo(self) -> np.ndarray:
        return self.center - 0.5 * self.extents

    @property
    def hi(self) -> np.ndarray:
        return self.center + 0.5 * self.extents


def box(center, extents) -> Primitive:
    return Primitive(kind="box", center=center, extents=extents)


def plane(center, extents) -> Primitive:
    return Primitive(kind="plane", center=center, extents=extents)


@dataclass(frozen=True)
class Scene:
    """A static world made of axis-aligned primitives."""

    primitives: tuple

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))
        if not self.primitives:
            pass  # empty scenes are legal; they render as all-invalid

    def bounds(self, margin: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
        if not self.primitives:
            z = np.zeros(3)
            return z - margin, z + margin
        lo = np.min([p.lo for p in self.primitives], axis=0) - margin
        hi = np.max([p.hi for p in self.primitives], axis=0) + margin
        return lo, hi


@dataclass(frozen=True)
class Trajectory:
    """Timestamped ground-truth poses at a fixed rate."""

    timestamps: np.ndarray
    poses: tuple

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=float)
        poses = tuple(self.poses)
        if ts.shape != (len(poses),):
            raise ValueError("timestamp count must match pose count")
        if len(ts) > 1 and not np.all(np.diff(ts) > 0):
            raise ValueError("timestamps must be strictly increasing")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "poses", poses)

    def __len__(self) -> int:
        return len(self.poses)

    def positions(self) -> np.ndarray:
        return np.array([p.position for p in self.poses]).reshape(len(self.poses), 3)


def _slab_interval(o: float, d: np.ndarray, lo: float, hi: float):
    """Per-pixel [t_enter, t_exit] for one axis slab; d is the direction array."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (lo - o) * inv
        t2 = (hi - o) * inv
    parallel = d == 0.0
    inside = lo <= o <= hi
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    if np.any(parallel):
        tmin = np.where(parallel, -np.inf if inside else np.inf, tmin)
        tmax = np.where(parallel, np.inf if inside else -np.inf, tmax)
    return tmin, tmax


def render_depth(
    scene: Scene,
    pose: Pose,
    intrinsics: CameraIntrinsics,
    max_range: float,
    noise_sigma: float = 0.0,
    seed=None,
) -> DepthImage:
    """Ray-cast a depth image of the scene from ``pose``.

    Each pixel records the z-depth of the nearest primitive hit between the
    near plane and ``max_range``; misses are 0 (invalid). Rays are
    parameterized so that the parameter equals z-depth directly. Optional
    additive Gaussian depth noise is off by default.
    """
    intr = intrinsics
    vs, us = np.mgrid[0 : intr.height, 0 : intr.width]
    dirs_cam = np.stack(
        [
            (us.ravel() - intr.cx) / intr.f,
            (vs.ravel() - intr.cy) / intr.f,
            np.ones(us.size),
        ],
        axis=1,
    )
    rot = pose.rotation_cam_to_world()
    dirs = dirs_cam @ rot.T
    origin = pose.position

    best = np.full(us.size, np.inf)
    for prim in scene.primitives:
        lo, hi = prim.lo, prim.hi
        t_enter = np.full(us.size, -np.inf)
        t_exit = np.full(us.size, np.inf)
        for axis in range(3):
            tmin, tmax = _slab_interval(origin[axis], dirs[:, axis], lo[axis], hi[axis])
            t_enter = np.maximum(t_enter, tmin)
            t_exit = np.minimum(t_exit, tmax)
        hit = t_enter <= t_exit
        t = np.where(t_enter >= NEAR_PLANE, t_enter, np.where(t_exit >= NEAR_PLANE, t_exit, np.inf))
        t = np.where(hit, t, np.inf)
        best = np.minimum(best, t)

    depths = np.where(np.isfinite(best) & (best <= max_range), best, 0.0)
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        valid = depths > 0
        depths = np.where(
            valid,
            np.maximum(depths + rng.normal(0.0, noise_sigma, depths.shape), NEAR_PLANE),
            0.0,
        )
    return DepthImage(depths=depths.reshape(intr.height, intr.width), intrinsics=intr)


def _faces(prim: Primitive):
    """(normal_axis, offset_sign, area) for each samplable face."""
    e = prim.extents
    if prim.kind == "plane":
        axis = int(np.nonzero(e == 0)[0][0])
        others = [a for a in range(3) if a != axis]
        return [(axis, 0.0, float(e[others[0]] * e[others[1]]))]
    faces = []
    for axis in range(3):
        others = [a for a in range(3) if a != axis]
        area = float(e[others[0]] * e[others[1]])
        faces.append((axis, -1.0, area))
        faces.append((axis, 1.0, area))
    return faces


def scene_to_cloud(scene: Scene, samples_per_m2: float, seed) -> PointCloud:
    """Sample primitive surfaces uniformly, proportional to area.

    Each face draws a Poisson count with mean area * samples_per_m2 and fills
    it with uniform points on the face.
    """
    rng = np.random.default_rng(seed)
    chunks = []
    for prim in scene.primitives:
        for axis, sign, area in _faces(prim):
            n = int(rng.poisson(area * samples_per_m2))
            if n == 0:
                continue
            pts = rng.uniform(prim.lo, prim.hi, size=(n, 3))
            pts[:, axis] = prim.center[axis] + sign * 0.5 * prim.extents[axis]
            chunks.append(pts)
    if not chunks:
        raise ValueError("scene produced no surface samples")
    return PointCloud(points=np.concatenate(chunks, axis=0))


# ---------------------------------------------------------------------------
# Trajectory generation
# ---------------------------------------------------------------------------


def _arc_walk(curve, steps: int, speed: float, rate: float) -> np.ndarray:
    """Walk a parametric curve at constant speed: positions (steps, 3).

    ``curve`` maps s in [0, 1] to points (k, 3). The walk advances
    speed / rate meters per step and stops at the end of the curve.
    """
    fine = curve(np.linspace(0.0, 1.0, max(20 * steps, 400)))
    seg = np.linalg.norm(np.diff(fine, axis=0), axis=1)
    cumlen = np.concatenate(([0.0], np.cumsum(seg)))
    total = cumlen[-1]
    dist = np.minimum(np.arange(steps) * speed / rate, total)
    out = np.empty((steps, 3))
    for axis in range(3):
        out[:, axis] = np.interp(dist, cumlen, fine[:, axis])
    return out


def generate_trajectory(kind: str, params: dict, rate: float) -> Trajectory:
    """Smooth ground-truth pose sequence with yaw following the velocity.

    Kinds and their params (all meters / seconds / radians):

    * ``orbit``: ``center`` (3,), ``radius``, ``speed``, ``steps``;
      counterclockwise circle in the x-y plane.
    * ``corridor``: ``start`` (3,), ``end`` (3,), ``speed``, ``steps``;
      straight segment, holding the endpoint once reached.
    * ``figure-eight``: ``center`` (3,), ``radius``, ``speed``, ``steps``;
      one arc-length-parameterized figure-eight loop.

    Optional ``pitch`` / ``roll`` fix the attitude (default: level camera);
    per-step translation never exceeds speed / rate.
    """
    steps = int(params["steps"])
    if steps < 1:
        raise ValueError("trajectory needs at least 1 step")
    speed = float(params.get("speed", 0.5))
    pitch = float(params.get("pitch", LEVEL_PITCH))
    roll = float(params.get("roll", LEVEL_ROLL))
    if kind == "orbit":
        center = np.asarray(params["center"], dtype=float)
        radius = float(params["radius"])
        phase = float(params.get("phase", 0.0))
        span = speed * steps / rate / radius  # total swept angle

        def curve(s):
            a = phase + s[:, None] * span
            return center + radius * np.concatenate(
                [np.cos(a), np.sin(a), np.zeros_like(a)], axis=1
            )

        positions = _arc_walk(curve, steps, speed, rate)
    elif kind == "corridor":
        start = np.asarray(params["start"], dtype=float)
        end = np.asarray(params["end"], dtype=float)

        def curve(s):
            return start + s[:, None] * (end - start)

        positions = _arc_walk(curve, steps, speed, rate)
    elif kind == "figure-eight":
        center = np.asarray(params["center"], dtype=float)
        radius = float(params["radius"])

        def curve(s):
            a = 2.0 * math.pi * s[:, None]
            return center + radius * np.concatenate(
                [np.sin(a), np.sin(a) * np.cos(a), np.zeros_like(a)], axis=1
            )

        positions = _arc_walk(curve, steps, speed, rate)
    else:
        raise ValueError(f"unknown trajectory kind {kind!r}")

    # Heading from forward differences; the final step reuses the last one.
    diffs = np.diff(positions, axis=0)
    moving = np.linalg.norm(diffs[:, :2], axis=1) > 1e-12
    headings = np.empty(steps)
    current = float(params.get("heading", 0.0))
    for k in range(steps - 1):
        if moving[k]:
            current = math.atan2(diffs[k, 1], diffs[k, 0])
        headings[k] = current
    headings[-1] = current
    poses = tuple(
        Pose(position=positions[k], yaw=heading_to_yaw(headings[k]), pitch=pitch, roll=roll)
        for k in range(steps)
    )
    return Trajectory(timestamps=np.arange(steps) / rate, poses=poses)


def odometry_from_trajectory(
    traj: Trajectory,
    noise_sigma_translation: float = 0.0,
    noise_sigma_yaw: float = 0.0,
    seed=None,
) -> list[OdometryDelta]:
    """Consecutive-pose deltas in the earlier frame plus additive noise.

    Pitch and roll are copied exactly from the ground truth (the attitude
    source is assumed accurate); only the translation and yaw components are
    perturbed.
    """
    rng = np.random.default_rng(seed)
    deltas = []
    for prev, nxt in zip(traj.poses[:-1], traj.poses[1:]):
        d = delta_between(prev, nxt)
        deltas.append(
            OdometryDelta(
                delta_translation=d.delta_translation
                + rng.normal(0.0, noise_sigma_translation, 3),
                delta_yaw=wrap_angle(d.delta_yaw + rng.normal(0.0, noise_sigma_yaw)),
                pitch=d.pitch,
                roll=d.roll,
            )
        )
    return deltas


# ---------------------------------------------------------------------------
# Scene file format: one primitive per line, '#' comments
# ---------------------------------------------------------------------------


def load_scene(path) -> Scene:
    """Read a plain-text scene: lines 'box|plane cx cy cz ex ey ez', meters."""
    prims = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            parts = text.split()
            if len(parts) != 7 or parts[0] not in ("box", "plane"):
                raise ValueError(
                    f"{path}:{lineno}: expected 'box|plane cx cy cz ex ey ez', got {text!r}"
                )
            try:
                vals = [float(v) for v in parts[1:]]
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: non-numeric field") from exc
            prims.append(Primitive(kind=parts[0], center=vals[:3], extents=vals[3:]))
    return Scene(primitives=prims)


def save_scene(scene: Scene, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in scene.primitives:
            c, e = p.center, p.extents
            fh.write(
                f"{p.kind} {c[0]:.9g} {c[1]:.9g} {c[2]:.9g} {e[0]:.9g} {e[1]:.9g} {e[2]:.9g}\n"
            )
