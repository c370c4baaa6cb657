"""Recorded-data ingestion: depth PNG sequences, trajectories, manifests.

Trajectories use the 8-column text interchange format
``timestamp tx ty tz qx qy qz qw`` (one pose per line, '#' comments), where
the quaternion rotates camera axes into the world frame. Depth images are
16-bit single-channel PNGs scaled by an integer number of units per meter
(default 5000). A sequence manifest is a text file binding timestamps to
image paths plus the shared scale and intrinsics.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .likelihood import DepthImage
from .particle_filter import OdometryDelta, delta_between
from .projection import CameraIntrinsics, Pose
from .sim import Trajectory

DEFAULT_DEPTH_SCALE = 5000


def quaternion_to_matrix(qx: float, qy: float, qz: float, qw: float) -> np.ndarray:
    """Rotation matrix of a unit quaternion (x, y, z, w ordering)."""
    n = math.sqrt(qx * qx + qy * qy + qz * qz + qw * qw)
    if n == 0:
        raise ValueError("zero quaternion")
    qx, qy, qz, qw = qx / n, qy / n, qz / n, qw / n
    return np.array(
        [
            [1 - 2 * (qy * qy + qz * qz), 2 * (qx * qy - qz * qw), 2 * (qx * qz + qy * qw)],
            [2 * (qx * qy + qz * qw), 1 - 2 * (qx * qx + qz * qz), 2 * (qy * qz - qx * qw)],
            [2 * (qx * qz - qy * qw), 2 * (qy * qz + qx * qw), 1 - 2 * (qx * qx + qy * qy)],
        ]
    )


def matrix_to_quaternion(rot: np.ndarray) -> tuple[float, float, float, float]:
    """Unit quaternion (x, y, z, w) of a rotation matrix, w >= 0."""
    tr = rot[0, 0] + rot[1, 1] + rot[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2.0
        qw = 0.25 * s
        qx = (rot[2, 1] - rot[1, 2]) / s
        qy = (rot[0, 2] - rot[2, 0]) / s
        qz = (rot[1, 0] - rot[0, 1]) / s
    elif rot[0, 0] > rot[1, 1] and rot[0, 0] > rot[2, 2]:
        s = math.sqrt(1.0 + rot[0, 0] - rot[1, 1] - rot[2, 2]) * 2.0
        qw = (rot[2, 1] - rot[1, 2]) / s
        qx = 0.25 * s
        qy = (rot[0, 1] + rot[1, 0]) / s
        qz = (rot[0, 2] + rot[2, 0]) / s
    elif rot[1, 1] > rot[2, 2]:
        s = math.sqrt(1.0 + rot[1, 1] - rot[0, 0] - rot[2, 2]) * 2.0
        qw = (rot[0, 2] - rot[2, 0]) / s
        qx = (rot[0, 1] + rot[1, 0]) / s
        qy = 0.25 * s
        qz = (rot[1, 2] + rot[2, 1]) / s
    else:
        s = math.sqrt(1.0 + rot[2, 2] - rot[0, 0] - rot[1, 1]) * 2.0
        qw = (rot[1, 0] - rot[0, 1]) / s
        qx = (rot[0, 2] + rot[2, 0]) / s
        qy = (rot[1, 2] + rot[2, 1]) / s
        qz = 0.25 * s
    if qw < 0:
        qx, qy, qz, qw = -qx, -qy, -qz, -qw
    return qx, qy, qz, qw


def read_trajectory(path) -> Trajectory:
    """Parse an 8-column trajectory file; malformed lines name their number."""
    stamps = []
    poses = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            parts = text.split()
            if len(parts) != 8:
                raise ValueError(
                    f"{path}:{lineno}: expected 8 columns "
                    f"(timestamp tx ty tz qx qy qz qw), got {len(parts)}"
                )
            try:
                vals = [float(v) for v in parts]
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: non-numeric field") from exc
            stamps.append(vals[0])
            rot = quaternion_to_matrix(*vals[4:8])
            poses.append(Pose.from_matrix(rot, vals[1:4]))
    return Trajectory(timestamps=np.asarray(stamps), poses=tuple(poses))


def write_trajectory(traj: Trajectory, path) -> None:
    """Write 8-column trajectory text at 9 significant digits."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# timestamp tx ty tz qx qy qz qw\n")
        for t, pose in zip(traj.timestamps, traj.poses):
            qx, qy, qz, qw = matrix_to_quaternion(pose.rotation_cam_to_world())
            p = pose.position
            fh.write(
                f"{t:.9g} {p[0]:.9g} {p[1]:.9g} {p[2]:.9g} "
                f"{qx:.9g} {qy:.9g} {qz:.9g} {qw:.9g}\n"
            )


def deltas_from_trajectory(traj: Trajectory) -> list[OdometryDelta]:
    """Exact frame-relative deltas between consecutive trajectory poses."""
    if len(traj) < 2:
        raise ValueError("need at least 2 poses to form odometry deltas")
    return [delta_between(a, b) for a, b in zip(traj.poses[:-1], traj.poses[1:])]


def read_depth_image(path, scale: float, intrinsics: CameraIntrinsics) -> DepthImage:
    """Load a 16-bit single-channel PNG as metric depth (raw / scale).

    Raw zeros stay zero (invalid). Rejects non-16-bit inputs and images whose
    dimensions disagree with the intrinsics.
    """
    if scale <= 0:
        raise ValueError("depth scale must be positive")
    with Image.open(path) as img:
        if img.mode not in ("I;16", "I;16B", "I"):
            raise ValueError(f"{path}: expected 16-bit grayscale, got mode {img.mode!r}")
        raw = np.asarray(img, dtype=np.int64)
    if raw.ndim != 2:
        raise ValueError(f"{path}: expected a single-channel image")
    if raw.shape != (intrinsics.height, intrinsics.width):
        raise ValueError(
            f"{path}: image is {raw.shape[1]}x{raw.shape[0]}, intrinsics say "
            f"{intrinsics.width}x{intrinsics.height}"
        )
    if raw.min() < 0 or raw.max() > 0xFFFF:
        raise ValueError(f"{path}: sample values outside the 16-bit range")
    return DepthImage(depths=raw.astype(float) / float(scale), intrinsics=intrinsics)


def write_depth_image(image: DepthImage, path, scale: float) -> None:
    """Store metric depth as a 16-bit PNG (invalid pixels as raw 0)."""
    depths = np.where(np.isfinite(image.depths), image.depths, 0.0)
    raw = np.clip(np.rint(depths * float(scale)), 0, 0xFFFF).astype(np.uint16)
    Image.fromarray(raw).save(path, format="PNG")


@dataclass(frozen=True)
class SequenceManifest:
    """Depth sequence description: timestamped image paths plus shared
    depth scale, intrinsics, and an optional ground-truth trajectory path.

    Relative paths resolve against the manifest's directory.
    """

    entries: tuple
    scale: int
    intrinsics: CameraIntrinsics
    ground_truth: str | None = None
    base_dir: str = "."

    def __post_init__(self):
        entries = tuple((float(t), str(p)) for t, p in self.entries)
        times = [t for t, _ in entries]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("manifest timestamps must be strictly increasing")
        if self.scale <= 0:
            raise ValueError("depth scale must be positive")
        object.__setattr__(self, "entries", entries)

    def __len__(self) -> int:
        return len(self.entries)

    def resolve(self, rel: str) -> str:
        return os.path.join(self.base_dir, rel)

    def ground_truth_path(self) -> str | None:
        return self.resolve(self.ground_truth) if self.ground_truth else None

    def read_image(self, index: int) -> DepthImage:
        return read_depth_image(self.resolve(self.entries[index][1]), self.scale, self.intrinsics)


def read_manifest(path) -> SequenceManifest:
    """Parse a manifest: '# scale:', '# intrinsics:', optional
    '# ground_truth:' headers, then 'timestamp relative/path.png' lines."""
    scale = DEFAULT_DEPTH_SCALE
    intrinsics = None
    ground_truth = None
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            if stripped.startswith("#"):
                body = stripped[1:].strip()
                if body.startswith("scale:"):
                    scale = int(body.split(":", 1)[1])
                elif body.startswith("intrinsics:"):
                    vals = body.split(":", 1)[1].split()
                    if len(vals) != 5:
                        raise ValueError(
                            f"{path}:{lineno}: intrinsics need 'f cx cy width height'"
                        )
                    intrinsics = CameraIntrinsics(
                        f=float(vals[0]),
                        cx=float(vals[1]),
                        cy=float(vals[2]),
                        width=int(vals[3]),
                        height=int(vals[4]),
                    )
                elif body.startswith("ground_truth:"):
                    ground_truth = body.split(":", 1)[1].strip()
                continue
            parts = stripped.split(None, 1)
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'timestamp path'")
            try:
                stamp = float(parts[0])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: bad timestamp {parts[0]!r}") from exc
            entries.append((stamp, parts[1]))
    if intrinsics is None:
        raise ValueError(f"{path}: manifest lacks an '# intrinsics:' header")
    if not entries:
        pass  # zero-length sequences are legal
    return SequenceManifest(
        entries=tuple(entries),
        scale=scale,
        intrinsics=intrinsics,
        ground_truth=ground_truth,
        base_dir=os.path.dirname(os.path.abspath(path)),
    )


def write_manifest(manifest: SequenceManifest, path) -> None:
    intr = manifest.intrinsics
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# scale: {manifest.scale}\n")
        fh.write(
            f"# intrinsics: {intr.f:.9g} {intr.cx:.9g} {intr.cy:.9g} "
            f"{intr.width} {intr.height}\n"
        )
        if manifest.ground_truth:
            fh.write(f"# ground_truth: {manifest.ground_truth}\n")
        for t, rel in manifest.entries:
            fh.write(f"{t:.9g} {rel}\n")
