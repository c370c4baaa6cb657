"""Pinhole camera geometry: pose transforms, point/Gaussian projection, back-projection.

Conventions used throughout the package:

* World frame: right-handed, z up. Camera frame: x right, y down, z along
  the optical axis (standard computer-vision axes).
* A ``Pose`` stores the camera origin in world coordinates plus yaw, pitch
  and roll. The camera orientation in the world is the Euler composition
  ``Rz(yaw) @ Ry(pitch) @ Rx(roll)``, so yaw is a heading angle about the
  world vertical axis. The world-to-camera rotation is its transpose.
* Pitch and roll are treated as externally supplied attitude values; only
  position and yaw are estimated by the filter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .gmm_map import GmmComponent

# Components whose camera-frame depth falls below this are treated as behind
# the camera: the projection Jacobian degenerates as 1/z^2 and depth sensors
# have a comparable minimum range.
NEAR_PLANE = 0.1


class BehindCameraError(ValueError):
    """A point or component lies at or behind the camera's near plane."""


def wrap_angle(angle):
    """Wrap an angle (scalar or array) to the interval (-pi, pi]."""
    return np.pi - np.remainder(np.pi - np.asarray(angle), 2.0 * np.pi)


def rotation_zyx(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """Rotation matrix Rz(yaw) @ Ry(pitch) @ Rx(roll)."""
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cr, sr = math.cos(roll), math.sin(roll)
    return np.array(
        [
            [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
            [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
            [-sp, cp * sr, cp * cr],
        ]
    )


def euler_from_rotation(rot: np.ndarray) -> tuple[float, float, float]:
    """Recover (yaw, pitch, roll) from a Z-Y-X composed rotation matrix.

    At the pitch = +-pi/2 singularity only yaw +- roll is observable; roll is
    reported as 0 and the full angle folded into yaw, which reproduces the
    input matrix exactly.
    """
    sp = -rot[2, 0]
    sp = min(1.0, max(-1.0, float(sp)))
    pitch = math.asin(sp)
    if abs(sp) > 1.0 - 1e-12:
        yaw = math.atan2(-rot[0, 1], rot[1, 1])
        roll = 0.0
    else:
        yaw = math.atan2(rot[1, 0], rot[0, 0])
        roll = math.atan2(rot[2, 1], rot[2, 2])
    return yaw, pitch, roll


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics: focal length and principal point in pixels."""

    f: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.f <= 0:
            raise ValueError(f"focal length must be positive, got {self.f}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be positive")


@dataclass(frozen=True)
class Pose:
    """Camera pose: world-frame position plus Z-Y-X Euler attitude (radians).

    ``position`` is the camera origin expressed in world coordinates. Yaw is
    wrapped to (-pi, pi] at construction.
    """

    position: np.ndarray
    yaw: float
    pitch: float = 0.0
    roll: float = 0.0

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=float)
        if pos.shape != (3,):
            raise ValueError(f"position must be a 3-vector, got shape {pos.shape}")
        if not np.all(np.isfinite(pos)):
            raise ValueError("position must be finite")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "yaw", float(wrap_angle(self.yaw)))
        object.__setattr__(self, "pitch", float(self.pitch))
        object.__setattr__(self, "roll", float(self.roll))

    def rotation_cam_to_world(self) -> np.ndarray:
        """Orientation of the camera axes expressed in the world frame."""
        return rotation_zyx(self.yaw, self.pitch, self.roll)

    def rotation_world_to_cam(self) -> np.ndarray:
        return self.rotation_cam_to_world().T

    def translation_world_to_cam(self) -> np.ndarray:
        """t such that p_cam = R_world_to_cam @ p_world + t."""
        return -self.rotation_world_to_cam() @ self.position

    def transform_to_cam(self, points: np.ndarray) -> np.ndarray:
        """Map world points (..., 3) into the camera frame."""
        rot = self.rotation_world_to_cam()
        return (np.asarray(points, dtype=float) - self.position) @ rot.T

    @classmethod
    def from_matrix(cls, rot_cam_to_world: np.ndarray, position: np.ndarray) -> "Pose":
        yaw, pitch, roll = euler_from_rotation(np.asarray(rot_cam_to_world, dtype=float))
        return cls(position=np.asarray(position, dtype=float), yaw=yaw, pitch=pitch, roll=roll)


@dataclass(frozen=True)
class Gaussian2D:
    """Image-space Gaussian: pixel mean and 2x2 pixel^2 covariance."""

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        cov = np.asarray(self.covariance, dtype=float)
        if mean.shape != (2,) or cov.shape != (2, 2):
            raise ValueError("Gaussian2D needs a 2-vector mean and 2x2 covariance")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)


def to_camera_frame(pose: Pose, component: GmmComponent) -> GmmComponent:
    """Rigidly transform a map component into the camera frame of ``pose``.

    The mean maps as a point and the covariance by rotation similarity;
    the mixture weight is unchanged.
    """
    rot = pose.rotation_world_to_cam()
    mean = rot @ (component.mean - pose.position)
    cov = rot @ component.covariance @ rot.T
    return GmmComponent(weight=component.weight, mean=mean, covariance=cov)


def project_point(intrinsics: CameraIntrinsics, p: np.ndarray) -> np.ndarray:
    """Project a camera-frame point to pixel coordinates.

    The result may fall outside the image bounds; callers filter. Raises
    :class:`BehindCameraError` for non-positive depth.
    """
    p = np.asarray(p, dtype=float)
    if p[2] <= 0:
        raise BehindCameraError(f"point depth {p[2]} is not positive")
    return np.array(
        [intrinsics.cx + intrinsics.f * p[0] / p[2], intrinsics.cy + intrinsics.f * p[1] / p[2]]
    )


def projection_jacobian(intrinsics: CameraIntrinsics, p: np.ndarray) -> np.ndarray:
    """2x3 derivative of the pinhole projection at camera-frame point ``p``."""
    p = np.asarray(p, dtype=float)
    if p[2] <= 0:
        raise BehindCameraError(f"point depth {p[2]} is not positive")
    f = intrinsics.f
    z = p[2]
    return np.array(
        [
            [f / z, 0.0, -f * p[0] / (z * z)],
            [0.0, f / z, -f * p[1] / (z * z)],
        ]
    )


def project_component(
    intrinsics: CameraIntrinsics, pose: Pose, component: GmmComponent
) -> Gaussian2D:
    """Project a 3D map component into image space as a 2D Gaussian.

    The camera-frame covariance is pushed through the projection's first
    order linearization evaluated at the transformed mean. Raises
    :class:`BehindCameraError` when the transformed mean lies closer than
    the near plane; such components are excluded from image-space reasoning.
    """
    cam = to_camera_frame(pose, component)
    if cam.mean[2] < NEAR_PLANE:
        raise BehindCameraError(
            f"component mean depth {cam.mean[2]:.4f} m is inside the near plane"
        )
    mean2d = project_point(intrinsics, cam.mean)
    jac = projection_jacobian(intrinsics, cam.mean)
    cov2d = jac @ cam.covariance @ jac.T
    return Gaussian2D(mean=mean2d, covariance=cov2d)


def back_project(intrinsics: CameraIntrinsics, u: float, v: float, depth: float) -> np.ndarray:
    """Lift pixel (u, v) with metric z-depth back to a camera-frame 3D point."""
    if depth <= 0:
        raise ValueError(f"depth must be positive, got {depth}")
    return np.array(
        [
            (u - intrinsics.cx) * depth / intrinsics.f,
            (v - intrinsics.cy) * depth / intrinsics.f,
            depth,
        ]
    )
