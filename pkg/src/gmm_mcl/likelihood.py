"""Scan likelihood under a Gaussian-mixture map with patch-restricted sums.

The log-likelihood of a depth scan is the sum over pixels of the log mixture
density at each back-projected point, with the mixture transformed into the
camera frame of the pose hypothesis. Evaluating all components at every
pixel is wasteful: only components whose projected footprint lands near a
pixel contribute meaningfully. The image is therefore divided into square
patches and each patch keeps a member list of components whose inflated
3-sigma projected ellipse contains the patch center; pixels sum only over
their patch's members.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _fast
from .gmm_map import GmmMap
from .projection import (
    NEAR_PLANE,
    CameraIntrinsics,
    Gaussian2D,
    Pose,
)

DEFAULT_PATCH_SIZE = 32
DEFAULT_STRIDE = 4

# Per-pixel floor on the log mixture density, applied to both the
# patch-restricted and the exhaustive evaluation. Pixels whose patch has no
# members contribute exactly this value, which keeps pose comparison
# meaningful when a hypothesis sees mostly off-map data, and applying the
# same floor to the exhaustive sum preserves the ordering
# approximate >= exhaustive for every scan.
OUTLIER_LOG_DENSITY = math.log(1e-9)

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class DepthImage:
    """Grid of metric z-depths (meters) plus the intrinsics that produced it.

    Depths of 0 or NaN mark invalid pixels. The grid is row-major with shape
    (height, width).
    """

    depths: np.ndarray
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        depths = np.asarray(self.depths, dtype=float)
        expected = (self.intrinsics.height, self.intrinsics.width)
        if depths.shape != expected:
            raise ValueError(f"depth grid shape {depths.shape} != intrinsics {expected}")
        object.__setattr__(self, "depths", depths)

    @property
    def width(self) -> int:
        return self.intrinsics.width

    @property
    def height(self) -> int:
        return self.intrinsics.height

    def valid_mask(self) -> np.ndarray:
        return np.isfinite(self.depths) & (self.depths > 0)


@dataclass(frozen=True)
class InflatedEllipse:
    """Axis lengths and orientation of an inflated 3-sigma projection bound."""

    center: np.ndarray
    semi_major: float
    semi_minor: float
    orientation: float

    def __post_init__(self):
        center = np.asarray(self.center, dtype=float)
        if center.shape != (2,):
            raise ValueError("ellipse center must be a 2-vector")
        if not (self.semi_major >= self.semi_minor > 0):
            raise ValueError("ellipse axes must satisfy semi_major >= semi_minor > 0")
        object.__setattr__(self, "center", center)

    def contains(self, point: np.ndarray) -> bool:
        """Whether a pixel point lies inside or on the ellipse."""
        d = np.asarray(point, dtype=float) - self.center
        ct, st = math.cos(self.orientation), math.sin(self.orientation)
        e1 = (d[0] * ct + d[1] * st) / self.semi_major
        e2 = (-d[0] * st + d[1] * ct) / self.semi_minor
        return e1 * e1 + e2 * e2 <= 1.0


def patch_inflation(patch_size: int) -> float:
    """Half the diagonal of a square patch, in pixels."""
    return 0.5 * math.sqrt(2.0) * patch_size


def patch_grid(intrinsics: CameraIntrinsics, patch_size: int):
    """Patch centers for an image, ceiling division at the borders.

    Returns (centers (P, 2), grid_w, grid_h). Border patches may be smaller;
    their centers are computed from the actual pixel extent they cover.
    """
    gw = -(-intrinsics.width // patch_size)
    gh = -(-intrinsics.height // patch_size)
    xs = np.arange(gw) * patch_size
    ys = np.arange(gh) * patch_size
    cx = 0.5 * (xs + np.minimum(xs + patch_size, intrinsics.width) - 1)
    cy = 0.5 * (ys + np.minimum(ys + patch_size, intrinsics.height) - 1)
    centers = np.stack(
        [np.tile(cx, gh), np.repeat(cy, gw)],
        axis=1,
    )
    return centers, gw, gh


@dataclass(frozen=True)
class MembershipTable:
    """Per-patch lists of mixture component indices relevant to a pose.

    ``members[p]`` holds the (sorted) indices of components whose inflated
    projected ellipse contains the center of patch ``p``; patches are
    enumerated row-major over the ceil(width / patch_size) by
    ceil(height / patch_size) grid.
    """

    patch_size: int
    grid_w: int
    grid_h: int
    members: tuple
    n_components: int
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        if len(self.members) != self.grid_w * self.grid_h:
            raise ValueError("member list count does not match the patch grid")
        mem = tuple(np.asarray(m, dtype=np.int32) for m in self.members)
        for arr in mem:
            if arr.size and (arr.min() < 0 or arr.max() >= self.n_components):
                raise ValueError("membership index out of range")
        object.__setattr__(self, "members", mem)

    def csr(self):
        """(indptr, flat member indices) view of the per-patch lists."""
        counts = np.array([m.size for m in self.members], dtype=np.int64)
        indptr = np.zeros(len(self.members) + 1, dtype=np.int64)
        np.cumsum(counts, out=indptr[1:])
        if indptr[-1] == 0:
            return indptr, np.empty(0, dtype=np.int32)
        return indptr, np.concatenate(self.members)

    def member_count(self) -> int:
        return int(sum(m.size for m in self.members))


def ellipse_from_gaussian(g: Gaussian2D, inflation: float) -> InflatedEllipse:
    """Inflated 3-sigma bound of an image-space Gaussian.

    Semi-axes are three times the square roots of the covariance eigenvalues
    plus ``inflation`` pixels; the orientation is the principal eigenvector
    angle.
    """
    a = float(g.covariance[0, 0])
    b = float(g.covariance[0, 1])
    c = float(g.covariance[1, 1])
    half_tr = 0.5 * (a + c)
    det_root = math.sqrt(0.25 * (a - c) * (a - c) + b * b)
    l1 = max(half_tr + det_root, 0.0)
    l2 = max(half_tr - det_root, 0.0)
    theta = 0.5 * math.atan2(2.0 * b, a - c)
    return InflatedEllipse(
        center=g.mean,
        semi_major=max(3.0 * math.sqrt(l1) + inflation, 1e-12),
        semi_minor=max(3.0 * math.sqrt(l2) + inflation, 1e-12),
        orientation=theta,
    )


def compute_memberships(
    gmm: GmmMap,
    pose: Pose,
    intrinsics: CameraIntrinsics,
    patch_size: int = DEFAULT_PATCH_SIZE,
) -> MembershipTable:
    """Project every component and record, per image patch, the components
    whose inflated 3-sigma ellipse contains the patch center.

    Components whose transformed mean lies inside the near plane are members
    of no patch.
    """
    centers, gw, gh = patch_grid(intrinsics, patch_size)
    rot = pose.rotation_world_to_cam()
    mu_c = (gmm.means - pose.position) @ rot.T
    x, y, z = mu_c[:, 0], mu_c[:, 1], mu_c[:, 2]
    visible = z >= NEAR_PLANE

    m = len(gmm)
    inflation = patch_inflation(patch_size)
    inside = np.zeros((centers.shape[0], m), dtype=bool)
    if np.any(visible):
        xv, yv, zv = x[visible], y[visible], z[visible]
        u = intrinsics.cx + intrinsics.f * xv / zv
        v = intrinsics.cy + intrinsics.f * yv / zv
        # Rows of (z/f) * J composed with the world-to-camera rotation.
        arow0 = rot[None, 0, :] - (xv / zv)[:, None] * rot[None, 2, :]
        arow1 = rot[None, 1, :] - (yv / zv)[:, None] * rot[None, 2, :]
        covs = gmm.covariances[visible]
        s2 = (intrinsics.f / zv) ** 2
        c00 = np.einsum("mi,mij,mj->m", arow0, covs, arow0) * s2
        c01 = np.einsum("mi,mij,mj->m", arow0, covs, arow1) * s2
        c11 = np.einsum("mi,mij,mj->m", arow1, covs, arow1) * s2

        half_tr = 0.5 * (c00 + c11)
        det_root = np.sqrt(0.25 * (c00 - c11) ** 2 + c01 **2)
        l1 = np.maximum(half_tr + det_root, 0.0)
        l2 = np.maximum(half_tr - det_root, 0.0)
        theta = 0.5 * np.arctan2(2.0 * c01, c00 - c11)
        sa = np.maximum(3.0 * np.sqrt(l1) + inflation, 1e-12)
        sb = np.maximum(3.0 * np.sqrt(l2) + inflation, 1e-12)
        ct, st = np.cos(theta), np.sin(theta)

        dx = centers[:, 0][:, None] - u[None, :]
        dy = centers[:, 1][:, None] - v[None, :]
        e1 = (dx * ct[None, :] + dy * st[None, :]) / sa[None, :]
        e2 = (-dx * st[None, :] + dy * ct[None, :]) / sb[None, :]
        inside[:, visible] = e1 * e1 + e2 * e2 <= 1.0

    members = tuple(np.nonzero(row)[0].astype(np.int32) for row in inside)
    return MembershipTable(
        patch_size=patch_size,
        grid_w=gw,
        grid_h=gh,
        members=members,
        n_components=m,
        intrinsics=intrinsics,
    )


def _scan_points(scan: DepthImage, stride: int):
    """Strided back-projection: camera-frame points and their patch ids."""
    if stride < 1:
        raise ValueError("stride must be at least 1")
    intr = scan.intrinsics
    depths = scan.depths[::stride, ::stride]
    vs, us = np.mgrid[0 : intr.height : stride, 0 : intr.width : stride]
    valid = np.isfinite(depths) & (depths > 0)
    d = depths[valid]
    u = us[valid].astype(float)
    v = vs[valid].astype(float)
    pts = np.stack([(u - intr.cx) * d / intr.f, (v - intr.cy) * d / intr.f, d], axis=1)
    return pts, us[valid], vs[valid]


def _camera_frame_mixture(gmm: GmmMap, pose: Pose):
    """Camera-frame means, packed precisions, and log coefficients."""
    rot = pose.rotation_world_to_cam()
    mu_c = (gmm.means - pose.position) @ rot.T
    prec = np.einsum("ij,mjk,lk->mil", rot, gmm.inverse_covariances, rot)
    prec6 = np.stack(
        [prec[:, 0, 0], prec[:, 0, 1], prec[:, 0, 2], prec[:, 1, 1], prec[:, 1, 2], prec[:, 2, 2]],
        axis=1,
    )
    logcoef = gmm.log_weights - 0.5 * (gmm.log_dets + 3.0 * _LOG_2PI)
    return np.ascontiguousarray(mu_c), np.ascontiguousarray(prec6), logcoef


def _nll_from_csr(pts, patch_of, mu_c, prec6, min_prec, logcoef, indptr, members) -> float:
    indptr = np.ascontiguousarray(indptr, dtype=np.int64)
    members = np.ascontiguousarray(members, dtype=np.int32)
    patch_of = np.ascontiguousarray(patch_of, dtype=np.int64)
    if _fast.NUMBA_ENABLED:
        scratch = np.empty(mu_c.shape[0])
        return float(
            _fast.nll_csr(
                pts,
                patch_of,
                mu_c,
                prec6,
                min_prec,
                logcoef,
                indptr,
                members,
                OUTLIER_LOG_DENSITY,
                scratch,
            )
        )
    return _fast.nll_csr_numpy(
        pts, patch_of, mu_c, prec6, min_prec, logcoef, indptr, members, OUTLIER_LOG_DENSITY
    )


def scan_nll_approx(
    scan: DepthImage,
    gmm: GmmMap,
    pose: Pose,
    table: MembershipTable,
    stride: int = DEFAULT_STRIDE,
) -> float:
    """Negative log-likelihood of a scan using patch membership lists.

    Pixels are subsampled by ``stride`` in both axes; invalid pixels are
    skipped and contribute nothing. Pixels whose patch has no members
    contribute the outlier floor. ``table`` must have been computed for this
    pose and for the scan's intrinsics.
    """
    if table.intrinsics != scan.intrinsics:
        raise ValueError("membership table was built for different intrinsics")
    if table.n_components != len(gmm):
        raise ValueError("membership table was built for a different map")
    pts, us, vs = _scan_points(scan, stride)
    if pts.shape[0] == 0:
        return 0.0
    patch_of = (vs // table.patch_size) * table.grid_w + (us // table.patch_size)
    mu_c, prec6, logcoef = _camera_frame_mixture(gmm, pose)
    indptr, members = table.csr()
    return _nll_from_csr(
        pts, patch_of, mu_c, prec6, gmm.min_precisions, logcoef, indptr, members
    )


def scan_nll_full(
    scan: DepthImage,
    gmm: GmmMap,
    pose: Pose,
    stride: int = DEFAULT_STRIDE,
) -> float:
    """Exhaustive reference: every component contributes at every pixel."""
    pts, us, vs = _scan_points(scan, stride)
    if pts.shape[0] == 0:
        return 0.0
    m = len(gmm)
    patch_of = np.zeros(pts.shape[0], dtype=np.int64)
    indptr = np.array([0, m], dtype=np.int64)
    members = np.arange(m, dtype=np.int32)
    mu_c, prec6, logcoef = _camera_frame_mixture(gmm, pose)
    return _nll_from_csr(
        pts, patch_of, mu_c, prec6, gmm.min_precisions, logcoef, indptr, members
    )
