"""Gaussian mixture environment maps: construction, fitting, queries, serialization.

A map is a weighted set of 3D Gaussian components approximating the spatial
distribution of matter in the environment. Maps are immutable after
construction; derived quantities (Cholesky factors, inverses, log
normalizers) are precomputed once so that density queries and likelihood
evaluation stay cheap.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

# Smallest admissible covariance eigenvalue, in m^2. Degenerate covariances
# (EM collapse, file round-off) are lifted by adding this on the diagonal,
# which keeps Mahalanobis forms conditioned without distorting room-scale
# geometry.
COV_EIGENVALUE_FLOOR = 1e-6

# Per-point log-density clamp; keeps sums finite while preserving ordering.
LOG_DENSITY_FLOOR = -700.0

_LOG_2PI = float(np.log(2.0 * np.pi))

MAP_MAGIC = b"GMM1"
_MAX_FRAME_ID_BYTES = 52  # keeps the fixed header within 64 bytes
BYTES_PER_COMPONENT = 40  # 10 little-endian f32 values


class MapFormatError(ValueError):
    """Raised for malformed, truncated, or inconsistent map streams."""


def _symmetrize(cov: np.ndarray) -> np.ndarray:
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


def regularize_covariance(cov: np.ndarray, floor: float = COV_EIGENVALUE_FLOOR) -> np.ndarray:
    """Lift covariance eigenvalues to the admissible floor by adding eps*I.

    Accepts a single 3x3 matrix or a stacked (..., 3, 3) array. Matrices whose
    eigenvalues are already at or above the floor (within a small relative
    slack, so that float32 round trips do not trigger a lift) are returned
    symmetrized but otherwise untouched.
    """
    cov = _symmetrize(np.asarray(cov, dtype=float))
    eig = np.linalg.eigvalsh(cov)
    needs = eig[..., 0] < floor * (1.0 - 1e-3)
    if not np.any(needs):
        return cov
    lift = np.where(needs, floor, 0.0)
    return cov + lift[..., None, None] * np.eye(3)


@dataclass(frozen=True)
class GmmComponent:
    """One mixture component: weight, world-frame mean (m), covariance (m^2)."""

    weight: float
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        cov = np.asarray(self.covariance, dtype=float)
        if mean.shape != (3,) or cov.shape != (3, 3):
            raise ValueError("component needs a 3-vector mean and 3x3 covariance")
        if not (self.weight > 0):
            raise ValueError(f"component weight must be positive, got {self.weight}")
        scale = max(1.0, float(np.abs(cov).max()))
        if np.abs(cov - cov.T).max() > 1e-12 * scale:
            raise ValueError("covariance must be symmetric")
        eig = np.linalg.eigvalsh(cov)
        if eig[0] < COV_EIGENVALUE_FLOOR * (1.0 - 1e-3):
            raise ValueError(
                f"covariance eigenvalue {eig[0]:.3e} below floor {COV_EIGENVALUE_FLOOR:.0e}"
            )
        object.__setattr__(self, "weight", float(self.weight))
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", _symmetrize(cov))


@dataclass(frozen=True)
class PointCloud:
    """World-frame 3D samples, meters."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be (n, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]


class GmmMap:
    """Immutable weighted mixture of 3D Gaussians plus a world-frame label.

    Parameters
    ----------
    components : sequence of GmmComponent
        Ordered mixture components; weights must sum to 1 within 1e-9.
    frame_id : str
        Label for the world frame the map lives in.

    Component data is stored as packed arrays (``weights``, ``means``,
    ``covariances``) which are the preferred access path for numerics.
    """

    def __init__(self, components, frame_id: str = "world", fit_history=None):
        comps = list(components)
        if len(comps) < 1:
            raise ValueError("a map needs at least one component")
        weights = np.array([c.weight for c in comps], dtype=float)
        means = np.array([c.mean for c in comps], dtype=float)
        covs = np.array([c.covariance for c in comps], dtype=float)
        self._init_arrays(weights, means, covs, frame_id, fit_history)

    @classmethod
    def from_arrays(
        cls,
        weights: np.ndarray,
        means: np.ndarray,
        covariances: np.ndarray,
        frame_id: str = "world",
        fit_history=None,
    ) -> "GmmMap":
        obj = cls.__new__(cls)
        obj._init_arrays(
            np.asarray(weights, dtype=float),
            np.asarray(means, dtype=float),
            np.asarray(covariances, dtype=float),
            frame_id,
            fit_history,
        )
        return obj

    def _init_arrays(self, weights, means, covs, frame_id, fit_history):
        m = weights.shape[0]
        if m < 1:
            raise ValueError("a map needs at least one component")
        if means.shape != (m, 3) or covs.shape != (m, 3, 3):
            raise ValueError("inconsistent component array shapes")
        if np.any(weights <= 0):
            raise ValueError("all mixture weights must be positive")
        total = float(weights.sum())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"mixture weights must sum to 1, got {total!r}")
        covs = _symmetrize(covs)
        eig = np.linalg.eigvalsh(covs)
        if eig[:, 0].min() < COV_EIGENVALUE_FLOOR * (1.0 - 1e-3):
            raise ValueError("a covariance eigenvalue lies below the regularization floor")
        # Smallest precision eigenvalue per component (rotation invariant);
        # lets likelihood kernels lower-bound Mahalanobis terms cheaply.
        self.min_precisions = 1.0 / eig[:, 2]
        self.min_precisions.flags.writeable = False
        self.weights = weights
        self.weights.flags.writeable = False
        self.means = means
        self.means.flags.writeable = False
        self.covariances = covs
        self.covariances.flags.writeable = False
        self.frame_id = str(frame_id)
        self.fit_history = None if fit_history is None else np.asarray(fit_history, dtype=float)
        # Derived quantities shared by density and likelihood evaluation.
        self.cholesky = np.linalg.cholesky(covs)
        self.cholesky.flags.writeable = False
        self.inverse_covariances = np.linalg.inv(covs)
        self.inverse_covariances.flags.writeable = False
        self.log_dets = 2.0 * np.log(np.einsum("mii->mi", self.cholesky)).sum(axis=1)
        self.log_dets.flags.writeable = False
        self.log_weights = np.log(weights)
        self.log_weights.flags.writeable = False

    def __len__(self) -> int:
        return self.weights.shape[0]

    @property
    def components(self) -> list[GmmComponent]:
        return [
            GmmComponent(weight=float(w), mean=mu, covariance=cov)
            for w, mu, cov in zip(self.weights, self.means, self.covariances)
        ]

    def bounds(self, margin: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned bounding box of the component means, optionally padded."""
        return self.means.min(axis=0) - margin, self.means.max(axis=0) + margin


def _component_log_gaussians(pts, means, inv_covs, log_dets) -> np.ndarray:
    """(n, m) per-component log N(pts); loops components to bound memory."""
    n, m = pts.shape[0], means.shape[0]
    logp = np.empty((n, m))
    for k in range(m):
        d = pts - means[k]
        quad = np.einsum("ni,ni->n", d @ inv_covs[k], d)
        logp[:, k] = -0.5 * (quad + log_dets[k] + 3.0 * _LOG_2PI)
    return logp


def log_density_at(gmm: GmmMap, points: np.ndarray) -> np.ndarray:
    """Mixture log density at world points (n, 3), evaluated in log space.

    Each result is clamped below at :data:`LOG_DENSITY_FLOOR` so downstream
    sums stay finite.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    logp = (
        _component_log_gaussians(pts, gmm.means, gmm.inverse_covariances, gmm.log_dets)
        + gmm.log_weights[None, :]
    )
    mx = logp.max(axis=1)
    out = mx + np.log(np.exp(logp - mx[:, None]).sum(axis=1))
    return np.maximum(out, LOG_DENSITY_FLOOR)


def density_at(gmm: GmmMap, point: np.ndarray):
    """Mixture probability density (1/m^3) at a world point or (n, 3) array."""
    point = np.asarray(point, dtype=float)
    if point.ndim == 1:
        return float(np.exp(log_density_at(gmm, point[None, :])[0]))
    return np.exp(log_density_at(gmm, point))


def sample_points(gmm: GmmMap, n: int, seed) -> PointCloud:
    """Draw n i.i.d. points from the mixture; components chosen by weight."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    counts = rng.multinomial(n, gmm.weights)
    chunks = []
    for idx in np.nonzero(counts)[0]:
        k = counts[idx]
        normals = rng.standard_normal((k, 3))
        chunks.append(gmm.means[idx] + normals @ gmm.cholesky[idx].T)
    pts = np.concatenate(chunks, axis=0)
    return PointCloud(points=pts[rng.permutation(n)])


# ---------------------------------------------------------------------------
# Expectation-maximization fitting
# ---------------------------------------------------------------------------

_EM_CHUNK = 16384  # points per responsibility block, bounds peak memory


def _kmeanspp_centers(pts: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: iteratively sample proportional to squared distance."""
    n = pts.shape[0]
    centers = np.empty((m, 3))
    centers[0] = pts[rng.integers(n)]
    d2 = np.sum((pts - centers[0]) ** 2, axis=1)
    for k in range(1, m):
        total = d2.sum()
        if total <= 0:
            centers[k] = pts[rng.integers(n)]
            continue
        centers[k] = pts[np.searchsorted(np.cumsum(d2), rng.uniform(0.0, total))]
        d2 = np.minimum(d2, np.sum((pts - centers[k]) ** 2, axis=1))
    return centers


def fit_em(
    cloud: PointCloud,
    m: int,
    seed,
    max_iters: int = 100,
    tol: float = 1e-6,
    frame_id: str = "world",
) -> GmmMap:
    """Fit an m-component full-covariance mixture to a point cloud with EM.

    Initialization is k-means++ seeding driven by the explicit RNG seed; the
    data log-likelihood is non-decreasing across iterations and iteration
    stops when its per-point gain falls below ``tol`` or after ``max_iters``.
    Degenerate components are repaired by lifting covariance eigenvalues to
    the regularization floor rather than raised as errors.

    The per-iteration total log-likelihood trace is attached to the returned
    map as ``fit_history``.
    """
    pts = cloud.points
    n = pts.shape[0]
    if m < 1:
        raise ValueError("component count must be at least 1")
    if n < m:
        raise ValueError(f"need at least {m} points to fit {m} components, got {n}")
    rng = np.random.default_rng(seed)

    means = _kmeanspp_centers(pts, m, rng)
    # Hard-assignment bootstrap for weights and covariances.
    assign = np.zeros(n, dtype=np.intp)
    best = np.full(n, np.inf)
    for k in range(m):
        d2 = np.einsum("ni,ni->n", pts - means[k], pts - means[k])
        closer = d2 < best
        assign[closer] = k
        best[closer] = d2[closer]
    weights = np.full(m, 1.0 / m)
    covs = np.empty((m, 3, 3))
    counts = np.bincount(assign, minlength=m).astype(float)
    global_cov = np.cov(pts.T) if n > 1 else np.eye(3)
    for k in range(m):
        sel = pts[assign == k]
        if sel.shape[0] >= 4:
            covs[k] = np.cov(sel.T, bias=True)
        else:
            covs[k] = global_cov
    covs = regularize_covariance(covs)
    weights = np.maximum(counts, 1.0)
    weights /= weights.sum()

    history = []
    prev_ll = -np.inf
    for _ in range(max_iters):
        chol = np.linalg.cholesky(covs)
        log_dets = 2.0 * np.log(np.einsum("mii->mi", chol)).sum(axis=1)
        inv_covs = np.linalg.inv(covs)
        log_w = np.log(weights)

        total_ll = 0.0
        resp_sum = np.zeros(m)
        mean_acc = np.zeros((m, 3))
        sq_acc = np.zeros((m, 3, 3))
        for start in range(0, n, _EM_CHUNK):
            block = pts[start : start + _EM_CHUNK]
            logp = _component_log_gaussians(block, means, inv_covs, log_dets) + log_w[None, :]
            mx = logp.max(axis=1)
            lse = mx + np.log(np.exp(logp - mx[:, None]).sum(axis=1))
            total_ll += float(lse.sum())
            resp = np.exp(logp - lse[:, None])
            resp_sum += resp.sum(axis=0)
            mean_acc += resp.T @ block
            sq_acc += np.einsum("nm,ni,nj->mij", resp, block, block, optimize=True)
        history.append(total_ll)

        nk = np.maximum(resp_sum, 1e-12)
        means = mean_acc / nk[:, None]
        covs = sq_acc / nk[:, None, None] - np.einsum("mi,mj->mij", means, means)
        covs = regularize_covariance(covs)
        weights = np.maximum(resp_sum, 1e-12)
        weights /= weights.sum()

        if total_ll - prev_ll < tol * n and np.isfinite(prev_ll):
            break
        prev_ll = total_ll

    return GmmMap.from_arrays(weights, means, covs, frame_id=frame_id, fit_history=history)


# ---------------------------------------------------------------------------
# Binary serialization
# ---------------------------------------------------------------------------


def memory_footprint(gmm: GmmMap) -> int:
    """Serialized payload size in bytes (excluding the fixed header)."""
    return BYTES_PER_COMPONENT * len(gmm)


def serialize(gmm: GmmMap) -> bytes:
    """Encode a map: 'GMM1', u32 count, u32 frame-id length + UTF-8 bytes,
    then 10 little-endian f32 per component (weight, mean xyz, covariance
    upper triangle row-major)."""
    frame = gmm.frame_id.encode("utf-8")
    if len(frame) > _MAX_FRAME_ID_BYTES:
        raise ValueError(f"frame_id exceeds {_MAX_FRAME_ID_BYTES} bytes when encoded")
    m = len(gmm)
    rows = np.empty((m, 10), dtype="<f4")
    rows[:, 0] = gmm.weights
    rows[:, 1:4] = gmm.means
    iu = np.triu_indices(3)
    rows[:, 4:10] = gmm.covariances[:, iu[0], iu[1]]
    return MAP_MAGIC + struct.pack("<II", m, len(frame)) + frame + rows.tobytes()


def deserialize(data: bytes) -> GmmMap:
    """Decode a map stream produced by :func:`serialize`.

    Weights are renormalized when their sum lies within [0.999, 1.001]
    (float32 round-off); anything further off is rejected as corrupt.
    Covariances with eigenvalues marginally below the floor are lifted;
    genuinely non-PSD matrices are rejected.
    """
    buf = io.BytesIO(data)
    magic = buf.read(4)
    if magic != MAP_MAGIC:
        raise MapFormatError(f"bad magic {magic!r}, expected {MAP_MAGIC!r}")
    head = buf.read(8)
    if len(head) != 8:
        raise MapFormatError("truncated header")
    m, frame_len = struct.unpack("<II", head)
    if m < 1:
        raise MapFormatError("component count must be at least 1")
    if frame_len > _MAX_FRAME_ID_BYTES:
        raise MapFormatError(f"frame-id length {frame_len} exceeds header budget")
    frame_raw = buf.read(frame_len)
    if len(frame_raw) != frame_len:
        raise MapFormatError("truncated frame id")
    try:
        frame_id = frame_raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MapFormatError("frame id is not valid UTF-8") from exc
    payload = buf.read(BYTES_PER_COMPONENT * m)
    if len(payload) != BYTES_PER_COMPONENT * m:
        raise MapFormatError(
            f"truncated payload: expected {BYTES_PER_COMPONENT * m} bytes, got {len(payload)}"
        )
    if buf.read(1):
        raise MapFormatError("trailing bytes after payload")

    rows = np.frombuffer(payload, dtype="<f4").reshape(m, 10).astype(float)
    weights = rows[:, 0]
    if np.any(weights <= 0):
        raise MapFormatError("non-positive mixture weight in stream")
    total = float(weights.sum())
    if not (0.999 <= total <= 1.001):
        raise MapFormatError(f"mixture weights sum to {total:.6f}, outside [0.999, 1.001]")
    weights = weights / total
    means = rows[:, 1:4]
    covs = np.empty((m, 3, 3))
    iu = np.triu_indices(3)
    covs[:, iu[0], iu[1]] = rows[:, 4:10]
    covs[:, iu[1], iu[0]] = rows[:, 4:10]
    eig = np.linalg.eigvalsh(covs)
    scale = np.maximum(np.abs(covs).reshape(m, -1).max(axis=1), 1.0)
    if np.any(eig[:, 0] < -1e-6 * scale):
        raise MapFormatError("non-PSD covariance in stream")
    covs = regularize_covariance(covs)
    return GmmMap.from_arrays(weights, means, covs, frame_id=frame_id)


# ---------------------------------------------------------------------------
# Point cloud ingestion
# ---------------------------------------------------------------------------


def load_point_cloud(path) -> PointCloud:
    """Read an ASCII PLY or whitespace-separated XYZ text file, meters."""
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline()
    if first.strip() == "ply":
        return _load_ply(path)
    return _load_xyz(path)


def _load_xyz(path) -> PointCloud:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            parts = text.split()
            if len(parts) < 3:
                raise ValueError(f"{path}:{lineno}: expected at least 3 columns")
            try:
                rows.append([float(parts[0]), float(parts[1]), float(parts[2])])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: non-numeric coordinate") from exc
    if not rows:
        raise ValueError(f"{path}: no points found")
    return PointCloud(points=np.asarray(rows))


def _load_ply(path) -> PointCloud:
    with open(path, "r", encoding="utf-8") as fh:
        if fh.readline().strip() != "ply":
            raise ValueError(f"{path}: not a PLY file")
        fmt = fh.readline().strip()
        if not fmt.startswith("format ascii"):
            raise ValueError(f"{path}: only ASCII PLY is supported, got {fmt!r}")
        n_vertex = None
        props = []
        in_vertex = False
        for line in fh:
            tok = line.strip().split()
            if not tok:
                continue
            if tok[0] == "comment":
                continue
            if tok[0] == "element":
                in_vertex = tok[1] == "vertex"
                if in_vertex:
                    n_vertex = int(tok[2])
            elif tok[0] == "property" and in_vertex:
                props.append(tok[-1])
            elif tok[0] == "end_header":
                break
        if n_vertex is None:
            raise ValueError(f"{path}: PLY header lacks a vertex element")
        try:
            cols = [props.index(axis) for axis in ("x", "y", "z")]
        except ValueError as exc:
            raise ValueError(f"{path}: vertex element lacks x/y/z properties") from exc
        pts = np.empty((n_vertex, 3))
        for i in range(n_vertex):
            line = fh.readline()
            if not line:
                raise ValueError(f"{path}: truncated vertex data at row {i}")
            parts = line.split()
            pts[i] = [float(parts[c]) for c in cols]
    return PointCloud(points=pts)


def save_point_cloud_xyz(cloud: PointCloud, path) -> None:
    """Write a cloud as whitespace-separated XYZ text."""
    with open(path, "w", encoding="utf-8") as fh:
        for x, y, z in cloud.points:
            fh.write(f"{x:.9g} {y:.9g} {z:.9g}\n")
