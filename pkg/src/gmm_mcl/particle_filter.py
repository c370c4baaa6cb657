"""Multi-hypothesis pose tracking over a Gaussian-mixture map.

The filter state is a weighted set of pose particles over position + yaw;
pitch and roll ride along from an external attitude source. One iteration
propagates particles through an odometry delta with injected Gaussian noise,
scores each particle by the inverse of its scan negative log-likelihood,
reinitializes a fraction of particles when smoothed likelihood trackers
signal deprivation, and resamples with a stratified low-variance scheme.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import _fast, likelihood
from .gmm_map import GmmMap
from .likelihood import DEFAULT_PATCH_SIZE, DEFAULT_STRIDE, DepthImage, patch_grid, patch_inflation
from .projection import NEAR_PLANE, Pose, rotation_zyx, wrap_angle

# Scan NLL values are clamped here before inversion: inverse-NLL weighting
# breaks down when the NLL approaches zero or goes negative (per-pixel
# densities above 1), and the clamp preserves ordering among plausible
# hypotheses while keeping weights finite and positive.
NLL_CLAMP = 1e-3

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class Particle:
    """One pose hypothesis with its normalized importance weight."""

    pose: Pose
    weight: float


@dataclass(frozen=True)
class OdometryDelta:
    """Frame-to-frame motion: translation in the previous camera frame,
    yaw increment, and the new absolute pitch/roll from the attitude source."""

    delta_translation: np.ndarray
    delta_yaw: float
    pitch: float
    roll: float

    def __post_init__(self):
        t = np.asarray(self.delta_translation, dtype=float)
        if t.shape != (3,) or not np.all(np.isfinite(t)):
            raise ValueError("delta_translation must be a finite 3-vector")
        if not all(np.isfinite([self.delta_yaw, self.pitch, self.roll])):
            raise ValueError("delta angles must be finite")
        object.__setattr__(self, "delta_translation", t)
        object.__setattr__(self, "delta_yaw", float(wrap_angle(self.delta_yaw)))


def delta_between(prev: Pose, nxt: Pose) -> OdometryDelta:
    """Relative motion between consecutive poses, expressed in the earlier
    camera frame; pitch/roll carry the newer pose's absolute attitude."""
    rot = prev.rotation_world_to_cam()
    return OdometryDelta(
        delta_translation=rot @ (nxt.position - prev.position),
        delta_yaw=wrap_angle(nxt.yaw - prev.yaw),
        pitch=nxt.pitch,
        roll=nxt.roll,
    )


@dataclass(frozen=True)
class FilterConfig:
    """Filter hyperparameters.

    Process noise defaults follow the desktop tuning (0.02 m translation,
    0.01 rad yaw); the smoothing rates drive the deprivation trackers with
    the slow average lagging the fast one (alpha_slow < alpha_fast).
    """

    n_particles: int = 1068
    sigma_translation: float = 0.02
    sigma_yaw: float = 0.01
    alpha_slow: float = 0.001
    alpha_fast: float = 0.01
    n_groups: int = 32
    patch_size: int = DEFAULT_PATCH_SIZE
    stride: int = DEFAULT_STRIDE
    ess_threshold: float | None = None  # fraction of N; None resamples every step

    def __post_init__(self):
        if not (0 < self.alpha_slow < self.alpha_fast < 1):
            raise ValueError("smoothing rates must satisfy 0 < alpha_slow < alpha_fast < 1")
        if not (self.n_particles >= self.n_groups >= 1):
            raise ValueError("need n_particles >= n_groups >= 1")
        if self.sigma_translation < 0 or self.sigma_yaw < 0:
            raise ValueError("noise sigmas must be non-negative")
        if self.patch_size < 1 or self.stride < 1:
            raise ValueError("patch_size and stride must be at least 1")
        if self.ess_threshold is not None and not (0 < self.ess_threshold <= 1):
            raise ValueError("ess_threshold must lie in (0, 1]")


@dataclass(frozen=True)
class FilterState:
    """Particle set (positions + yaws + shared attitude) and filter trackers.

    ``w_slow`` and ``w_fast`` are exponentially smoothed averages of the mean
    inverse scan NLL, used to detect particle deprivation. The particle count
    is fixed after initialization.
    """

    positions: np.ndarray
    yaws: np.ndarray
    pitch: float
    roll: float
    weights: np.ndarray
    w_slow: float = 0.0
    w_fast: float = 0.0
    step: int = 0
    degenerate_weights: bool = False

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float)
        yaws = np.asarray(self.yaws, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        n = pos.shape[0]
        if n < 1 or pos.shape != (n, 3) or yaws.shape != (n,) or w.shape != (n,):
            raise ValueError("inconsistent particle array shapes")
        if np.any(w < 0) or np.any(w > 1):
            raise ValueError("weights must lie in [0, 1]")
        if abs(float(w.sum()) - 1.0) > 1e-9:
            raise ValueError(f"weights must sum to 1, got {w.sum()!r}")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "yaws", yaws)
        object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def particles(self) -> list[Particle]:
        return [
            Particle(
                pose=Pose(position=p, yaw=float(y), pitch=self.pitch, roll=self.roll),
                weight=float(w),
            )
            for p, y, w in zip(self.positions, self.yaws, self.weights)
        ]


def effective_sample_size(weights: np.ndarray) -> float:
    """1 / sum(w^2): diversity measure of a normalized weight vector."""
    return float(1.0 / np.sum(np.square(weights)))


def init_uniform(
    config: FilterConfig,
    center: Pose,
    extent: np.ndarray,
    yaw_range: float,
    seed,
) -> FilterState:
    """Uniform particle cloud over a box around ``center`` and a yaw interval.

    Positions are uniform in center +- extent/2 per axis, yaws uniform in
    center.yaw +- yaw_range/2 (wrapped); pitch/roll are copied from the
    center pose and weights start uniform.
    """
    extent = np.asarray(extent, dtype=float)
    if extent.shape != (3,) or np.any(extent < 0):
        raise ValueError("extent must be a non-negative 3-vector")
    rng = np.random.default_rng(seed)
    n = config.n_particles
    positions = center.position + rng.uniform(-0.5, 0.5, size=(n, 3)) * extent
    yaws = wrap_angle(center.yaw + rng.uniform(-0.5, 0.5, size=n) * yaw_range)
    return FilterState(
        positions=positions,
        yaws=yaws,
        pitch=center.pitch,
        roll=center.roll,
        weights=np.full(n, 1.0 / n),
    )


def propagate(state: FilterState, delta: OdometryDelta, config: FilterConfig, seed) -> FilterState:
    """Compose every particle with the odometry delta and inject process noise.

    The delta translation is rotated into each particle's own frame via its
    yaw (pitch/roll are shared), then zero-mean Gaussian noise with diagonal
    covariance is added per translation axis and on yaw. Pitch and roll are
    overwritten with the delta's absolute attitude; weights are unchanged.
    """
    rng = np.random.default_rng(seed)
    n = len(state)
    # Rz(yaw_i) @ (Ry(pitch) Rx(roll) @ dt): the attitude part is shared.
    base = rotation_zyx(0.0, state.pitch, state.roll) @ delta.delta_translation
    cos_y = np.cos(state.yaws)
    sin_y = np.sin(state.yaws)
    world_dt = np.stack(
        [
            cos_y * base[0] - sin_y * base[1],
            sin_y * base[0] + cos_y * base[1],
            np.full(n, base[2]),
        ],
        axis=1,
    )
    positions = state.positions + world_dt + rng.normal(0.0, config.sigma_translation, (n, 3))
    yaws = wrap_angle(state.yaws + delta.delta_yaw + rng.normal(0.0, config.sigma_yaw, n))
    return replace(
        state,
        positions=positions,
        yaws=yaws,
        pitch=delta.pitch,
        roll=delta.roll,
        step=state.step + 1,
    )


def _particle_nlls(
    state: FilterState, scan: DepthImage, gmm: GmmMap, config: FilterConfig, workers: int
) -> np.ndarray:
    """Per-particle approximate scan NLL via the fused membership kernel."""
    pts, us, vs = likelihood._scan_points(scan, config.stride)
    n = len(state)
    out = np.empty(n)
    if pts.shape[0] == 0:
        out.fill(0.0)
        return out

    if not _fast.NUMBA_ENABLED:
        # Reference path: per-particle membership table + public evaluator.
        for i in range(n):
            pose = Pose(state.positions[i], float(state.yaws[i]), state.pitch, state.roll)
            table = likelihood.compute_memberships(
                gmm, pose, scan.intrinsics, config.patch_size
            )
            out[i] = likelihood.scan_nll_approx(scan, gmm, pose, table, config.stride)
        return out

    intr = scan.intrinsics
    centers, gw, _gh = patch_grid(intr, config.patch_size)
    patch_of = ((vs // config.patch_size) * gw + (us // config.patch_size)).astype(np.int64)
    cpx = np.ascontiguousarray(centers[:, 0])
    cpy = np.ascontiguousarray(centers[:, 1])
    logcoef = gmm.log_weights - 0.5 * (gmm.log_dets + 3.0 * _LOG_2PI)
    inflation = patch_inflation(config.patch_size)
    base = rotation_zyx(0.0, state.pitch, state.roll)

    def run_slice(lo: int, hi: int) -> None:
        _fast.fused_batch_nll(
            state.positions,
            state.yaws,
            base,
            pts,
            patch_of,
            cpx,
            cpy,
            gmm.means,
            gmm.covariances,
            gmm.inverse_covariances,
            gmm.min_precisions,
            logcoef,
            intr.f,
            intr.cx,
            intr.cy,
            NEAR_PLANE,
            inflation,
            likelihood.OUTLIER_LOG_DENSITY,
            lo,
            hi,
            out,
        )

    if workers > 1:
        bounds = np.linspace(0, n, workers + 1).astype(int)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(run_slice, int(bounds[k]), int(bounds[k + 1]))
                for k in range(workers)
                if bounds[k] < bounds[k + 1]
            ]
            for fut in futures:
                fut.result()
    else:
        run_slice(0, n)
    return out


def _apply_weights(state: FilterState, nll: np.ndarray, config: FilterConfig) -> FilterState:
    """Turn raw per-particle NLLs into normalized weights and tracker updates."""
    nll = np.maximum(nll, NLL_CLAMP)
    inv = 1.0 / nll
    w_avg = float(inv.mean())
    total = float(inv.sum())
    spread = float(nll.max() - nll.min())
    degenerate = spread <= 1e-12 * max(1.0, float(nll.max()))
    if degenerate or not np.isfinite(total) or total <= 0:
        weights = np.full(len(state), 1.0 / len(state))
        degenerate = True
    else:
        weights = inv / total
        weights = weights / weights.sum()  # second pass kills 1e-16 drift
    return replace(
        state,
        weights=weights,
        w_slow=state.w_slow + config.alpha_slow * (w_avg - state.w_slow),
        w_fast=state.w_fast + config.alpha_fast * (w_avg - state.w_fast),
        degenerate_weights=degenerate,
    )


def compute_weights(
    state: FilterState,
    scan: DepthImage,
    gmm: GmmMap,
    config: FilterConfig,
    workers: int = 1,
) -> FilterState:
    """Score particles by inverse scan NLL and update the deprivation trackers.

    Each particle's NLL is clamped below at :data:`NLL_CLAMP` and inverted;
    weights are the normalized inverses. The mean inverse NLL feeds the
    w_slow / w_fast exponential averages. If the scan carries no usable
    pixels (or every hypothesis scores identically), weights become uniform
    and the state is flagged degenerate.
    """
    return _apply_weights(state, _particle_nlls(state, scan, gmm, config, workers), config)


def particle_nlls(
    state: FilterState,
    scan: DepthImage,
    gmm: GmmMap,
    config: FilterConfig,
    workers: int = 1,
) -> np.ndarray:
    """Raw (unclamped) per-particle scan NLLs; exposed for analysis tools."""
    return _particle_nlls(state, scan, gmm, config, workers)


def _group_budgets(n: int, groups: int) -> np.ndarray:
    per = int(round(n / groups))
    if per < 1 or (groups - 1) * per >= n:
        per = max(1, n // groups)
    budgets = np.full(groups, per, dtype=int)
    budgets[-1] = n - (groups - 1) * per
    return budgets


def resample(state: FilterState, config: FilterConfig, seed) -> FilterState:
    """Stratified low-variance resampling.

    Particles are randomly permuted, the cumulative weight axis is split into
    ``n_groups`` equal-mass strata, and each stratum draws its budget of
    particles with a single uniform offset and evenly spaced selection
    points (budget = round(N / n_groups), last stratum absorbs rounding).
    Output weights are reset to 1/N.
    """
    rng = np.random.default_rng(seed)
    n = len(state)
    groups = min(config.n_groups, n)
    perm = rng.permutation(n)
    cum = np.cumsum(state.weights[perm])
    cum[-1] = 1.0  # guard against float drift at the top end
    budgets = _group_budgets(n, groups)
    picks = np.empty(n, dtype=int)
    pos = 0
    for g in range(groups):
        b = budgets[g]
        offset = rng.uniform()
        u = (g + (np.arange(b) + offset) / b) / groups
        idx = np.searchsorted(cum, u, side="right")
        picks[pos : pos + b] = perm[np.minimum(idx, n - 1)]
        pos += b
    return replace(
        state,
        positions=state.positions[picks],
        yaws=state.yaws[picks],
        weights=np.full(n, 1.0 / n),
        degenerate_weights=False,
    )


def deprivation_reset_count(state: FilterState) -> int:
    """Number of particles the deprivation heuristic would reinitialize."""
    if state.w_slow <= 0:
        return 0
    p_reset = max(0.0, 1.0 - state.w_fast / state.w_slow)
    return int(round(p_reset * len(state)))


def recover_deprivation(
    state: FilterState,
    config: FilterConfig,
    map_bounds: tuple[np.ndarray, np.ndarray],
    seed,
) -> FilterState:
    """Reinitialize a tracker-driven fraction of particles uniformly at random.

    The reset fraction is max(0, 1 - w_fast / w_slow); that many particles,
    chosen uniformly at random, are re-drawn uniformly over ``map_bounds``
    in position and (-pi, pi] in yaw. The particle count never changes, and
    the reinitialized particles keep their current weights.
    """
    n_modify = deprivation_reset_count(state)
    if n_modify == 0:
        return state
    rng = np.random.default_rng(seed)
    lo = np.asarray(map_bounds[0], dtype=float)
    hi = np.asarray(map_bounds[1], dtype=float)
    n = len(state)
    chosen = rng.choice(n, size=n_modify, replace=False)
    positions = state.positions.copy()
    yaws = state.yaws.copy()
    positions[chosen] = rng.uniform(lo, hi, size=(n_modify, 3))
    yaws[chosen] = wrap_angle(rng.uniform(-np.pi, np.pi, size=n_modify))
    return replace(state, positions=positions, yaws=yaws)


def estimate(state: FilterState) -> tuple[Pose, np.ndarray, float]:
    """Weighted mean pose, position covariance, and yaw circular variance.

    Yaw is averaged circularly (atan2 of weighted sine/cosine sums); its
    spread is reported as the circular variance 1 - |mean resultant|.
    """
    w = state.weights
    mean_pos = w @ state.positions
    sin_sum = float(w @ np.sin(state.yaws))
    cos_sum = float(w @ np.cos(state.yaws))
    mean_yaw = math.atan2(sin_sum, cos_sum)
    diff = state.positions - mean_pos
    cov = (w[:, None] * diff).T @ diff
    yaw_var = 1.0 - math.hypot(sin_sum, cos_sum)
    pose = Pose(position=mean_pos, yaw=mean_yaw, pitch=state.pitch, roll=state.roll)
    return pose, cov, yaw_var


@dataclass(frozen=True)
class StepInfo:
    """Pre-resample belief summary emitted by one filter iteration."""

    pose: Pose
    position_covariance: np.ndarray
    yaw_variance: float
    mean_nll: float
    min_nll: float
    ess: float
    n_modify: int
    w_slow: float
    w_fast: float
    degenerate_weights: bool
    resampled: bool


def step(
    state: FilterState,
    delta: OdometryDelta,
    scan: DepthImage,
    gmm: GmmMap,
    config: FilterConfig,
    seed,
    map_bounds: tuple[np.ndarray, np.ndarray] | None = None,
    workers: int = 1,
) -> tuple[FilterState, StepInfo]:
    """One filter iteration: propagate, weight, recover deprivation, resample.

    ``map_bounds`` defaults to the bounding box of the map's component means
    padded by 0.5 m. All randomness derives from ``seed``, so a run is
    reproducible regardless of worker count. Returns the next state plus the
    pre-resample estimate and diagnostics.
    """
    if isinstance(seed, np.random.SeedSequence):
        ss = seed.spawn(3)
    else:
        ss = np.random.SeedSequence(seed).spawn(3)
    if map_bounds is None:
        map_bounds = gmm.bounds(margin=0.5)
    moved = propagate(state, delta, config, ss[0])
    nll = _particle_nlls(moved, scan, gmm, config, workers)
    weighted = _apply_weights(moved, nll, config)
    pose, cov, yaw_var = estimate(weighted)
    ess = effective_sample_size(weighted.weights)
    n_modify = deprivation_reset_count(weighted)
    recovered = recover_deprivation(weighted, config, map_bounds, ss[1])
    do_resample = (
        config.ess_threshold is None or ess <= config.ess_threshold * len(weighted)
    )
    new_state = resample(recovered, config, ss[2]) if do_resample else recovered
    info = StepInfo(
        pose=pose,
        position_covariance=cov,
        yaw_variance=yaw_var,
        mean_nll=float(nll.mean()),
        min_nll=float(nll.min()),
        ess=ess,
        n_modify=n_modify,
        w_slow=weighted.w_slow,
        w_fast=weighted.w_fast,
        degenerate_weights=weighted.degenerate_weights,
        resampled=do_resample,
    )
    return new_state, info
