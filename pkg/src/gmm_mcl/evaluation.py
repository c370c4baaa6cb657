"""Metrics and experiment harnesses: trajectory RMSE, Gaussian belief fits,
KL-divergence sensitivity sweeps, and stage timing benchmarks.

All sweep and benchmark outputs are plot-ready CSV tables with documented
headers; trials derive their seeds from a single root seed so every table is
reproducible.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, replace

import numpy as np

from .gmm_map import COV_EIGENVALUE_FLOOR, GmmMap, PointCloud, fit_em
from .likelihood import DepthImage, compute_memberships, scan_nll_approx, scan_nll_full
from .particle_filter import (
    FilterConfig,
    FilterState,
    OdometryDelta,
    StepInfo,
    estimate,
    init_uniform,
    propagate,
    resample,
    step,
)
from .projection import CameraIntrinsics, Pose
from .sim import Scene, Trajectory, odometry_from_trajectory, render_depth


@dataclass(frozen=True)
class GaussianFit:
    """Unimodal Gaussian summary of a particle belief (position marginal)."""

    mean: np.ndarray
    covariance: np.ndarray
    yaw: float | None = None
    degenerate: bool = False

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        cov = np.asarray(self.covariance, dtype=float)
        if mean.shape != (3,) or cov.shape != (3, 3):
            raise ValueError("GaussianFit needs a 3-vector mean and 3x3 covariance")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)


def fit_gaussian(state: FilterState) -> GaussianFit:
    """Weighted Gaussian fit to the particle positions.

    The covariance is lifted to the PSD floor; a fully collapsed particle set
    yields the floor covariance with the degenerate flag set.
    """
    if len(state) < 4:
        raise ValueError("need at least 4 particles for a covariance fit")
    pose, cov, _ = estimate(state)
    spread = float(np.abs(state.positions - pose.position).max())
    degenerate = spread == 0.0
    eig = np.linalg.eigvalsh(0.5 * (cov + cov.T))
    if eig[0] < COV_EIGENVALUE_FLOOR:
        cov = cov + (COV_EIGENVALUE_FLOOR - min(float(eig[0]), 0.0)) * np.eye(3)
    return GaussianFit(mean=pose.position, covariance=cov, yaw=pose.yaw, degenerate=degenerate)


def kl_gaussian(p: GaussianFit, q: GaussianFit) -> float:
    """Closed-form KL divergence KL(p || q) between 3D Gaussians, in nats."""
    try:
        chol_q = np.linalg.cholesky(q.covariance)
    except np.linalg.LinAlgError as exc:
        raise ValueError("q covariance is singular") from exc
    k = 3
    sol = np.linalg.solve(chol_q, np.linalg.solve(chol_q, p.covariance).T)
    trace_term = float(np.trace(sol))
    diff = q.mean - p.mean
    y = np.linalg.solve(chol_q, diff)
    maha = float(y @ y)
    logdet_q = 2.0 * float(np.log(np.diag(chol_q)).sum())
    sign, logdet_p = np.linalg.slogdet(p.covariance)
    if sign <= 0:
        raise ValueError("p covariance is not positive definite")
    return max(0.0, 0.5 * (trace_term + maha - k + logdet_q - float(logdet_p)))


@dataclass(frozen=True)
class RmseResult:
    """Aggregate RMSE (meters) plus the matched per-step error series."""

    rmse: float
    timestamps: np.ndarray
    errors: np.ndarray


def rmse(estimates: Trajectory, truth: Trajectory, max_dt: float = 0.02) -> RmseResult:
    """Position RMSE between two trajectories.

    Estimate timestamps are matched to their nearest ground-truth timestamp;
    pairs further apart than ``max_dt`` seconds are dropped. Raises if no
    pair survives.
    """
    if len(estimates) == 0 or len(truth) == 0:
        raise ValueError("cannot align empty trajectories")
    t_est = estimates.timestamps
    t_true = truth.timestamps
    idx = np.searchsorted(t_true, t_est)
    idx = np.clip(idx, 0, len(t_true) - 1)
    prev = np.clip(idx - 1, 0, len(t_true) - 1)
    use_prev = np.abs(t_true[prev] - t_est) <= np.abs(t_true[idx] - t_est)
    nearest = np.where(use_prev, prev, idx)
    ok = np.abs(t_true[nearest] - t_est) <= max_dt
    if not np.any(ok):
        raise ValueError("no timestamp overlap within the alignment window")
    est_pos = estimates.positions()[ok]
    true_pos = truth.positions()[nearest[ok]]
    errors = np.linalg.norm(est_pos - true_pos, axis=1)
    return RmseResult(
        rmse=float(np.sqrt(np.mean(errors**2))),
        timestamps=t_est[ok],
        errors=errors,
    )


# ---------------------------------------------------------------------------
# Closed-loop execution helper shared by sweeps, benchmarks, and the CLI
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunResult:
    estimates: Trajectory
    infos: tuple


def run_filter(
    gmm: GmmMap,
    scans,
    deltas: list[OdometryDelta],
    timestamps: np.ndarray,
    config: FilterConfig,
    init_center: Pose,
    init_extent,
    init_yaw_range: float,
    seed,
    map_bounds=None,
    workers: int = 1,
) -> RunResult:
    """Run the filter over a scan/odometry sequence.

    ``scans`` is indexable by step (list or callable); scan k pairs with
    ``deltas[k-1]`` for k = 1..len(deltas). Estimates are stamped with
    ``timestamps[1:]``. Per-step seeds derive from ``seed``.
    """
    get_scan = scans if callable(scans) else scans.__getitem__
    n_steps = len(deltas)
    root = np.random.SeedSequence(seed)
    init_seed, *step_seeds = root.spawn(n_steps + 1)
    state = init_uniform(config, init_center, init_extent, init_yaw_range, init_seed)
    est_poses = []
    infos = []
    for k in range(n_steps):
        state, info = step(
            state,
            deltas[k],
            get_scan(k + 1),
            gmm,
            config,
            step_seeds[k],
            map_bounds=map_bounds,
            workers=workers,
        )
        est_poses.append(info.pose)
        infos.append(info)
    est = Trajectory(timestamps=np.asarray(timestamps[1 : n_steps + 1]), poses=tuple(est_poses))
    return RunResult(estimates=est, infos=tuple(infos))


# ---------------------------------------------------------------------------
# KL-divergence sensitivity sweep
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepScenario:
    """World shared by every run of a sensitivity sweep.

    ``cloud`` is only needed when sweeping component counts (maps are
    refitted per count). The reference configuration is the largest value of
    the swept quantity; its first trial serves as the ground-truth filter.
    """

    scene: Scene
    gmm: GmmMap
    trajectory: Trajectory
    intrinsics: CameraIntrinsics
    config: FilterConfig
    init_center: Pose
    init_extent: tuple = (1.0, 1.0, 1.0)
    init_yaw_range: float = math.pi / 2
    odometry_sigma_translation: float = 0.0
    odometry_sigma_yaw: float = 0.0
    max_range: float = 20.0
    cloud: PointCloud | None = None
    fit_iters: int = 30
    convergence_cov_trace: float = 0.05
    workers: int = 1


@dataclass(frozen=True)
class SweepRow:
    """One swept setting: per-trial KL aggregates against the reference."""

    kind: str
    value: int
    kl_values: np.ndarray
    kl_mean: float
    kl_variance: float
    skipped: bool = False


def _render_sequence(scenario: SweepScenario):
    scans = [
        render_depth(scenario.scene, pose, scenario.intrinsics, scenario.max_range)
        for pose in scenario.trajectory.poses
    ]
    return scans


def _run_fits(scenario: SweepScenario, gmm: GmmMap, n_particles: int, scans, deltas, seed):
    config = FilterConfig(
        n_particles=n_particles,
        sigma_translation=scenario.config.sigma_translation,
        sigma_yaw=scenario.config.sigma_yaw,
        alpha_slow=scenario.config.alpha_slow,
        alpha_fast=scenario.config.alpha_fast,
        n_groups=min(scenario.config.n_groups, n_particles),
        patch_size=scenario.config.patch_size,
        stride=scenario.config.stride,
    )
    result = run_filter(
        gmm,
        scans,
        deltas,
        scenario.trajectory.timestamps,
        config,
        scenario.init_center,
        scenario.init_extent,
        scenario.init_yaw_range,
        seed,
        workers=scenario.workers,
    )
    fits = []
    for info in result.infos:
        cov = info.position_covariance
        eig = np.linalg.eigvalsh(0.5 * (cov + cov.T))
        if eig[0] < COV_EIGENVALUE_FLOOR:
            cov = cov + (COV_EIGENVALUE_FLOOR - min(float(eig[0]), 0.0)) * np.eye(3)
        fits.append(GaussianFit(mean=info.pose.position, covariance=cov, yaw=info.pose.yaw))
    return fits


def sensitivity_sweep(
    scenario: SweepScenario,
    particle_counts: list[int],
    component_counts: list[int],
    trials: int,
    seed,
    out_csv=None,
) -> list[SweepRow]:
    """Variance of the KL divergence to a reference filter across trials.

    For each swept particle count (with the scenario map) and component
    count (map refitted from the scenario cloud), ``trials`` filter runs are
    compared step-by-step against the reference run (first trial of the
    largest setting) over the reference's post-convergence steps; each trial
    contributes its mean KL, and the row reports the variance across trials.
    Settings are skipped (flagged) when the reference never converges.
    """
    if trials < 1:
        raise ValueError("need at least one trial")
    root = int(np.random.SeedSequence(seed).generate_state(1)[0])
    scans = _render_sequence(scenario)
    deltas = odometry_from_trajectory(
        scenario.trajectory,
        scenario.odometry_sigma_translation,
        scenario.odometry_sigma_yaw,
        seed=np.random.SeedSequence(entropy=root, spawn_key=(9,)),
    )

    rows: list[SweepRow] = []

    def seed_for(kind_id: int, value: int, trial: int):
        return np.random.SeedSequence(entropy=root, spawn_key=(kind_id, value, trial))

    def sweep(kind: str, kind_id: int, values: list[int], map_for, n_for):
        if not values:
            return
        ref_value = max(values)
        ref_fits = _run_fits(
            scenario,
            map_for(ref_value),
            n_for(ref_value),
            scans,
            deltas,
            seed_for(kind_id, ref_value, 0),
        )
        gate = None
        for k, fit in enumerate(ref_fits):
            if float(np.trace(fit.covariance)) < scenario.convergence_cov_trace:
                gate = k
                break
        if gate is None:
            for value in sorted(values):
                rows.append(
                    SweepRow(
                        kind=kind,
                        value=value,
                        kl_values=np.empty(0),
                        kl_mean=float("nan"),
                        kl_variance=float("nan"),
                        skipped=True,
                    )
                )
            return
        matched = range(gate, len(ref_fits))
        for value in sorted(values):
            gmm_v = map_for(value)
            kls = np.empty(trials)
            for trial in range(trials):
                if value == ref_value and trial == 0:
                    fits = ref_fits
                else:
                    fits = _run_fits(
                        scenario, gmm_v, n_for(value), scans, deltas, seed_for(kind_id, value, trial)
                    )
                kls[trial] = float(
                    np.mean([kl_gaussian(fits[k], ref_fits[k]) for k in matched])
                )
            rows.append(
                SweepRow(
                    kind=kind,
                    value=value,
                    kl_values=kls,
                    kl_mean=float(kls.mean()),
                    kl_variance=float(kls.var(ddof=1)) if trials > 1 else 0.0,
                )
            )

    sweep("particles", 1, list(particle_counts), lambda _v: scenario.gmm, lambda v: v)

    if component_counts:
        if scenario.cloud is None:
            raise ValueError("component sweep needs the scenario point cloud")
        fitted: dict[int, GmmMap] = {}

        def map_for(m: int) -> GmmMap:
            if m not in fitted:
                fitted[m] = fit_em(
                    scenario.cloud,
                    m,
                    seed=np.random.SeedSequence(entropy=root, spawn_key=(2, m)),
                    max_iters=scenario.fit_iters,
                )
            return fitted[m]

        sweep(
            "components",
            3,
            list(component_counts),
            map_for,
            lambda _v: scenario.config.n_particles,
        )

    if out_csv is not None:
        write_sweep_csv(rows, out_csv)
    return rows


def write_sweep_csv(rows: list[SweepRow], path) -> None:
    """Columns: kind, value, trials, kl_mean, kl_variance, log10_kl_variance,
    skipped."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["kind", "value", "trials", "kl_mean", "kl_variance", "log10_kl_variance", "skipped"]
        )
        for row in rows:
            logv = (
                math.log10(row.kl_variance)
                if row.kl_variance and row.kl_variance > 0
                else float("-inf")
            )
            writer.writerow(
                [
                    row.kind,
                    row.value,
                    len(row.kl_values),
                    f"{row.kl_mean:.9g}",
                    f"{row.kl_variance:.9g}",
                    f"{logv:.9g}",
                    int(row.skipped),
                ]
            )


# ---------------------------------------------------------------------------
# Stage timing benchmark
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BenchRow:
    n_particles: int
    ms_propagate: float
    ms_membership: float
    ms_likelihood: float
    ms_resample: float
    steps_per_sec: float


@dataclass(frozen=True)
class BenchReport:
    rows: tuple
    approx_ms: float
    full_ms: float
    stride: int
    n_components: int


def bench(
    gmm: GmmMap,
    scan: DepthImage,
    config: FilterConfig,
    particle_counts: list[int],
    steps: int = 100,
    seed=0,
) -> BenchReport:
    """Wall-clock per filter stage, repeated over ``steps`` iterations.

    Membership and likelihood are timed through the modular evaluation path
    so their shares are observable separately. The report also carries a
    paired single-pose timing of the patch-restricted versus exhaustive
    likelihood at equal stride.
    """
    lo, hi = gmm.bounds(margin=0.5)
    center = Pose(position=0.5 * (lo + hi), yaw=0.0)
    zero_delta = OdometryDelta(
        delta_translation=np.zeros(3), delta_yaw=0.0, pitch=center.pitch, roll=center.roll
    )
    rows = []
    for n in particle_counts:
        cfg = FilterConfig(
            n_particles=n,
            sigma_translation=config.sigma_translation,
            sigma_yaw=config.sigma_yaw,
            alpha_slow=config.alpha_slow,
            alpha_fast=config.alpha_fast,
            n_groups=min(config.n_groups, n),
            patch_size=config.patch_size,
            stride=config.stride,
        )
        ss = np.random.SeedSequence(seed).spawn(steps + 1)
        state = init_uniform(cfg, center, extent=(hi - lo), yaw_range=math.pi, seed=ss[0])
        t_prop = t_mem = t_like = t_res = 0.0
        total0 = time.perf_counter()
        for k in range(steps):
            t0 = time.perf_counter()
            state = propagate(state, zero_delta, cfg, ss[k + 1])
            t1 = time.perf_counter()
            poses = [
                Pose(state.positions[i], float(state.yaws[i]), state.pitch, state.roll)
                for i in range(n)
            ]
            tables = [
                compute_memberships(gmm, pose, scan.intrinsics, cfg.patch_size) for pose in poses
            ]
            t2 = time.perf_counter()
            nll = np.array(
                [
                    scan_nll_approx(scan, gmm, pose, table, cfg.stride)
                    for pose, table in zip(poses, tables)
                ]
            )
            nll = np.maximum(nll, 1e-3)
            inv = 1.0 / nll
            state = replace(state, weights=inv / inv.sum())
            t3 = time.perf_counter()
            state = resample(state, cfg, ss[k + 1].spawn(1)[0])
            t4 = time.perf_counter()
            t_prop += t1 - t0
            t_mem += t2 - t1
            t_like += t3 - t2
            t_res += t4 - t3
        total = time.perf_counter() - total0
        rows.append(
            BenchRow(
                n_particles=n,
                ms_propagate=1e3 * t_prop / steps,
                ms_membership=1e3 * t_mem / steps,
                ms_likelihood=1e3 * t_like / steps,
                ms_resample=1e3 * t_res / steps,
                steps_per_sec=steps / total,
            )
        )

    # Paired approximate-versus-exhaustive likelihood timing at one pose.
    table = compute_memberships(gmm, center, scan.intrinsics, config.patch_size)
    scan_nll_approx(scan, gmm, center, table, config.stride)  # warm any lazy compilation
    scan_nll_full(scan, gmm, center, config.stride)
    reps = 5
    t0 = time.perf_counter()
    for _ in range(reps):
        compute_memberships(gmm, center, scan.intrinsics, config.patch_size)
        scan_nll_approx(scan, gmm, center, table, config.stride)
    approx_ms = 1e3 * (time.perf_counter() - t0) / reps
    t0 = time.perf_counter()
    for _ in range(reps):
        scan_nll_full(scan, gmm, center, config.stride)
    full_ms = 1e3 * (time.perf_counter() - t0) / reps
    return BenchReport(
        rows=tuple(rows),
        approx_ms=approx_ms,
        full_ms=full_ms,
        stride=config.stride,
        n_components=len(gmm),
    )


def write_bench_csv(report: BenchReport, path) -> None:
    """Columns: n_particles, ms_propagate, ms_membership, ms_likelihood,
    ms_resample, steps_per_sec; trailing rows carry the paired
    approximate/exhaustive likelihood timings."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "n_particles",
                "ms_propagate",
                "ms_membership",
                "ms_likelihood",
                "ms_resample",
                "steps_per_sec",
            ]
        )
        for row in report.rows:
            writer.writerow(
                [
                    row.n_particles,
                    f"{row.ms_propagate:.6g}",
                    f"{row.ms_membership:.6g}",
                    f"{row.ms_likelihood:.6g}",
                    f"{row.ms_resample:.6g}",
                    f"{row.steps_per_sec:.6g}",
                ]
            )
        writer.writerow(["approx_likelihood_ms", f"{report.approx_ms:.6g}", "", "", "", ""])
        writer.writerow(["full_likelihood_ms", f"{report.full_ms:.6g}", "", "", "", ""])
