"""Command-line pipeline: map fitting, localization, simulation, evaluation.

Subcommands::

    gmm-mcl fit-map CLOUD -m M --seed S --out MAP
    gmm-mcl localize --config RUN.cfg
    gmm-mcl simulate --config SIM.cfg
    gmm-mcl eval EST TRUTH [--out CSV]
    gmm-mcl sweep --config SWEEP.cfg
    gmm-mcl bench --config BENCH.cfg

Config files are flat ``key = value`` text with '#' comments; command-line
flags override file values and the ``GMM_MCL_WORKERS`` environment variable
overrides the configured worker count. Seeds are mandatory in configs so
experiments stay citable. Exit codes: 0 success, 1 runtime failure, 2
usage/config error. Given identical config and seed, all file outputs are
byte-identical across runs.
"""

from __future__ import annotations

import argparse
import math
import os
import sys

import numpy as np

from . import datasets, evaluation, sim
from .gmm_map import (
    GmmMap,
    deserialize,
    fit_em,
    load_point_cloud,
    memory_footprint,
    sample_points,
    serialize,
)
from .particle_filter import FilterConfig
from .projection import CameraIntrinsics, Pose
from .sim import Scene, Trajectory, generate_trajectory, load_scene, render_depth


class ConfigError(ValueError):
    """Invalid or incomplete run configuration (exit code 2)."""


def parse_config(path) -> dict:
    """Flat key = value file with '#' comments."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = text.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def _require(cfg: dict, key: str) -> str:
    if key not in cfg or cfg[key] == "":
        raise ConfigError(f"missing required config key '{key}'")
    return cfg[key]


def _floats(text: str, n: int, what: str) -> list[float]:
    parts = text.split()
    if len(parts) != n:
        raise ConfigError(f"{what}: expected {n} values, got {len(parts)}")
    try:
        return [float(p) for p in parts]
    except ValueError as exc:
        raise ConfigError(f"{what}: non-numeric value") from exc


def _intrinsics_from(cfg: dict) -> CameraIntrinsics:
    vals = _floats(_require(cfg, "intrinsics"), 5, "intrinsics")
    try:
        return CameraIntrinsics(
            f=vals[0], cx=vals[1], cy=vals[2], width=int(vals[3]), height=int(vals[4])
        )
    except ValueError as exc:
        raise ConfigError(f"intrinsics: {exc}") from exc


def _existing(cfg: dict, key: str) -> str:
    path = _require(cfg, key)
    if not os.path.exists(path):
        raise ConfigError(f"{key}: no such file: {path}")
    return path


def _filter_config_from(cfg: dict) -> FilterConfig:
    defaults = FilterConfig()
    try:
        return FilterConfig(
            n_particles=int(cfg.get("n_particles", defaults.n_particles)),
            sigma_translation=float(cfg.get("sigma_translation", defaults.sigma_translation)),
            sigma_yaw=float(cfg.get("sigma_yaw", defaults.sigma_yaw)),
            alpha_slow=float(cfg.get("alpha_slow", defaults.alpha_slow)),
            alpha_fast=float(cfg.get("alpha_fast", defaults.alpha_fast)),
            n_groups=int(cfg.get("n_groups", defaults.n_groups)),
            patch_size=int(cfg.get("patch_size", defaults.patch_size)),
            stride=int(cfg.get("stride", defaults.stride)),
            ess_threshold=(
                float(cfg["ess_threshold"]) if cfg.get("ess_threshold") else None
            ),
        )
    except ValueError as exc:
        raise ConfigError(f"filter configuration: {exc}") from exc


def _seed_from(cfg: dict) -> int:
    try:
        return int(_require(cfg, "seed"))
    except ValueError as exc:
        raise ConfigError("seed must be an integer") from exc


def _workers_from(cfg: dict, flag_value) -> int:
    workers = int(cfg.get("workers", 0))
    env = os.environ.get("GMM_MCL_WORKERS")
    if env:
        try:
            workers = int(env)
        except ValueError as exc:
            raise ConfigError("GMM_MCL_WORKERS must be an integer") from exc
    if flag_value is not None:
        workers = flag_value
    if workers <= 0:
        workers = os.cpu_count() or 1
    return workers


def _trajectory_from(cfg: dict) -> Trajectory:
    kind = _require(cfg, "trajectory_kind")
    rate = float(cfg.get("rate", 30.0))
    params: dict = {
        "steps": int(_require(cfg, "traj_steps")),
        "speed": float(cfg.get("traj_speed", 0.5)),
    }
    if "traj_pitch" in cfg:
        params["pitch"] = float(cfg["traj_pitch"])
    if "traj_roll" in cfg:
        params["roll"] = float(cfg["traj_roll"])
    if kind in ("orbit", "figure-eight"):
        params["center"] = _floats(_require(cfg, "traj_center"), 3, "traj_center")
        params["radius"] = float(_require(cfg, "traj_radius"))
        if "traj_phase" in cfg:
            params["phase"] = float(cfg["traj_phase"])
    elif kind == "corridor":
        params["start"] = _floats(_require(cfg, "traj_start"), 3, "traj_start")
        params["end"] = _floats(_require(cfg, "traj_end"), 3, "traj_end")
    else:
        raise ConfigError(f"unknown trajectory_kind {kind!r}")
    try:
        return generate_trajectory(kind, params, rate)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"trajectory: {exc}") from exc


def _read_map(path: str) -> GmmMap:
    with open(path, "rb") as fh:
        return deserialize(fh.read())


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_fit_map(args) -> int:
    if not os.path.exists(args.cloud):
        print(f"error: no such file: {args.cloud}", file=sys.stderr)
        return 2
    cloud = load_point_cloud(args.cloud)
    gmm = fit_em(cloud, args.components, seed=args.seed, max_iters=args.max_iters)
    data = serialize(gmm)
    with open(args.out, "wb") as fh:
        fh.write(data)
    final_ll = float(gmm.fit_history[-1]) if gmm.fit_history is not None else float("nan")
    print(
        f"fitted {args.components} components to {len(cloud)} points; "
        f"payload {memory_footprint(gmm)} bytes ({len(data)} with header); "
        f"final log-likelihood {final_ll:.6g}"
    )
    return 0


def _localize_inputs(cfg: dict):
    """Resolve scans, odometry deltas, and timestamps for a localize run."""
    seed = _seed_from(cfg)
    odo_sigma_t = float(cfg.get("odometry_sigma_translation", 0.0))
    odo_sigma_y = float(cfg.get("odometry_sigma_yaw", 0.0))
    noise_seed = np.random.SeedSequence(entropy=seed, spawn_key=(101,))

    if "manifest" in cfg and "scene" in cfg:
        raise ConfigError("config must set either 'manifest' or 'scene', not both")
    if "manifest" in cfg:
        manifest = datasets.read_manifest(_existing(cfg, "manifest"))
        if "odometry" in cfg:
            odo_traj = datasets.read_trajectory(_existing(cfg, "odometry"))
        else:
            gt = manifest.ground_truth_path()
            if gt is None or not os.path.exists(gt):
                raise ConfigError("manifest has no ground truth; set 'odometry'")
            odo_traj = datasets.read_trajectory(gt)
        if len(manifest) != len(odo_traj):
            raise ConfigError(
                f"manifest has {len(manifest)} images but odometry has "
                f"{len(odo_traj)} poses"
            )
        scans = manifest.read_image
        timestamps = np.array([t for t, _ in manifest.entries])
        n_poses = len(odo_traj)
    elif "scene" in cfg:
        scene = load_scene(_existing(cfg, "scene"))
        intr = _intrinsics_from(cfg)
        max_range = float(cfg.get("max_range", 20.0))
        odo_traj = _trajectory_from(cfg)
        scans = lambda k: render_depth(scene, odo_traj.poses[k], intr, max_range)
        timestamps = odo_traj.timestamps
        n_poses = len(odo_traj)
    else:
        raise ConfigError("config needs 'manifest' (replay) or 'scene' (simulation)")

    deltas = (
        sim.odometry_from_trajectory(odo_traj, odo_sigma_t, odo_sigma_y, seed=noise_seed)
        if n_poses >= 2
        else []
    )
    max_steps = int(cfg.get("max_steps", 0))
    if max_steps > 0:
        deltas = deltas[:max_steps]
    return scans, deltas, timestamps, odo_traj


def cmd_localize(args) -> int:
    cfg = parse_config(args.config)
    gmm = _read_map(_existing(cfg, "map"))
    fconfig = _filter_config_from(cfg)
    seed = _seed_from(cfg)
    workers = _workers_from(cfg, args.workers)
    out_traj = _require(cfg, "out_trajectory")
    out_metrics = _require(cfg, "out_metrics")
    scans, deltas, timestamps, odo_traj = _localize_inputs(cfg)

    if not deltas:
        datasets.write_trajectory(Trajectory(timestamps=np.empty(0), poses=()), out_traj)
        with open(out_metrics, "w", encoding="utf-8") as fh:
            fh.write(_METRICS_HEADER)
        print("empty sequence: wrote empty outputs")
        return 0

    init_spec = cfg.get("init_center", "auto")
    if init_spec == "auto":
        init_center = odo_traj.poses[0]
    else:
        vals = _floats(init_spec, 4, "init_center")
        init_center = Pose(
            position=np.array(vals[:3]),
            yaw=vals[3],
            pitch=odo_traj.poses[0].pitch,
            roll=odo_traj.poses[0].roll,
        )
    init_extent = _floats(cfg.get("init_extent", "4 4 4"), 3, "init_extent")
    init_yaw_range = float(cfg.get("init_yaw_range", math.pi))

    result = evaluation.run_filter(
        gmm,
        scans,
        deltas,
        timestamps,
        fconfig,
        init_center,
        init_extent,
        init_yaw_range,
        seed,
        workers=workers,
    )
    datasets.write_trajectory(result.estimates, out_traj)
    _write_metrics(result, out_metrics)
    last = result.estimates.poses[-1]
    print(
        f"localized {len(deltas)} steps; final estimate "
        f"({last.position[0]:.3f}, {last.position[1]:.3f}, {last.position[2]:.3f}), "
        f"yaw {last.yaw:.3f}"
    )
    return 0


_METRICS_HEADER = (
    "step,timestamp,x,y,z,yaw,mean_nll,min_nll,ess,n_modify,deprivation,"
    "w_slow,w_fast,degenerate,resampled,cov_trace\n"
)


def _write_metrics(result: evaluation.RunResult, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_METRICS_HEADER)
        for k, (t, info) in enumerate(zip(result.estimates.timestamps, result.infos)):
            p = info.pose
            fh.write(
                f"{k},{t:.9g},{p.position[0]:.9g},{p.position[1]:.9g},"
                f"{p.position[2]:.9g},{p.yaw:.9g},{info.mean_nll:.9g},"
                f"{info.min_nll:.9g},{info.ess:.9g},{info.n_modify},"
                f"{int(info.n_modify > 0)},{info.w_slow:.9g},{info.w_fast:.9g},"
                f"{int(info.degenerate_weights)},{int(info.resampled)},"
                f"{float(np.trace(info.position_covariance)):.9g}\n"
            )


def cmd_simulate(args) -> int:
    cfg = parse_config(args.config)
    scene = load_scene(_existing(cfg, "scene"))
    intr = _intrinsics_from(cfg)
    seed = _seed_from(cfg)
    out_dir = _require(cfg, "out_dir")
    scale = int(cfg.get("depth_scale", datasets.DEFAULT_DEPTH_SCALE))
    max_range = float(cfg.get("max_range", 20.0))
    depth_noise = float(cfg.get("depth_noise", 0.0))
    cloud_density = float(cfg.get("cloud_density", 0.0))
    traj = _trajectory_from(cfg)

    os.makedirs(out_dir, exist_ok=True)
    entries = []
    noise_seeds = np.random.SeedSequence(entropy=seed, spawn_key=(7,)).spawn(len(traj))
    for k, (t, pose) in enumerate(zip(traj.timestamps, traj.poses)):
        image = render_depth(
            scene, pose, intr, max_range, noise_sigma=depth_noise, seed=noise_seeds[k]
        )
        rel = f"depth_{k:06d}.png"
        datasets.write_depth_image(image, os.path.join(out_dir, rel), scale)
        entries.append((t, rel))
    datasets.write_trajectory(traj, os.path.join(out_dir, "groundtruth.txt"))
    manifest = datasets.SequenceManifest(
        entries=tuple(entries),
        scale=scale,
        intrinsics=intr,
        ground_truth="groundtruth.txt",
        base_dir=out_dir,
    )
    datasets.write_manifest(manifest, os.path.join(out_dir, "manifest.txt"))
    if cloud_density > 0:
        cloud = sim.scene_to_cloud(
            scene, cloud_density, seed=np.random.SeedSequence(entropy=seed, spawn_key=(8,))
        )
        from .gmm_map import save_point_cloud_xyz

        save_point_cloud_xyz(cloud, os.path.join(out_dir, "cloud.xyz"))
    print(f"simulated {len(traj)} frames into {out_dir}")
    return 0


def cmd_eval(args) -> int:
    est = datasets.read_trajectory(args.estimate)
    truth = datasets.read_trajectory(args.truth)
    result = evaluation.rmse(est, truth, max_dt=args.max_dt)
    print(f"RMSE: {result.rmse:.6g} m over {len(result.errors)} matched poses")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("timestamp,error_m\n")
            for t, e in zip(result.timestamps, result.errors):
                fh.write(f"{t:.9g},{e:.9g}\n")
    return 0


def cmd_sweep(args) -> int:
    cfg = parse_config(args.config)
    scene = load_scene(_existing(cfg, "scene"))
    intr = _intrinsics_from(cfg)
    seed = _seed_from(cfg)
    out = _require(cfg, "out")
    traj = _trajectory_from(cfg)
    fconfig = _filter_config_from(cfg)
    trials = int(cfg.get("trials", 5))
    particle_counts = [int(v) for v in cfg.get("particle_counts", "").split()]
    component_counts = [int(v) for v in cfg.get("component_counts", "").split()]
    if not particle_counts and not component_counts:
        raise ConfigError("sweep needs particle_counts and/or component_counts")

    density = float(cfg.get("cloud_density", 300.0))
    cloud = sim.scene_to_cloud(
        scene, density, seed=np.random.SeedSequence(entropy=seed, spawn_key=(1,))
    )
    if "map" in cfg:
        gmm = _read_map(_existing(cfg, "map"))
    else:
        m = int(cfg.get("map_components", 200))
        gmm = fit_em(
            cloud,
            m,
            seed=np.random.SeedSequence(entropy=seed, spawn_key=(2,)),
            max_iters=int(cfg.get("fit_iters", 30)),
        )

    scenario = evaluation.SweepScenario(
        scene=scene,
        gmm=gmm,
        trajectory=traj,
        intrinsics=intr,
        config=fconfig,
        init_center=traj.poses[0],
        init_extent=tuple(_floats(cfg.get("init_extent", "1 1 1"), 3, "init_extent")),
        init_yaw_range=float(cfg.get("init_yaw_range", math.pi / 2)),
        odometry_sigma_translation=float(cfg.get("odometry_sigma_translation", 0.0)),
        odometry_sigma_yaw=float(cfg.get("odometry_sigma_yaw", 0.0)),
        max_range=float(cfg.get("max_range", 20.0)),
        cloud=cloud,
        fit_iters=int(cfg.get("fit_iters", 30)),
        workers=_workers_from(cfg, args.workers),
    )
    rows = evaluation.sensitivity_sweep(
        scenario, particle_counts, component_counts, trials, seed, out_csv=out
    )
    skipped = [r for r in rows if r.skipped]
    for row in rows:
        print(
            f"{row.kind} {row.value}: mean KL {row.kl_mean:.4g}, "
            f"variance {row.kl_variance:.4g}" + (" [skipped]" if row.skipped else "")
        )
    if skipped:
        print("error: reference run diverged; settings were skipped", file=sys.stderr)
        return 1
    return 0


def cmd_bench(args) -> int:
    cfg = parse_config(args.config)
    gmm = _read_map(_existing(cfg, "map"))
    intr = _intrinsics_from(cfg)
    seed = _seed_from(cfg)
    out = _require(cfg, "out")
    fconfig = _filter_config_from(cfg)
    counts = [int(v) for v in _require(cfg, "particle_counts").split()]
    steps = int(cfg.get("steps", 100))
    max_range = float(cfg.get("max_range", 20.0))

    if "scene" in cfg:
        scene = load_scene(_existing(cfg, "scene"))
        if "bench_pose" in cfg:
            vals = _floats(cfg["bench_pose"], 4, "bench_pose")
            pose = Pose(position=np.array(vals[:3]), yaw=vals[3], roll=sim.LEVEL_ROLL)
        else:
            lo, hi = scene.bounds()
            pose = Pose(position=0.5 * (lo + hi), yaw=0.0, roll=sim.LEVEL_ROLL)
        scan = render_depth(scene, pose, intr, max_range)
    else:
        raise ConfigError("bench needs a 'scene' to render the probe scan from")

    report = evaluation.bench(gmm, scan, fconfig, counts, steps=steps, seed=seed)
    evaluation.write_bench_csv(report, out)
    for row in report.rows:
        total = row.ms_propagate + row.ms_membership + row.ms_likelihood + row.ms_resample
        print(
            f"N={row.n_particles}: propagate {row.ms_propagate:.2f} ms, "
            f"membership {row.ms_membership:.2f} ms, likelihood "
            f"{row.ms_likelihood:.2f} ms, resample {row.ms_resample:.2f} ms "
            f"({total:.2f} ms/step, {row.steps_per_sec:.2f} steps/s)"
        )
    print(
        f"approx likelihood {report.approx_ms:.2f} ms vs full {report.full_ms:.2f} ms "
        f"(M={report.n_components}, stride {report.stride})"
    )
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="gmm-mcl",
        description="Monte-Carlo localization in Gaussian-mixture maps",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit-map", help="fit a mixture map to a point cloud")
    p.add_argument("cloud", help="ASCII PLY or XYZ text point cloud")
    p.add_argument("-m", "--components", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-iters", type=int, default=100)
    p.set_defaults(func=cmd_fit_map)

    p = sub.add_parser("localize", help="run the filter over a sequence")
    p.add_argument("--config", required=True)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("simulate", help="render a synthetic depth sequence")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("eval", help="trajectory RMSE against ground truth")
    p.add_argument("estimate")
    p.add_argument("truth")
    p.add_argument("--out", default=None)
    p.add_argument("--max-dt", type=float, default=0.02)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="KL sensitivity sweep over N and M")
    p.add_argument("--config", required=True)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench", help="per-stage timing report")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_bench)

    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures map to exit code 1
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
