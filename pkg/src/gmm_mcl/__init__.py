"""Monte-Carlo localization of a depth camera in a Gaussian-mixture map.

The package is organized around the localization pipeline: ``gmm_map`` holds
the environment model, ``projection`` the camera geometry, ``likelihood`` the
patch-restricted scan scoring, ``particle_filter`` the multi-hypothesis
tracker, ``sim`` synthetic worlds for closed-loop verification, ``datasets``
recorded-data ingestion, ``evaluation`` metrics and experiment harnesses,
and ``cli`` the command-line front end.
"""

from .gmm_map import (
    GmmComponent,
    GmmMap,
    MapFormatError,
    PointCloud,
    density_at,
    deserialize,
    fit_em,
    load_point_cloud,
    memory_footprint,
    sample_points,
    serialize,
)
from .likelihood import (
    DepthImage,
    InflatedEllipse,
    MembershipTable,
    compute_memberships,
    ellipse_from_gaussian,
    scan_nll_approx,
    scan_nll_full,
)
from .particle_filter import (
    FilterConfig,
    FilterState,
    OdometryDelta,
    Particle,
    StepInfo,
    compute_weights,
    estimate,
    init_uniform,
    propagate,
    recover_deprivation,
    resample,
    step,
)
from .projection import (
    BehindCameraError,
    CameraIntrinsics,
    Gaussian2D,
    Pose,
    back_project,
    project_component,
    project_point,
    projection_jacobian,
    to_camera_frame,
)
from .sim import Scene, Trajectory, generate_trajectory, render_depth, scene_to_cloud

__version__ = "0.1.0"

__all__ = [
    "BehindCameraError",
    "CameraIntrinsics",
    "DepthImage",
    "FilterConfig",
    "FilterState",
    "Gaussian2D",
    "GmmComponent",
    "GmmMap",
    "InflatedEllipse",
    "MapFormatError",
    "MembershipTable",
    "OdometryDelta",
    "Particle",
    "PointCloud",
    "Pose",
    "Scene",
    "StepInfo",
    "Trajectory",
    "back_project",
    "compute_memberships",
    "compute_weights",
    "density_at",
    "deserialize",
    "ellipse_from_gaussian",
    "estimate",
    "fit_em",
    "generate_trajectory",
    "init_uniform",
    "load_point_cloud",
    "memory_footprint",
    "project_component",
    "project_point",
    "projection_jacobian",
    "propagate",
    "recover_deprivation",
    "render_depth",
    "resample",
    "sample_points",
    "scan_nll_approx",
    "scan_nll_full",
    "scene_to_cloud",
    "serialize",
    "step",
    "to_camera_frame",
]
