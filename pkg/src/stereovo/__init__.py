"""Uncertainty-weighted stereo visual odometry backend.

Closed-form propagation of 2D matching/depth uncertainty into full 3D
keypoint covariances, uncertainty-driven keypoint selection, and
covariance-weighted two-frame pose optimization, validated against Monte
Carlo oracles and synthetic scenes with known ground truth.
"""

from .errors import (
    ConfigError,
    DataFormatError,
    DegenerateGeometryError,
    InsufficientKeypointsError,
    NumericalError,
    StereoVoError,
)
from .evaluation import Trajectory, r_rel, read_tum, scale_align, t_rel, write_tum
from .frontend import (
    AnomalyRegion,
    FrameObservation,
    MotionSpec,
    NoiseModel,
    SceneConfig,
    Wall,
    generate_sequence,
    ingest_observations,
    write_observations,
)
from .geometry import (
    Landmark3D,
    PoseSE3,
    StereoCamera,
    backproject,
    project,
    se3_exp,
    se3_log,
    so3_exp,
    so3_log,
    transform_landmark,
)
from .mc import McReport, mc_depth_distribution, mc_projection_covariance
from .optimizer import (
    CovarianceMode,
    FramePairProblem,
    LMConfig,
    MatchedPair,
    PoseSolution,
    mahalanobis_cost,
    pair_covariance,
    solve_pose,
)
from .pipeline import KeypointMode, RunConfig, RunResult, ablate, run
from .selector import (
    DenseMaps,
    KeypointCandidate,
    SelectorConfig,
    geometry_filter,
    nms_filter,
    select,
    uncertainty_filter,
)
from .uncertainty import (
    DepthEstimate,
    DepthPatch,
    DisparityEstimate,
    PixelObservation,
    correct_depth_uncertainty,
    disparity_to_depth,
    project_covariance,
)

__version__ = "0.1.0"
