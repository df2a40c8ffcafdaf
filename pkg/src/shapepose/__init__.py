"""Multi-view, multi-person 3D pose reconstruction with a kinematic body prior."""

from .association import (
    InstanceProposal,
    JointCluster,
    ProposalConfig,
    associate,
    cluster_part,
    filter_cross_instance,
    generate_proposals,
)
from .body_model import (
    BodyParams,
    DampedGaussNewton,
    GradientStep,
    InsufficientTargets,
    UpdateRule,
    fit_body,
    forward_kinematics,
    shape_energy,
)
from .geometry import (
    CameraView,
    Detection2D,
    LimbAffinity,
    PoseEstimate,
    SkeletonTopology,
    ZeroDepth,
    default_skeleton,
    project,
)
from .pipeline import FrameResult, process_frame
from .refinement import RefineConfig, RefineResult, match_detections, refine_instance, reprojection_energy
from .synth import ConfigError, MetricsReport, SceneConfig, SceneTruth, evaluate, generate_scene
from .triangulation import (
    Candidate3D,
    CheiralityViolation,
    DegenerateRays,
    generate_candidates,
    triangulate_pair,
)

__all__ = [
    "BodyParams", "CameraView", "Candidate3D", "CheiralityViolation", "ConfigError", "DampedGaussNewton",
    "DegenerateRays", "Detection2D", "FrameResult", "GradientStep", "InstanceProposal", "InsufficientTargets",
    "JointCluster", "LimbAffinity", "MetricsReport", "PoseEstimate", "ProposalConfig", "RefineConfig",
    "RefineResult", "SceneConfig", "SceneTruth", "SkeletonTopology", "UpdateRule", "ZeroDepth", "associate",
    "cluster_part", "default_skeleton", "evaluate", "filter_cross_instance", "fit_body", "forward_kinematics",
    "generate_candidates", "generate_proposals", "generate_scene", "match_detections", "process_frame",
    "project", "refine_instance", "reprojection_energy", "shape_energy", "triangulate_pair",
]
