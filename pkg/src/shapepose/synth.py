"""Seeded synthetic multi-camera scenes and the evaluation metrics.

Scenes place body-model people on a ground disk, ring cameras around them,
and emit noisy detections, false positives and limb affinities. Evaluation
matches predicted instances to ground truth and scores joints at 0.2 m.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.transform import Rotation

from .body_model import BodyParams, forward_kinematics
from .geometry import (
    CameraView,
    Detection2D,
    LimbAffinity,
    PoseEstimate,
    SkeletonTopology,
    default_skeleton,
    project_many,
)

JOINT_THRESHOLD = 0.2
HIP_THRESHOLD = 0.2
NO_OVERLAP_COST = 1e6

# Per-joint uniform ranges (radians) for axis-angle components (x: lateral
# flexion axis, y: forward axis, z: vertical twist). Unlisted joints stay 0.
POSE_RANGES: dict[str, tuple[tuple[float, float], ...]] = {
    "neck": ((-0.2, 0.3), (-0.15, 0.15), (-0.3, 0.3)),
    "l_shoulder": ((-0.6, 0.9), (-0.9, 0.1), (-0.3, 0.3)),
    "l_elbow": ((0.0, 0.5), (0.0, 0.0), (0.0, 0.0)),
    "r_shoulder": ((-0.6, 0.9), (-0.1, 0.9), (-0.3, 0.3)),
    "r_elbow": ((0.0, 0.5), (0.0, 0.0), (0.0, 0.0)),
    "l_hip": ((-0.5, 0.4), (-0.3, 0.1), (-0.2, 0.2)),
    "l_knee": ((-0.6, 0.0), (0.0, 0.0), (0.0, 0.0)),
    "r_hip": ((-0.5, 0.4), (-0.1, 0.3), (-0.2, 0.2)),
    "r_knee": ((-0.6, 0.0), (0.0, 0.0), (0.0, 0.0)),
}
LOG_SCALE_RANGE = 0.15
ROOT_TILT = 0.1
GROUND_CLEARANCE = 0.08


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    """Synthetic scene parameters. Lengths in meters, noise in pixels.

    ``hip_views`` keeps each person's hip in exactly that many random views
    (None: no restriction). ``occluded_parts`` names parts removed from every
    view. ``low_conf_rate`` is the per-person, per-joint chance that all of a
    joint's detections are low-confidence (uniform 0.05-0.3) with
    ``low_conf_sigma`` pixel noise.
    """

    n_persons: int = 4
    n_cameras: int = 6
    n_frames: int = 1
    camera_radius: float = 5.0
    camera_height: float = 2.5
    look_at_height: float = 1.0
    focal: float = 1000.0
    width: int = 1280
    height: int = 960
    area_radius: float = 1.5
    min_separation: float = 0.8
    pixel_sigma: float = 0.0
    p_miss: float = 0.0
    p_fp: float = 0.0
    low_conf_rate: float = 0.0
    low_conf_sigma: float = 6.0
    hip_views: int | None = None
    occluded_parts: tuple[str, ...] = ()
    seed: int = 0
    max_placement_tries: int = 1000

    def __post_init__(self):
        if self.n_persons < 0 or self.n_cameras < 2 or self.n_frames < 0:
            raise ConfigError("need n_persons >= 0, n_cameras >= 2, n_frames >= 0")
        for name in ("p_miss", "p_fp", "low_conf_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.pixel_sigma < 0 or self.low_conf_sigma < 0:
            raise ConfigError("noise levels must be nonnegative")
        if self.min_separation < 0 or self.area_radius <= 0 or self.camera_radius <= self.area_radius:
            raise ConfigError("cameras must ring outside the placement area")
        if self.hip_views is not None and not 0 <= self.hip_views <= self.n_cameras:
            raise ConfigError("hip_views must lie in [0, n_cameras]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["occluded_parts"] = list(self.occluded_parts)
        return d


@dataclass(eq=False)
class FrameTruth:
    poses: list[PoseEstimate]
    params: list[BodyParams]


@dataclass(eq=False)
class SceneTruth:
    cameras: list[CameraView]
    frames: list[FrameTruth]
    noise: dict = field(default_factory=dict)


@dataclass(eq=False)
class FrameObservations:
    detections: list[Detection2D]
    affinities: list[LimbAffinity]
    # (view_id, per-view index) -> person index, -1 for false positives
    owner: dict[tuple[int, int], int] = field(default_factory=dict)


def ring_cameras(cfg: SceneConfig) -> list[CameraView]:
    K = np.array([[cfg.focal, 0, cfg.width / 2], [0, cfg.focal, cfg.height / 2], [0, 0, 1.0]])
    target = np.array([0.0, 0.0, cfg.look_at_height])
    up = np.array([0.0, 0.0, 1.0])
    cams = []
    for k in range(cfg.n_cameras):
        phi = 2 * np.pi * k / cfg.n_cameras + 0.1
        C = np.array([cfg.camera_radius * np.cos(phi), cfg.camera_radius * np.sin(phi), cfg.camera_height])
        z = (target - C) / np.linalg.norm(target - C)
        x = np.cross(z, up)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        cams.append(CameraView.from_krt(K, R, -R @ C, cfg.width, cfg.height, k))
    return cams


def sample_body(rng: np.random.Generator, topology: SkeletonTopology, xy) -> BodyParams:
    """Random standing body: anatomical joint ranges, +-0.15 log bone scales, feet on the ground."""
    n = topology.joint_count
    rot = np.zeros((n, 3))
    for j, name in enumerate(topology.names):
        if name in POSE_RANGES:
            rot[j] = [rng.uniform(lo, hi) for lo, hi in POSE_RANGES[name]]
    yaw = rng.uniform(-np.pi, np.pi)
    tilt = rng.uniform(-ROOT_TILT, ROOT_TILT, size=2)
    root = Rotation.from_euler("z", yaw) * Rotation.from_rotvec([tilt[0], tilt[1], 0.0])
    rot[topology.hip_index] = root.as_rotvec()
    beta = rng.uniform(-LOG_SCALE_RANGE, LOG_SCALE_RANGE, size=n - 1)
    params = BodyParams(np.zeros(3), rot, beta)
    lowest = forward_kinematics(params, topology)[:, 2].min()
    return BodyParams(np.array([xy[0], xy[1], GROUND_CLEARANCE - lowest]), rot, beta)


def _place_roots(rng, cfg: SceneConfig) -> np.ndarray:
    for _ in range(cfg.max_placement_tries):
        r = cfg.area_radius * np.sqrt(rng.uniform(size=cfg.n_persons))
        a = rng.uniform(0, 2 * np.pi, size=cfg.n_persons)
        xy = np.stack([r * np.cos(a), r * np.sin(a)], axis=1)
        if cfg.n_persons < 2:
            return xy
        d = np.linalg.norm(xy[:, None] - xy[None], axis=2)
        if d[np.triu_indices(cfg.n_persons, 1)].min() >= cfg.min_separation:
            return xy
    raise ConfigError(
        f"could not place {cfg.n_persons} people {cfg.min_separation} m apart "
        f"within {cfg.area_radius} m after {cfg.max_placement_tries} tries"
    )


def observe_poses(
    rng: np.random.Generator,
    cfg: SceneConfig,
    cameras: Sequence[CameraView],
    topology: SkeletonTopology,
    poses: Sequence[np.ndarray],
    occluded: set[int] | frozenset[int] = frozenset(),
) -> FrameObservations:
    """Render (N, 3) joint arrays into noisy, shuffled per-view detections.

    Uses ``cfg``'s noise, dropout, false-positive and confidence settings;
    parts in ``occluded`` are never detected.
    """
    n_people, n = len(poses), topology.joint_count
    hip = topology.hip_index
    hip_keep = None
    if cfg.hip_views is not None:
        hip_keep = np.zeros((n_people, len(cameras)), bool)
        for p in range(n_people):
            # a prefix of one permutation: fewer hip views give nested subsets
            hip_keep[p, rng.permutation(len(cameras))[:cfg.hip_views]] = True
    low = rng.uniform(size=(n_people, n)) < cfg.low_conf_rate

    detections: list[Detection2D] = []
    affinities: list[LimbAffinity] = []
    owner: dict[tuple[int, int], int] = {}
    for k, cam in enumerate(cameras):
        raw = []  # (slot, person, part, uv, conf)
        for p, X in enumerate(poses):
            uv = project_many(cam, X)
            visible = cam.in_bounds(uv) & (cam.depth(X) > 0)
            drop = rng.uniform(size=n) < cfg.p_miss
            noise = rng.normal(size=(n, 2))
            conf = np.clip(rng.normal(0.9, 0.05, size=n), 0.0, 1.0)
            low_conf = rng.uniform(0.05, 0.3, size=n)
            for i in range(n):
                if hip_keep is not None and i == hip:
                    keep = hip_keep[p, k]
                else:
                    keep = not drop[i]
                if not (visible[i] and keep) or i in occluded:
                    continue
                if low[p, i]:
                    raw.append((p * n + i, p, i, uv[i] + cfg.low_conf_sigma * noise[i], low_conf[i]))
                else:
                    raw.append((p * n + i, p, i, uv[i] + cfg.pixel_sigma * noise[i], conf[i]))
        n_fp = rng.binomial(n_people, cfg.p_fp, size=n) if cfg.p_fp > 0 else np.zeros(n, int)
        slot = n_people * n
        for i in range(n):
            for _ in range(n_fp[i]):
                uv = rng.uniform([0, 0], [cam.width, cam.height])
                raw.append((slot, -1, i, uv, rng.uniform(0.1, 0.5)))
                slot += 1
        # Shuffle keys cover every possible slot, so dropping a detection
        # never shifts the random stream for the rest of the scene.
        keys = rng.uniform(size=slot)
        order = sorted(range(len(raw)), key=lambda r: keys[raw[r][0]])
        index_of = {}
        for local, r in enumerate(order):
            _, p, i, uv, conf = raw[r]
            uv = np.clip(uv, 0.0, np.nextafter([cam.width, cam.height], 0))
            detections.append(Detection2D(int(i), uv, float(conf), cam.view_id))
            owner[(cam.view_id, local)] = p
            if p >= 0:
                index_of[(p, i)] = local
        for limb, (a, b) in enumerate(topology.limbs):
            for p in range(n_people):
                if (p, a) in index_of and (p, b) in index_of:
                    affinities.append(LimbAffinity(cam.view_id, limb, index_of[(p, a)], index_of[(p, b)], 1.0))
    return FrameObservations(detections, affinities, owner)


def generate_scene(
    cfg: SceneConfig, seed: int | None = None, topology: SkeletonTopology | None = None
) -> tuple[SceneTruth, list[FrameObservations]]:
    """Sample ``cfg.n_frames`` independent frames under one camera ring.

    Affinities list only true same-person limb pairs (score 1); any pair not
    listed has score 0.

    Raises:
        ConfigError: when people cannot be placed at the requested separation.
    """
    topology = topology or default_skeleton()
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    cameras = ring_cameras(cfg)
    occluded = {topology.names.index(name) for name in cfg.occluded_parts}
    frames, observations = [], []
    for _ in range(cfg.n_frames):
        roots = _place_roots(rng, cfg)
        params = [sample_body(rng, topology, xy) for xy in roots]
        poses = [
            PoseEstimate(forward_kinematics(b, topology), np.ones(topology.joint_count), k)
            for k, b in enumerate(params)
        ]
        frames.append(FrameTruth(poses, params))
        observations.append(observe_poses(rng, cfg, cameras, topology, [p.joints for p in poses], occluded))
    noise = {
        "pixel_sigma": cfg.pixel_sigma,
        "p_miss": cfg.p_miss,
        "p_fp": cfg.p_fp,
        "seed": cfg.seed if seed is None else seed,
    }
    return SceneTruth(cameras, frames, noise), observations


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class FrameTally:
    tp: int = 0
    n_pred: int = 0
    n_truth: int = 0
    limbs_correct: int = 0
    limbs_total: int = 0
    error_sum: float = 0.0
    error_count: int = 0
    proposals_valid: int = 0
    n_proposals: int = 0
    n_people: int = 0
    joint_tp: np.ndarray | None = None
    joint_pred: np.ndarray | None = None
    joint_truth: np.ndarray | None = None

    def __iadd__(self, other: "FrameTally") -> "FrameTally":
        for name in ("tp", "n_pred", "n_truth", "limbs_correct", "limbs_total", "error_sum",
                     "error_count", "proposals_valid", "n_proposals", "n_people"):
            setattr(self, name, getattr(self, name) + getattr(other, name))
        for name in ("joint_tp", "joint_pred", "joint_truth"):
            mine, theirs = getattr(self, name), getattr(other, name)
            setattr(self, name, theirs.copy() if mine is None else mine + theirs)
        return self


def _ratio(a: float, b: float) -> float:
    return float(a / b) if b else 0.0


@dataclass
class MetricsReport:
    precision: float
    recall: float
    f1: float
    pcp: float
    mpjpe: float
    proposal_precision: float
    proposal_recall: float
    per_joint: dict[str, dict[str, float]]
    counts: dict[str, int]

    @classmethod
    def from_tally(cls, t: FrameTally, topology: SkeletonTopology) -> "MetricsReport":
        p = _ratio(t.tp, t.n_pred)
        r = _ratio(t.tp, t.n_truth)
        per_joint = {}
        n = topology.joint_count
        jt = t.joint_tp if t.joint_tp is not None else np.zeros(n, int)
        jp = t.joint_pred if t.joint_pred is not None else np.zeros(n, int)
        jg = t.joint_truth if t.joint_truth is not None else np.zeros(n, int)
        for j, name in enumerate(topology.names):
            per_joint[name] = {"precision": _ratio(jt[j], jp[j]), "recall": _ratio(jt[j], jg[j])}
        return cls(
            precision=p,
            recall=r,
            f1=_ratio(2 * p * r, p + r),
            pcp=_ratio(t.limbs_correct, t.limbs_total),
            mpjpe=_ratio(t.error_sum, t.error_count),
            proposal_precision=_ratio(t.proposals_valid, t.n_proposals),
            proposal_recall=_ratio(t.proposals_valid, t.n_people),
            per_joint=per_joint,
            counts={
                "true_positive_joints": int(t.tp),
                "predicted_joints": int(t.n_pred),
                "truth_joints": int(t.n_truth),
                "predicted_instances": int(t.n_proposals),
                "truth_instances": int(t.n_people),
            },
        )

    def to_dict(self) -> dict:
        return asdict(self)


def instance_cost(pred: PoseEstimate, truth: PoseEstimate) -> float:
    """Mean joint distance over joints present in both poses.

    Infinite when no shared joint lies within the joint threshold: such a
    pair could never score a true positive, so it is never matched.
    """
    shared = pred.present & truth.present
    if not shared.any():
        return np.inf
    d = np.linalg.norm(pred.joints[shared] - truth.joints[shared], axis=1)
    if not (d < JOINT_THRESHOLD).any():
        return np.inf
    return float(np.mean(d))


def match_instances(pred: Sequence[PoseEstimate], truth: Sequence[PoseEstimate]) -> list[tuple[int, int]]:
    """Optimal one-to-one assignment minimizing total mean joint distance.

    Each prediction may also stay unmatched at NO_OVERLAP_COST, so the
    largest feasible matching wins and unmatchable predictions drop out
    without displacing anyone else.
    """
    if not pred or not truth:
        return []
    nt, npred = len(truth), len(pred)
    cost = np.full((npred, nt + npred), np.inf)
    cost[:, :nt] = [[instance_cost(p, t) for t in truth] for p in pred]
    cost[np.arange(npred), nt + np.arange(npred)] = NO_OVERLAP_COST
    rows, cols = linear_sum_assignment(cost)
    return sorted((r, c) for r, c in zip(rows.tolist(), cols.tolist()) if c < nt)


def score_assignment(
    pred: Sequence[PoseEstimate],
    truth: Sequence[PoseEstimate],
    pairs: Sequence[tuple[int, int]],
    topology: SkeletonTopology,
    pcp_variant: str = "strict",
) -> FrameTally:
    """Joint, limb and error tallies for a fixed instance assignment."""
    n = topology.joint_count
    t = FrameTally(joint_tp=np.zeros(n, int), joint_pred=np.zeros(n, int), joint_truth=np.zeros(n, int))
    for p in pred:
        t.joint_pred += p.present
    for g in truth:
        t.joint_truth += g.present
    t.n_pred = int(t.joint_pred.sum())
    t.n_truth = int(t.joint_truth.sum())
    t.limbs_total = len(topology.limbs) * len(truth)
    for pi, ti in pairs:
        p, g = pred[pi], truth[ti]
        shared = p.present & g.present
        err = np.full(n, np.inf)
        err[shared] = np.linalg.norm(p.joints[shared] - g.joints[shared], axis=1)
        hit = err < JOINT_THRESHOLD
        t.joint_tp += hit
        t.error_sum += float(err[shared].sum())
        t.error_count += int(shared.sum())
        for a, b in topology.limbs:
            length = np.linalg.norm(g.joints[a] - g.joints[b])
            if pcp_variant == "strict":
                ok = err[a] <= 0.5 * length and err[b] <= 0.5 * length
            elif pcp_variant == "average":
                ok = 0.5 * (err[a] + err[b]) <= 0.5 * length
            else:
                raise ValueError(f"unknown PCP variant {pcp_variant!r}")
            t.limbs_correct += int(ok)
    t.tp = int(t.joint_tp.sum())
    return t


def proposal_tally(pred: Sequence[PoseEstimate], truth: Sequence[PoseEstimate], hip: int) -> tuple[int, int, int]:
    """(valid proposals, proposals, people) under the hip-within-0.2 m rule."""
    anchors = [p.joints[hip] for p in pred if p.present[hip]]
    hips = [g.joints[hip] for g in truth]
    valid = 0
    if anchors and hips:
        cost = np.linalg.norm(np.array(anchors)[:, None] - np.array(hips)[None], axis=2)
        rows, cols = linear_sum_assignment(cost)
        valid = int(np.sum(cost[rows, cols] < HIP_THRESHOLD))
    return valid, len(pred), len(truth)


def evaluate_frame(
    pred: Sequence[PoseEstimate],
    truth: Sequence[PoseEstimate],
    topology: SkeletonTopology,
    pcp_variant: str = "strict",
) -> FrameTally:
    t = score_assignment(pred, truth, match_instances(pred, truth), topology, pcp_variant)
    t.proposals_valid, t.n_proposals, t.n_people = proposal_tally(pred, truth, topology.hip_index)
    return t


def evaluate(
    pred_frames: Sequence[Sequence[PoseEstimate]],
    truth: SceneTruth | Sequence[Sequence[PoseEstimate]],
    topology: SkeletonTopology | None = None,
    pcp_variant: str = "strict",
) -> MetricsReport:
    """Aggregate (micro-averaged) metrics over frames."""
    topology = topology or default_skeleton()
    truth_frames = [f.poses for f in truth.frames] if isinstance(truth, SceneTruth) else truth
    if len(pred_frames) != len(truth_frames):
        raise ValueError("prediction and truth frame counts differ")
    total = FrameTally(
        joint_tp=np.zeros(topology.joint_count, int),
        joint_pred=np.zeros(topology.joint_count, int),
        joint_truth=np.zeros(topology.joint_count, int),
    )
    for pred, gt in zip(pred_frames, truth_frames):
        total += evaluate_frame(pred, gt, topology, pcp_variant)
    return MetricsReport.from_tally(total, topology)

