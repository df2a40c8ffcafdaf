"""Alternating refinement of 3D joints and body-model parameters.

Each outer iteration fits the body model to the current joints, then takes a
line-searched step on the weighted sum of the reprojection energy (trusted,
inlier 2D detections) and the gated shape energy (low-confidence or missing
joints, tied to the body model).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .body_model import (
    GATED,
    BodyParams,
    InsufficientTargets,
    UpdateRule,
    fit_body,
    forward_kinematics,
    shape_energy,
    shape_weights,
)
from .geometry import CameraView, Detection2D, PoseEstimate, SkeletonTopology, index_by_view, project_many

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RefineConfig:
    """Refinement settings. ``rho_2d`` is an inlier radius in pixels.

    The X update is a per-joint Gauss-Newton preconditioned gradient step
    of initial length ``step``, halved by ``shrink`` until the objective does
    not increase (at most ``max_backtracks`` times).
    """

    rho_2d: float = 25.0
    rho_3d: float = 0.25
    w_2d: float = 1.0
    w_shape: float = 1.0
    outer_iters: int = 10
    inner_iters: int = 30
    step: float = 1.0
    shrink: float = 0.5
    max_backtracks: int = 20
    infill_confidence: float = 0.1

    def __post_init__(self):
        if min(self.rho_2d, self.rho_3d, self.w_2d, self.w_shape, self.step) < 0:
            raise ValueError("thresholds, weights and step must be nonnegative")
        if self.outer_iters < 1 or self.inner_iters < 1:
            raise ValueError("iteration counts must be >= 1")
        if not 0 < self.shrink < 1:
            raise ValueError("shrink must lie in (0, 1)")
        if not 0 < self.infill_confidence <= 1:
            raise ValueError("infill_confidence must lie in (0, 1]")


@dataclass(frozen=True, eq=False)
class MatchedObservations:
    """Per-joint, per-view 2D evidence for one instance.

    Arrays are indexed ``[joint, k]`` where ``k`` indexes ``view_ids``.
    Unmatched entries have weight 0, NaN pixels and detection index -1.
    """

    view_ids: tuple[int, ...]
    uv: np.ndarray
    weight: np.ndarray
    det_index: np.ndarray

    @classmethod
    def empty(cls, joint_count: int, view_ids: Sequence[int]) -> "MatchedObservations":
        k = len(view_ids)
        return cls(
            tuple(view_ids),
            np.full((joint_count, k, 2), np.nan),
            np.zeros((joint_count, k)),
            np.full((joint_count, k), -1, dtype=int),
        )

    @property
    def matched(self) -> np.ndarray:
        return self.det_index >= 0


def match_detections(
    poses: Sequence[PoseEstimate],
    detections: Sequence[Detection2D],
    cameras: Sequence[CameraView],
    rho_2d: float,
    exclude: set[tuple[int, int]] | None = None,
) -> list[MatchedObservations]:
    """Attach to each joint, per view, the nearest same-part detection within ``rho_2d``.

    Competing instances are resolved greedily by ascending pixel residual, so a
    detection serves at most one instance and each joint at most one detection.
    Detections listed in ``exclude`` as ``(view_id, index)`` are never used.
    """
    view_ids = tuple(c.view_id for c in cameras)
    if not poses:
        return []
    n = poses[0].joint_count
    out = [MatchedObservations.empty(n, view_ids) for _ in poses]
    per_view = index_by_view(detections)
    for k, cam in enumerate(cameras):
        dets = per_view.get(cam.view_id, [])
        if not dets:
            continue
        parts = np.array([d.part for d in dets])
        uv = np.array([d.uv for d in dets])
        proj = [project_many(cam, np.nan_to_num(p.joints, nan=0.0)) for p in poses]
        for part in np.unique(parts):
            idx = np.flatnonzero(parts == part)
            pairs = []
            for inst, pose in enumerate(poses):
                if not pose.present[part] or not np.all(np.isfinite(proj[inst][part])):
                    continue
                dist = np.linalg.norm(uv[idx] - proj[inst][part], axis=1)
                for d_local, dist_val in zip(idx, dist):
                    if dist_val < rho_2d and not (exclude and (cam.view_id, int(d_local)) in exclude):
                        pairs.append((float(dist_val), inst, int(d_local)))
            pairs.sort()
            used_inst, used_det = set(), set()
            for _, inst, d in pairs:
                if inst in used_inst or d in used_det:
                    continue
                used_inst.add(inst)
                used_det.add(d)
                out[inst].uv[part, k] = uv[d]
                out[inst].weight[part, k] = dets[d].confidence
                out[inst].det_index[part, k] = d
    return out


def _reprojection_terms(X: np.ndarray, obs: MatchedObservations, cameras: Sequence[CameraView], rho_2d: float):
    """Energy, gradient (N, 3), Gauss-Newton blocks (N, 3, 3) and inlier mask (N, K)."""
    n, K = obs.weight.shape
    grad = np.zeros((n, 3))
    hess = np.zeros((n, 3, 3))
    mask = np.zeros((n, K), dtype=bool)
    energy = 0.0
    present = np.all(np.isfinite(X), axis=1)
    Xs = np.where(present[:, None], X, 0.0)
    for k, cam in enumerate(cameras):
        P = cam.projection
        h = Xs @ P[:, :3].T + P[:, 3]
        live = present & (obs.weight[:, k] > 0) & (np.abs(h[:, 2]) > 1e-12)
        if not np.any(live):
            continue
        z = np.where(live, h[:, 2], 1.0)
        uv = h[:, :2] / z[:, None]
        res = np.where(live[:, None], uv - np.nan_to_num(obs.uv[:, k]), 0.0)
        d2 = np.sum(res**2, axis=1)
        inl = live & (d2 < rho_2d**2)
        mask[:, k] = inl
        w = np.where(inl, obs.weight[:, k], 0.0)
        energy += float(np.sum(w * d2))
        # d uv / d X = (P[:2,:3] - uv P[2,:3]) / z
        Jp = (P[None, :2, :3] - uv[:, :, None] * P[None, 2:3, :3]) / z[:, None, None]
        grad += 2.0 * w[:, None] * np.einsum("nab,na->nb", Jp, res)
        hess += 2.0 * w[:, None, None] * np.einsum("nab,nac->nbc", Jp, Jp)
    return energy, grad, hess, mask


def reprojection_energy(X, obs: MatchedObservations, cameras: Sequence[CameraView], rho_2d: float):
    """Confidence-weighted squared reprojection error over inlier detections.

    A detection is an inlier when its pixel residual is below ``rho_2d``.
    ``X`` is a PoseEstimate or an (N, 3) array with NaN rows for missing joints.

    Returns:
        ``(energy, gradient of shape (N, 3), inlier mask of shape (N, K))``.
    """
    pts = X.joints if isinstance(X, PoseEstimate) else np.asarray(X, float)
    e, g, _, mask = _reprojection_terms(pts, obs, cameras, rho_2d)
    return e, g, mask


@dataclass(frozen=True)
class TraceRecord:
    n: int
    e_2d: float
    e_shape: float
    total: float
    inliers: int


@dataclass(eq=False)
class RefineResult:
    pose: PoseEstimate
    params: BodyParams
    infilled: np.ndarray
    trace: list[TraceRecord] = field(default_factory=list)
    shape_skipped: bool = False
    # With record_history: joints before the first and after every outer
    # iteration, and each iteration's objective before and after its step
    # (both at that iteration's body parameters).
    history: list[np.ndarray] = field(default_factory=list)
    steps: list[tuple[float, float]] = field(default_factory=list)

    def __iter__(self):
        yield self.pose
        yield self.params


def _objective(X, w, obs, cameras, params, topology, cfg):
    e2d, g2d, h2d, mask = _reprojection_terms(X, obs, cameras, cfg.rho_2d)
    es, gs, _ = shape_energy(X, params, topology, cfg.rho_3d, GATED, confidence=w)
    total = cfg.w_2d * e2d + cfg.w_shape * es
    return total, e2d, es, cfg.w_2d * g2d + cfg.w_shape * gs, cfg.w_2d * h2d, mask


def _rematch(X, missing, obs, detections, cameras, rho_2d, claimed):
    probe = PoseEstimate(np.where(missing[:, None], X, np.nan), missing.astype(float), 0)
    extra = match_detections([probe], detections, cameras, rho_2d, exclude=claimed)[0]
    if extra.view_ids != obs.view_ids:
        raise ValueError("camera order differs from the matched observations")
    uv, weight, det = obs.uv.copy(), obs.weight.copy(), obs.det_index.copy()
    uv[missing], weight[missing], det[missing] = extra.uv[missing], extra.weight[missing], extra.det_index[missing]
    if claimed is not None:
        for j, k in zip(*np.nonzero(extra.matched & missing[:, None])):
            claimed.add((obs.view_ids[k], int(det[j, k])))
    return MatchedObservations(obs.view_ids, uv, weight, det)


def refine_instance(
    X0: PoseEstimate,
    obs: MatchedObservations,
    cameras: Sequence[CameraView],
    topology: SkeletonTopology,
    cfg: RefineConfig = RefineConfig(),
    rule: UpdateRule | None = None,
    record_history: bool = False,
    detections: Sequence[Detection2D] | None = None,
    claimed: set[tuple[int, int]] | None = None,
) -> RefineResult:
    """Alternate body fitting and line-searched joint updates.

    The body model starts from zero rotations and scales with its root at the
    initial hip. Missing joints are filled from the body model after the first
    fit. Joint confidences stay at their initial values throughout.

    When ``detections`` is given, infilled joints are matched against it right
    after infilling, skipping the ``(view_id, index)`` pairs in ``claimed``.
    Newly matched detections are added to ``claimed`` so instances refined
    later cannot reuse them.
    """
    n = topology.joint_count
    w = np.asarray(X0.joint_confidence, dtype=float).copy()
    X = np.array(X0.joints, dtype=float)
    missing = ~X0.present
    hip = X[topology.hip_index] if X0.present[topology.hip_index] else np.zeros(3)
    params = BodyParams.zeros(n, hip)
    gate = shape_weights(w, np.ones(n, bool), cfg.rho_3d, GATED)
    result = RefineResult(pose=X0, params=params, infilled=np.zeros(n, bool))
    if record_history:
        result.history.append(X.copy())
    for it in range(cfg.outer_iters):
        try:
            params = fit_body(X, params, topology, rule, cfg.inner_iters, confidence=w)
        except InsufficientTargets as exc:
            logger.info("instance %d: skipping shape refinement (%s)", X0.instance_id, exc)
            result.shape_skipped = True
            return result
        if it == 0 and np.any(missing):
            X[missing] = forward_kinematics(params, topology)[missing]
            if detections is not None:
                obs = _rematch(X, missing, obs, detections, cameras, cfg.rho_2d, claimed)

        L, e2d, es, grad, h2d, mask = _objective(X, w, obs, cameras, params, topology, cfg)
        hess = h2d + (cfg.w_shape * 2.0 * gate)[:, None, None] * np.eye(3)
        direction = np.zeros((n, 3))
        for j in range(n):
            tr = np.trace(hess[j])
            if tr > 0:
                direction[j] = -np.linalg.solve(hess[j] + 1e-12 * tr * np.eye(3), grad[j])
        step, L_start = cfg.step, L
        for _ in range(cfg.max_backtracks + 1):
            trial = X + step * direction
            L_trial = _objective(trial, w, obs, cameras, params, topology, cfg)[0]
            if L_trial <= L:
                X = trial
                L, e2d, es, _, _, mask = _objective(X, w, obs, cameras, params, topology, cfg)
                break
            step *= cfg.shrink
        result.trace.append(TraceRecord(it, e2d, es, L, int(mask.sum())))
        if record_history:
            result.history.append(X.copy())
            result.steps.append((L_start, L))

    conf = np.where(missing, cfg.infill_confidence, w)
    result.pose = PoseEstimate(X, conf, X0.instance_id)
    result.params = params
    result.infilled = missing.copy()
    return result
