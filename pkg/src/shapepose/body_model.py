"""Kinematic body model: forward kinematics, shape energy and parameter fitting.

Parameters are a root translation, one axis-angle rotation per joint (the root
entry is the global orientation) and one log scale per bone. Joint ``j``'s
rotation moves its descendants; bone scales multiply rest offsets.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Protocol

import numpy as np

from .geometry import ROOT_PARENT, PoseEstimate, SkeletonTopology

LOG_SCALE_LIMIT = float(np.log(2.0))
# fit_body stops once every parameter moves less than this in one step
MIN_STEP = 1e-12
_SMALL_ANGLE = 1e-8


class InsufficientTargets(ValueError):
    """Too few present target joints to constrain the body model."""


def skew(v) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def rodrigues(v) -> np.ndarray:
    """Rotation matrix of an axis-angle vector."""
    v = np.asarray(v, dtype=float)
    th2 = float(v @ v)
    K = skew(v)
    if th2 < _SMALL_ANGLE**2:
        return np.eye(3) + K + 0.5 * K @ K
    th = np.sqrt(th2)
    return np.eye(3) + (np.sin(th) / th) * K + ((1.0 - np.cos(th)) / th2) * K @ K


def rodrigues_batch(v: np.ndarray) -> np.ndarray:
    """Rotation matrices (M, 3, 3) for stacked axis-angle vectors (M, 3)."""
    v = np.asarray(v, dtype=float)
    th2 = np.einsum("ij,ij->i", v, v)
    K = np.zeros((len(v), 3, 3))
    K[:, 0, 1], K[:, 0, 2], K[:, 1, 2] = -v[:, 2], v[:, 1], -v[:, 0]
    K[:, 1, 0], K[:, 2, 0], K[:, 2, 1] = v[:, 2], -v[:, 1], v[:, 0]
    small = th2 < _SMALL_ANGLE**2
    th = np.sqrt(np.where(small, 1.0, th2))
    a = np.where(small, 1.0, np.sin(th) / th)
    b = np.where(small, 0.5, (1.0 - np.cos(th)) / np.where(small, 1.0, th2))
    return np.eye(3) + a[:, None, None] * K + b[:, None, None] * (K @ K)


def left_jacobian(v) -> np.ndarray:
    """SO(3) left Jacobian: dR/dv_a = skew(J e_a) R for R = rodrigues(v)."""
    v = np.asarray(v, dtype=float)
    th2 = float(v @ v)
    K = skew(v)
    if th2 < 1e-10:
        return np.eye(3) + 0.5 * K + K @ K / 6.0
    th = np.sqrt(th2)
    return np.eye(3) + ((1.0 - np.cos(th)) / th2) * K + ((th - np.sin(th)) / (th2 * th)) * K @ K


@dataclass(frozen=True, eq=False)
class BodyParams:
    root_translation: np.ndarray
    joint_rotation: np.ndarray
    bone_log_scale: np.ndarray

    def __post_init__(self):
        t = np.array(self.root_translation, dtype=float).reshape(3)
        r = np.array(self.joint_rotation, dtype=float)
        b = np.clip(np.array(self.bone_log_scale, dtype=float), -LOG_SCALE_LIMIT, LOG_SCALE_LIMIT)
        if r.ndim != 2 or r.shape[1] != 3 or b.shape != (r.shape[0] - 1,):
            raise ValueError("joint_rotation must be (N, 3) and bone_log_scale (N-1,)")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(r)) and np.all(np.isfinite(b))):
            raise ValueError("body parameters must be finite")
        for a in (t, r, b):
            a.setflags(write=False)
        object.__setattr__(self, "root_translation", t)
        object.__setattr__(self, "joint_rotation", r)
        object.__setattr__(self, "bone_log_scale", b)

    @property
    def joint_count(self) -> int:
        return self.joint_rotation.shape[0]

    @classmethod
    def zeros(cls, joint_count: int, root_translation=(0.0, 0.0, 0.0)) -> "BodyParams":
        return cls(np.asarray(root_translation, float), np.zeros((joint_count, 3)), np.zeros(joint_count - 1))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.root_translation, self.joint_rotation.ravel(), self.bone_log_scale])

    @classmethod
    def from_vector(cls, vec: np.ndarray, joint_count: int) -> "BodyParams":
        n = joint_count
        return cls(vec[:3], vec[3:3 + 3 * n].reshape(n, 3), vec[3 + 3 * n:])

    @staticmethod
    def size(joint_count: int) -> int:
        return 3 + 3 * joint_count + joint_count - 1

    def to_dict(self) -> dict:
        return {
            "root_translation": self.root_translation.tolist(),
            "joint_rotation": self.joint_rotation.tolist(),
            "bone_log_scale": self.bone_log_scale.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BodyParams":
        return cls(d["root_translation"], d["joint_rotation"], d["bone_log_scale"])


def left_jacobian_batch(v: np.ndarray) -> np.ndarray:
    """Stacked left Jacobians (M, 3, 3) for axis-angle vectors (M, 3)."""
    v = np.asarray(v, dtype=float)
    th2 = np.einsum("ij,ij->i", v, v)
    K = np.zeros((len(v), 3, 3))
    K[:, 0, 1], K[:, 0, 2], K[:, 1, 2] = -v[:, 2], v[:, 1], -v[:, 0]
    K[:, 1, 0], K[:, 2, 0], K[:, 2, 1] = v[:, 2], -v[:, 1], v[:, 0]
    small = th2 < 1e-10
    safe = np.where(small, 1.0, th2)
    th = np.sqrt(safe)
    a = np.where(small, 0.5, (1.0 - np.cos(th)) / safe)
    b = np.where(small, 1.0 / 6.0, (th - np.sin(th)) / (safe * th))
    return np.eye(3) + a[:, None, None] * K + b[:, None, None] * (K @ K)


@lru_cache(maxsize=64)
def _jacobian_index(topology: SkeletonTopology):
    """(descendant, ancestor) index pairs: strict for rotations, inclusive for bone scales."""
    strict_k, strict_j, incl_k, incl_j = [], [], [], []
    for j in range(topology.joint_count):
        below = topology.subtrees[j]
        strict_k += below[1:]
        strict_j += [j] * (len(below) - 1)
        if topology.parent[j] != ROOT_PARENT:
            incl_k += below
            incl_j += [j] * len(below)
    return tuple(np.array(a, dtype=int) for a in (strict_k, strict_j, incl_k, incl_j))


def _bone_index(topology: SkeletonTopology) -> np.ndarray:
    """Map joint index -> position in bone_log_scale (-1 for the root)."""
    idx = np.full(topology.joint_count, -1)
    k = 0
    for j in range(topology.joint_count):
        if topology.parent[j] != ROOT_PARENT:
            idx[j] = k
            k += 1
    return idx


def _chain(params: BodyParams, topology: SkeletonTopology):
    n = topology.joint_count
    if params.joint_count != n:
        raise ValueError("parameter and topology joint counts differ")
    bone = _bone_index(topology)
    pos = np.zeros((n, 3))
    glob = np.zeros((n, 3, 3))
    rots = rodrigues_batch(params.joint_rotation)
    for j in topology.order:
        R = rots[j]
        p = topology.parent[j]
        if p == ROOT_PARENT:
            pos[j] = params.root_translation
            glob[j] = R
        else:
            scaled = np.exp(params.bone_log_scale[bone[j]]) * topology.rest_offset[j]
            pos[j] = pos[p] + glob[p] @ scaled
            glob[j] = glob[p] @ R
    return pos, glob, bone


def forward_kinematics(params: BodyParams, topology: SkeletonTopology) -> np.ndarray:
    """World joint positions (N, 3) for the given parameters."""
    return _chain(params, topology)[0]


def fk_jacobian(params: BodyParams, topology: SkeletonTopology) -> tuple[np.ndarray, np.ndarray]:
    """Joint positions and the (3N, P) Jacobian with respect to the parameter vector."""
    n = topology.joint_count
    pos, glob, bone = _chain(params, topology)
    sk, sj, ik, ij = _jacobian_index(topology)
    parent = np.asarray(topology.parent)
    # Rotating joint j turns each strict descendant k about p_j through the
    # parent frame: column a is (G_parent(j) J_l(theta_j) e_a) x (p_k - p_j).
    G_parent = np.where((parent == ROOT_PARENT)[:, None, None], np.eye(3), glob[np.maximum(parent, 0)])
    A = G_parent @ left_jacobian_batch(params.joint_rotation)
    a = A[sj].transpose(0, 2, 1)  # (M, axis, xyz)
    d = (pos[sk] - pos[sj])[:, None, :]
    cross = np.stack([
        a[..., 1] * d[..., 2] - a[..., 2] * d[..., 1],
        a[..., 2] * d[..., 0] - a[..., 0] * d[..., 2],
        a[..., 0] * d[..., 1] - a[..., 1] * d[..., 0],
    ], axis=1)  # (M, xyz, axis)
    rot = np.zeros((n, n, 3, 3))
    rot[sk, sj] = cross
    # A bone's log scale stretches the bone vector for it and its subtree.
    scale = np.zeros((n, n - 1, 3))
    scale[ik, bone[ij]] = pos[ij] - pos[parent[ij]]
    J = np.concatenate([
        np.broadcast_to(np.eye(3), (n, 3, 3)),
        rot.transpose(0, 2, 1, 3).reshape(n, 3, 3 * n),
        scale.transpose(0, 2, 1),
    ], axis=2)
    return pos, J.reshape(3 * n, -1)


GATED = "gated"
CONFIDENCE_WEIGHTED = "confidence_weighted"


def _joint_arrays(X, confidence):
    if isinstance(X, PoseEstimate):
        pts = np.asarray(X.joints)
        w = np.asarray(X.joint_confidence) if confidence is None else np.asarray(confidence, float)
        present = X.present
    else:
        pts = np.asarray(X, dtype=float)
        if confidence is None:
            raise ValueError("confidence required when passing raw joint arrays")
        w = np.asarray(confidence, float)
        present = np.all(np.isfinite(pts), axis=1)
    return pts, w, present


def shape_weights(w: np.ndarray, present: np.ndarray, rho_3d: float, mode: str) -> np.ndarray:
    if mode == GATED:
        return np.where(present & (w < rho_3d), 1.0, 0.0)
    if mode == CONFIDENCE_WEIGHTED:
        return np.where(present, w, 0.0)
    raise ValueError(f"unknown shape energy mode {mode!r}")


def shape_energy(
    X,
    params: BodyParams,
    topology: SkeletonTopology,
    rho_3d: float = 0.25,
    mode: str = GATED,
    confidence=None,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Squared 3D distance between joints and the body model.

    ``gated`` weights a joint 1 when its confidence is below ``rho_3d`` and 0
    otherwise; ``confidence_weighted`` weights by the confidence itself. A
    raw (N, 3) array may be passed with ``confidence``; NaN rows are missing.

    Returns:
        ``(energy, dE/dX of shape (N, 3), dE/dTheta as a parameter vector)``.
    """
    pts, w, present = _joint_arrays(X, confidence)
    weights = shape_weights(w, present, rho_3d, mode)
    model, J = fk_jacobian(params, topology)
    diff = np.where(present[:, None], pts - model, 0.0)
    energy = float(np.sum(weights * np.sum(diff**2, axis=1)))
    grad_x = 2.0 * weights[:, None] * diff
    grad_theta = -(grad_x.ravel() @ J)
    return energy, grad_x, grad_theta


class ShapeObjective:
    """Weighted 3D alignment of the body model to fixed target joints."""

    def __init__(self, targets: np.ndarray, weights: np.ndarray, topology: SkeletonTopology):
        self.targets = np.where(np.isfinite(targets), targets, 0.0)
        self.weights = np.asarray(weights, float)
        self.topology = topology
        self._sqrt_w = np.repeat(np.sqrt(self.weights), 3)
        self._cache = None

    def energy(self, params: BodyParams) -> float:
        diff = forward_kinematics(params, self.topology) - self.targets
        return float(np.sum(self.weights * np.sum(diff**2, axis=1)))

    def residuals(self, params: BodyParams) -> tuple[np.ndarray, np.ndarray]:
        """Weighted residual vector and its Jacobian."""
        pos, J = fk_jacobian(params, self.topology)
        r = self._sqrt_w * (pos - self.targets).ravel()
        return r, self._sqrt_w[:, None] * J

    def residuals_cached(self, params: BodyParams) -> tuple[np.ndarray, np.ndarray]:
        key = params.to_vector().tobytes()
        if self._cache is None or self._cache[0] != key:
            self._cache = (key, self.residuals(params))
        return self._cache[1]

    def gradient(self, params: BodyParams) -> np.ndarray:
        r, J = self.residuals_cached(params)
        return 2.0 * J.T @ r


class UpdateRule(Protocol):
    """Maps (energy gradient, current parameters, objective) to a parameter increment.

    Implementations must be free of side effects and return a finite
    increment that respects :func:`clamp_increment`.
    """

    def __call__(self, gradient: np.ndarray, params: BodyParams, objective: ShapeObjective) -> np.ndarray: ...


@dataclass(frozen=True)
class StepLimits:
    translation: float = 0.5
    rotation: float = 0.5
    log_scale: float = 0.2


def clamp_increment(delta: np.ndarray, params: BodyParams, limits: StepLimits = StepLimits()) -> np.ndarray:
    """Cap per-step changes and keep log scales within +-ln 2."""
    n = params.joint_count
    out = np.array(delta, dtype=float)
    out[~np.isfinite(out)] = 0.0
    t = out[:3]
    norm = np.linalg.norm(t)
    if norm > limits.translation:
        out[:3] = t * (limits.translation / norm)
    rot = out[3:3 + 3 * n].reshape(n, 3)
    norms = np.linalg.norm(rot, axis=1, keepdims=True)
    rot *= np.minimum(1.0, limits.rotation / np.maximum(norms, 1e-300))
    out[3:3 + 3 * n] = rot.ravel()
    beta = out[3 + 3 * n:]
    beta = np.clip(beta, -limits.log_scale, limits.log_scale)
    current = params.bone_log_scale
    out[3 + 3 * n:] = np.clip(current + beta, -LOG_SCALE_LIMIT, LOG_SCALE_LIMIT) - current
    return out


@dataclass(frozen=True)
class DampedGaussNewton:
    """Levenberg-Marquardt step on the weighted shape energy.

    Damping starts at ``damping`` and grows by ``growth`` after each rejected
    trial; a zero increment is returned when no trial lowers the energy.
    """

    damping: float = 1e-3
    growth: float = 10.0
    max_trials: int = 10
    limits: StepLimits = StepLimits()

    def __call__(self, gradient: np.ndarray, params: BodyParams, objective: ShapeObjective) -> np.ndarray:
        r, J = objective.residuals_cached(params)
        e0 = float(r @ r)
        JtJ = J.T @ J
        g = J.T @ r
        vec = params.to_vector()
        n = params.joint_count
        mu = self.damping
        eye = np.eye(len(vec))
        for _ in range(self.max_trials):
            delta = clamp_increment(-np.linalg.solve(JtJ + mu * eye, g), params, self.limits)
            trial = BodyParams.from_vector(vec + delta, n)
            if objective.energy(trial) < e0:
                return delta
            mu *= self.growth
        return np.zeros_like(vec)


@dataclass(frozen=True)
class GradientStep:
    """Plain fixed-step gradient descent, mainly a reference rule."""

    step: float = 0.05
    limits: StepLimits = StepLimits()

    def __call__(self, gradient: np.ndarray, params: BodyParams, objective: ShapeObjective) -> np.ndarray:
        return clamp_increment(-self.step * gradient, params, self.limits)


def fit_body(
    target: PoseEstimate,
    init: BodyParams,
    topology: SkeletonTopology,
    rule: UpdateRule | None = None,
    iterations: int = 30,
    confidence=None,
) -> BodyParams:
    """Fit body parameters to target joints with ``iterations`` update steps.

    Joints are weighted by confidence (missing joints and zero weights are
    ignored). ``confidence`` overrides the target's own confidences.

    Raises:
        InsufficientTargets: fewer than four weighted joints, or no hip.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    pts, w, present = _joint_arrays(target, confidence)
    weights = shape_weights(w, present, 0.0, CONFIDENCE_WEIGHTED)
    usable = weights > 0
    if usable.sum() < 4 or not usable[topology.hip_index]:
        raise InsufficientTargets(f"{int(usable.sum())} usable target joints")
    rule = rule if rule is not None else DampedGaussNewton()
    objective = ShapeObjective(pts, weights, topology)
    params = init
    n = topology.joint_count
    for _ in range(iterations):
        grad = objective.gradient(params)
        delta = np.asarray(rule(grad, params, objective), dtype=float)
        if not np.max(np.abs(delta), initial=0.0) > MIN_STEP:
            break
        params = BodyParams.from_vector(params.to_vector() + delta, n)
    return params
