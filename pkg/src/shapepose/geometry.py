"""Shared domain types: skeleton topology, cameras, 2D detections, 3D poses.

World coordinates are meters with +z pointing up. Cameras map homogeneous
world points to homogeneous pixels through a 3x4 projection matrix.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

ROOT_PARENT = -1
ZERO_DEPTH_EPS = 1e-12


class ZeroDepth(ValueError):
    """Raised when a point lies on the principal plane of a camera."""


class TopologyError(ValueError):
    """Raised for malformed skeleton definitions."""


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class SkeletonTopology:
    """Kinematic tree of a body model.

    Attributes:
        names: Joint names, length N.
        parent: Parent index per joint; the root has ``ROOT_PARENT``.
        rest_offset: (N, 3) offset of each joint from its parent in the rest
            pose, meters. The root row is ignored.
        hip_index: Index of the hip joint, which must be the root.
    """

    names: tuple[str, ...]
    parent: np.ndarray
    rest_offset: np.ndarray
    hip_index: int = 0
    limbs: tuple[tuple[int, int], ...] = field(init=False)
    order: tuple[int, ...] = field(init=False)
    subtrees: tuple[tuple[int, ...], ...] = field(init=False, repr=False)

    def __post_init__(self):
        parent = _frozen(self.parent, dtype=int)
        offset = _frozen(self.rest_offset)
        object.__setattr__(self, "parent", parent)
        object.__setattr__(self, "rest_offset", offset)
        n = len(self.names)
        if parent.shape != (n,) or offset.shape != (n, 3):
            raise TopologyError("names, parent and rest_offset lengths differ")
        roots = np.flatnonzero(parent == ROOT_PARENT)
        if len(roots) != 1:
            raise TopologyError(f"expected exactly one root, found {len(roots)}")
        if not 0 <= self.hip_index < n or roots[0] != self.hip_index:
            raise TopologyError("hip_index must be the tree root")
        if np.any((parent < ROOT_PARENT) | (parent >= n)):
            raise TopologyError("parent index out of range")
        order = _topological_order(parent)
        limbs = tuple((int(parent[j]), j) for j in order if parent[j] != ROOT_PARENT)
        for _, c in limbs:
            if not np.linalg.norm(offset[c]) > 0:
                raise TopologyError(f"limb to joint {self.names[c]!r} has zero rest length")
        object.__setattr__(self, "order", tuple(order))
        object.__setattr__(self, "limbs", limbs)
        object.__setattr__(self, "subtrees", tuple(tuple(self.subtree(j)) for j in range(n)))

    @property
    def joint_count(self) -> int:
        return len(self.names)

    @property
    def limb_rest_length(self) -> np.ndarray:
        return np.array([np.linalg.norm(self.rest_offset[c]) for _, c in self.limbs])

    def children(self, j: int) -> list[int]:
        return [int(c) for c in np.flatnonzero(self.parent == j)]

    def subtree(self, j: int) -> list[int]:
        """Joint ``j`` and all of its descendants, in topological order."""
        inside = {j}
        for k in self.order:
            if self.parent[k] in inside:
                inside.add(k)
        return [k for k in self.order if k in inside]

    def rest_positions(self) -> np.ndarray:
        pos = np.zeros((self.joint_count, 3))
        for j in self.order:
            p = self.parent[j]
            if p != ROOT_PARENT:
                pos[j] = pos[p] + self.rest_offset[j]
        return pos

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "parent": [int(p) for p in self.parent],
            "rest_offset": [[float(v) for v in row] for row in self.rest_offset],
            "hip_index": int(self.hip_index),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SkeletonTopology":
        unknown = set(data) - {"names", "parent", "rest_offset", "hip_index"}
        if unknown:
            raise TopologyError(f"unknown topology keys: {sorted(unknown)}")
        try:
            return cls(
                names=tuple(str(n) for n in data["names"]),
                parent=data["parent"],
                rest_offset=data["rest_offset"],
                hip_index=int(data.get("hip_index", 0)),
            )
        except (KeyError, TypeError) as e:
            raise TopologyError(f"malformed topology: {e}") from e

    @classmethod
    def load(cls, path: str | Path) -> "SkeletonTopology":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _topological_order(parent: np.ndarray) -> list[int]:
    n = len(parent)
    children: list[list[int]] = [[] for _ in range(n)]
    root = -1
    for j, p in enumerate(parent):
        if p == ROOT_PARENT:
            root = j
        else:
            children[p].append(j)
    order, stack = [], [root]
    while stack:
        j = stack.pop()
        order.append(j)
        stack.extend(reversed(children[j]))
    if len(order) != n:
        raise TopologyError("parent array contains a cycle or a detached joint")
    return order


# 15 joints, z up, the figure's left side along +x.
_DEFAULT_JOINTS = (
    ("pelvis", -1, (0.0, 0.0, 0.0)),
    ("neck", 0, (0.0, 0.0, 0.52)),
    ("head", 1, (0.0, 0.0, 0.25)),
    ("l_shoulder", 1, (0.18, 0.0, -0.02)),
    ("l_elbow", 3, (0.0, 0.0, -0.28)),
    ("l_wrist", 4, (0.0, 0.0, -0.26)),
    ("r_shoulder", 1, (-0.18, 0.0, -0.02)),
    ("r_elbow", 6, (0.0, 0.0, -0.28)),
    ("r_wrist", 7, (0.0, 0.0, -0.26)),
    ("l_hip", 0, (0.10, 0.0, -0.05)),
    ("l_knee", 9, (0.0, 0.0, -0.43)),
    ("l_ankle", 10, (0.0, 0.0, -0.42)),
    ("r_hip", 0, (-0.10, 0.0, -0.05)),
    ("r_knee", 12, (0.0, 0.0, -0.43)),
    ("r_ankle", 13, (0.0, 0.0, -0.42)),
)


def default_skeleton() -> SkeletonTopology:
    """The built-in 15-joint skeleton rooted at the pelvis (about 1.7 m tall)."""
    names, parent, offset = zip(*_DEFAULT_JOINTS)
    return SkeletonTopology(names=names, parent=parent, rest_offset=offset, hip_index=0)


@dataclass(frozen=True, eq=False)
class CameraView:
    """A pinhole camera: 3x4 projection matrix plus image bounds in pixels."""

    projection: np.ndarray
    width: int
    height: int
    view_id: int

    def __post_init__(self):
        P = _frozen(self.projection)
        if P.shape != (3, 4) or not np.all(np.isfinite(P)):
            raise ValueError("projection must be a finite 3x4 matrix")
        if np.linalg.matrix_rank(P[:, :3]) < 3:
            raise ValueError("left 3x3 block of the projection is singular")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image width and height must be positive")
        object.__setattr__(self, "projection", P)
        scale = np.sign(np.linalg.det(P[:, :3])) / np.linalg.norm(P[2, :3])
        object.__setattr__(self, "_depth_scale", float(scale))

    @classmethod
    def from_krt(cls, K, R, t, width: int, height: int, view_id: int) -> "CameraView":
        P = np.asarray(K, float) @ np.hstack([np.asarray(R, float), np.reshape(t, (3, 1))])
        return cls(P, width, height, view_id)

    @property
    def center(self) -> np.ndarray:
        M, p4 = self.projection[:, :3], self.projection[:, 3]
        return -np.linalg.solve(M, p4)

    def depth(self, points: np.ndarray) -> np.ndarray:
        """Signed depth of world points along the optical axis (positive in front)."""
        P = self.projection
        pts = np.atleast_2d(points)
        return self._depth_scale * (pts @ P[2, :3] + P[2, 3])

    def in_bounds(self, uv: np.ndarray) -> np.ndarray:
        uv = np.atleast_2d(uv)
        return (uv[:, 0] >= 0) & (uv[:, 0] < self.width) & (uv[:, 1] >= 0) & (uv[:, 1] < self.height)


def project(camera: CameraView, point) -> np.ndarray:
    """Project a world point (meters) to pixel coordinates.

    Raises:
        ZeroDepth: if the homogeneous scale is below ``ZERO_DEPTH_EPS``.
    """
    P = camera.projection
    X = np.asarray(point, dtype=float)
    h = P[:, :3] @ X + P[:, 3]
    if abs(h[2]) < ZERO_DEPTH_EPS:
        raise ZeroDepth(f"point {X} lies on the principal plane of view {camera.view_id}")
    return h[:2] / h[2]


def project_with_jacobian(camera: CameraView, point) -> tuple[np.ndarray, np.ndarray]:
    """Projection and its 2x3 Jacobian with respect to the world point."""
    P = camera.projection
    X = np.asarray(point, dtype=float)
    h = P[:, :3] @ X + P[:, 3]
    if abs(h[2]) < ZERO_DEPTH_EPS:
        raise ZeroDepth(f"point {X} lies on the principal plane of view {camera.view_id}")
    uv = h[:2] / h[2]
    J = (P[:2, :3] - np.outer(uv, P[2, :3])) / h[2]
    return uv, J


def project_many(camera: CameraView, points: np.ndarray) -> np.ndarray:
    """Vectorized projection of (M, 3) points; rows on the principal plane become NaN."""
    P = camera.projection
    h = np.atleast_2d(points) @ P[:, :3].T + P[:, 3]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = h[:, :2] / h[:, 2:3]
    uv[np.abs(h[:, 2]) < ZERO_DEPTH_EPS] = np.nan
    return uv


@dataclass(frozen=True, eq=False)
class Detection2D:
    """One 2D joint detection: part label, pixel position and confidence."""

    part: int
    uv: np.ndarray
    confidence: float
    view_id: int

    def __post_init__(self):
        uv = _frozen(self.uv)
        if uv.shape != (2,) or not np.all(np.isfinite(uv)):
            raise ValueError("uv must be a finite 2-vector")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        if self.part < 0:
            raise ValueError("negative part label")
        object.__setattr__(self, "uv", uv)


@dataclass(frozen=True)
class LimbAffinity:
    """Scalar limb-connectivity evidence between two detections in one view.

    ``parent_det`` and ``child_det`` index the detections of ``view_id``
    in their per-view order (see :func:`index_by_view`).
    """

    view_id: int
    limb: int
    parent_det: int
    child_det: int
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"affinity score {self.score} outside [0, 1]")


@dataclass(frozen=True, eq=False)
class PoseEstimate:
    """Per-instance 3D joints. Missing joints are NaN rows with confidence 0."""

    joints: np.ndarray
    joint_confidence: np.ndarray
    instance_id: int = 0

    def __post_init__(self):
        X = np.array(self.joints, dtype=float)
        w = np.array(self.joint_confidence, dtype=float)
        if X.ndim != 2 or X.shape[1] != 3 or w.shape != (X.shape[0],):
            raise ValueError("joints must be (N, 3) with N confidences")
        missing = w == 0
        X[missing] = np.nan
        if not np.all(np.isfinite(X[~missing])):
            raise ValueError("present joints must have finite coordinates")
        if np.any((w < 0) | (w > 1)):
            raise ValueError("joint confidence outside [0, 1]")
        X.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "joints", X)
        object.__setattr__(self, "joint_confidence", w)

    @property
    def present(self) -> np.ndarray:
        return self.joint_confidence > 0

    @property
    def joint_count(self) -> int:
        return self.joints.shape[0]

    @classmethod
    def from_optional(cls, joints: Sequence, confidence: Sequence[float], instance_id: int = 0) -> "PoseEstimate":
        """Build from a list where missing joints are ``None``."""
        X = np.array([[np.nan] * 3 if j is None else j for j in joints], dtype=float)
        return cls(X, confidence, instance_id)

    def to_optional(self) -> list:
        return [None if not p else [float(v) for v in x] for x, p in zip(self.joints, self.present)]


def index_by_view(detections: Sequence[Detection2D]) -> dict[int, list[Detection2D]]:
    """Group detections by view, preserving input order.

    The position of a detection within its view's list is its detection index,
    which candidate provenance and limb affinities refer to.
    """
    out: dict[int, list[Detection2D]] = {}
    for d in detections:
        out.setdefault(d.view_id, []).append(d)
    return out


def cameras_by_id(cameras: Sequence[CameraView]) -> dict[int, CameraView]:
    out = {c.view_id: c for c in cameras}
    if len(out) != len(cameras):
        raise ValueError("duplicate camera view ids")
    return out
