"""Pairwise linear triangulation of same-label detections into 3D candidates."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import CameraView, Detection2D, cameras_by_id, index_by_view

logger = logging.getLogger(__name__)

DEGENERACY_RTOL = 1e-9
HOMOGENEOUS_EPS = 1e-12
# Pairs whose triangulated point reprojects farther than this from either
# source detection are rejected; None disables the gate.
DEFAULT_MAX_PAIR_RESIDUAL = 10.0


class TriangulationRejected(ValueError):
    """Base class for pairs that should be discarded rather than fail the run."""


class DegenerateRays(TriangulationRejected):
    pass


class CheiralityViolation(TriangulationRejected):
    pass


class InconsistentPair(TriangulationRejected):
    """The two detections are not epipolar-consistent within the residual gate."""


@dataclass(frozen=True, eq=False)
class Candidate3D:
    """A triangulated 3D joint hypothesis.

    ``sources`` holds two ``(view_id, detection index)`` pairs, the index being
    the detection's position within its view.
    """

    part: int
    position: np.ndarray
    confidence: float
    sources: tuple[tuple[int, int], tuple[int, int]]

    def __post_init__(self):
        if self.sources[0][0] == self.sources[1][0]:
            raise ValueError("candidate sources must come from two distinct views")


@dataclass
class TriangulationDiagnostics:
    accepted: int = 0
    degenerate: int = 0
    behind_camera: int = 0
    inconsistent: int = 0
    per_part_accepted: dict[int, int] = field(default_factory=dict)

    @property
    def rejected(self) -> int:
        return self.degenerate + self.behind_camera + self.inconsistent


def dlt_matrix(uv_a, uv_b, P_a: np.ndarray, P_b: np.ndarray) -> np.ndarray:
    """The 4x4 system A with A @ [X, 1] = 0 for two views, rows unit-normalized."""
    A = np.array([
        uv_a[0] * P_a[2] - P_a[0],
        uv_a[1] * P_a[2] - P_a[1],
        uv_b[0] * P_b[2] - P_b[0],
        uv_b[1] * P_b[2] - P_b[1],
    ])
    return A / np.linalg.norm(A, axis=1, keepdims=True)


def _solve_batch(A: np.ndarray):
    """Solve stacked (M, 4, 4) homogeneous systems; returns points and a degenerate mask.

    The two smallest singular values count as coincident (near-parallel
    rays) when their gap is within ``DEGENERACY_RTOL`` of the largest one;
    measuring against the largest keeps the test meaningful when both are at
    rounding level.
    """
    _, s, vt = np.linalg.svd(A)
    y = vt[:, -1, :]
    degenerate = (s[:, 2] - s[:, 3]) <= DEGENERACY_RTOL * s[:, 0]
    degenerate |= np.abs(y[:, 3]) < HOMOGENEOUS_EPS
    with np.errstate(divide="ignore", invalid="ignore"):
        X = y[:, :3] / y[:, 3:4]
    degenerate |= ~np.all(np.isfinite(X), axis=1)
    return X, degenerate


def _pair_residual(X: np.ndarray, uv: np.ndarray, P: np.ndarray) -> np.ndarray:
    h = X @ P[:, :3].T + P[:, 3]
    return np.linalg.norm(h[:, :2] / h[:, 2:3] - uv, axis=1)


def _batch_residual(X: np.ndarray, uv: np.ndarray, P: np.ndarray) -> np.ndarray:
    h = np.einsum("mij,mj->mi", P[:, :, :3], X) + P[:, :, 3]
    return np.linalg.norm(h[:, :2] / h[:, 2:3] - uv, axis=1)


def triangulate_pair(
    a: Detection2D,
    b: Detection2D,
    cam_a: CameraView,
    cam_b: CameraView,
    max_residual: float | None = None,
) -> Candidate3D:
    """Triangulate one cross-view pair of same-label detections.

    The candidate's sources carry detection index 0; use
    :func:`generate_candidates` for provenance within a frame.

    Raises:
        ValueError: if the detections disagree on part or share a view.
        DegenerateRays: if the rays are near-parallel.
        CheiralityViolation: if the point is behind either camera.
        InconsistentPair: if ``max_residual`` is set and the point reprojects
            farther than that (pixels) from either detection.
    """
    return _triangulate_indexed(a, 0, b, 0, cam_a, cam_b, max_residual)


def _triangulate_indexed(a, ia, b, ib, cam_a, cam_b, max_residual=None) -> Candidate3D:
    if a.part != b.part:
        raise ValueError(f"part mismatch: {a.part} vs {b.part}")
    if a.view_id == b.view_id or cam_a.view_id == cam_b.view_id:
        raise ValueError("both detections come from the same view")
    A = dlt_matrix(a.uv, b.uv, cam_a.projection, cam_b.projection)
    X, bad = _solve_batch(A[None])
    if bad[0]:
        raise DegenerateRays(f"near-parallel rays for part {a.part}")
    X = X[0]
    if cam_a.depth(X)[0] <= 0 or cam_b.depth(X)[0] <= 0:
        raise CheiralityViolation(f"point behind a camera for part {a.part}")
    if max_residual is not None:
        r = max(_pair_residual(X[None], a.uv, cam_a.projection)[0], _pair_residual(X[None], b.uv, cam_b.projection)[0])
        if r > max_residual:
            raise InconsistentPair(f"pair residual {r:.1f} px exceeds {max_residual} px")
    return Candidate3D(
        part=a.part,
        position=X,
        confidence=0.5 * (a.confidence + b.confidence),
        sources=((a.view_id, ia), (b.view_id, ib)),
    )


def generate_candidates(
    detections: Sequence[Detection2D],
    cameras: Sequence[CameraView],
    joint_count: int,
    diagnostics: TriangulationDiagnostics | None = None,
    max_residual: float | None = DEFAULT_MAX_PAIR_RESIDUAL,
) -> list[list[Candidate3D]]:
    """Triangulate every cross-view pair of same-part detections.

    Returns one candidate list per part. Rejected pairs (degenerate, behind a
    camera, or reprojecting beyond ``max_residual`` pixels) are dropped and
    tallied in ``diagnostics`` when given.
    """
    diag = diagnostics if diagnostics is not None else TriangulationDiagnostics()
    cams = cameras_by_id(cameras)
    per_view = index_by_view(detections)
    for v in per_view:
        if v not in cams:
            raise ValueError(f"detection references unknown view {v}")

    # part -> view -> [(index, detection)]
    by_part: list[dict[int, list[tuple[int, Detection2D]]]] = [{} for _ in range(joint_count)]
    for v, dets in per_view.items():
        for k, d in enumerate(dets):
            if d.part >= joint_count:
                raise ValueError(f"detection part {d.part} out of range")
            by_part[d.part].setdefault(v, []).append((k, d))

    out: list[list[Candidate3D]] = []
    for part, views in enumerate(by_part):
        pairs = []
        for va, vb in itertools.combinations(sorted(views), 2):
            for (ia, da), (ib, db) in itertools.product(views[va], views[vb]):
                pairs.append((va, ia, da, vb, ib, db))
        cands: list[Candidate3D] = []
        if pairs:
            A = np.stack([
                dlt_matrix(da.uv, db.uv, cams[va].projection, cams[vb].projection)
                for va, _, da, vb, _, db in pairs
            ])
            X, bad = _solve_batch(A)
            P_a = np.stack([cams[p[0]].projection for p in pairs])
            P_b = np.stack([cams[p[3]].projection for p in pairs])
            Xs = np.where(bad[:, None], 0.0, X)
            front = np.ones(len(pairs), dtype=bool)
            for P, views in ((P_a, [p[0] for p in pairs]), (P_b, [p[3] for p in pairs])):
                scale = np.array([cams[v]._depth_scale for v in views])
                front &= scale * (np.einsum("mj,mj->m", P[:, 2, :3], Xs) + P[:, 2, 3]) > 0
            if max_residual is not None:
                uv_a = np.array([p[2].uv for p in pairs])
                uv_b = np.array([p[5].uv for p in pairs])
                with np.errstate(invalid="ignore", divide="ignore"):
                    res = np.maximum(_batch_residual(Xs, uv_a, P_a), _batch_residual(Xs, uv_b, P_b))
            for k, ((va, ia, da, vb, ib, db), x, b) in enumerate(zip(pairs, X, bad)):
                if b:
                    diag.degenerate += 1
                    continue
                if not front[k]:
                    diag.behind_camera += 1
                    continue
                if max_residual is not None and not res[k] <= max_residual:
                    diag.inconsistent += 1
                    continue
                cands.append(Candidate3D(
                    part=part,
                    position=x,
                    confidence=0.5 * (da.confidence + db.confidence),
                    sources=((va, ia), (vb, ib)),
                ))
        diag.accepted += len(cands)
        diag.per_part_accepted[part] = len(cands)
        out.append(cands)
    if diag.rejected:
        logger.debug("triangulation rejected %d pairs", diag.rejected)
    return out
