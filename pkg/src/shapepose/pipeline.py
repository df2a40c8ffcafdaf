"""Per-frame pipeline: candidates -> clusters -> proposals -> filtering -> refinement."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .association import InstanceProposal, ProposalConfig, associate
from .body_model import UpdateRule
from .geometry import CameraView, Detection2D, LimbAffinity, PoseEstimate, SkeletonTopology
from .refinement import RefineConfig, RefineResult, match_detections, refine_instance
from .triangulation import DEFAULT_MAX_PAIR_RESIDUAL, TriangulationDiagnostics, generate_candidates


@dataclass(eq=False)
class FrameResult:
    proposals: list[InstanceProposal]
    initial: list[PoseEstimate]
    refined: list[RefineResult] = field(default_factory=list)
    diagnostics: TriangulationDiagnostics = field(default_factory=TriangulationDiagnostics)

    @property
    def final(self) -> list[PoseEstimate]:
        return [r.pose for r in self.refined]


def process_frame(
    detections: Sequence[Detection2D],
    cameras: Sequence[CameraView],
    topology: SkeletonTopology,
    proposal_cfg: ProposalConfig = ProposalConfig(),
    refine_cfg: RefineConfig | None = RefineConfig(),
    affinities: Sequence[LimbAffinity] | None = None,
    rule: UpdateRule | None = None,
    record_history: bool = False,
    max_pair_residual: float | None = DEFAULT_MAX_PAIR_RESIDUAL,
) -> FrameResult:
    """Run both stages on one frame. ``refine_cfg=None`` stops after association."""
    diag = TriangulationDiagnostics()
    candidates = generate_candidates(detections, cameras, topology.joint_count, diag, max_pair_residual)
    proposals, initial = associate(candidates, topology, proposal_cfg, affinities, cameras, detections)
    result = FrameResult(proposals, initial, diagnostics=diag)
    if refine_cfg is None:
        return result
    matched = match_detections(initial, detections, cameras, refine_cfg.rho_2d)
    claimed = {
        (obs.view_ids[k], int(obs.det_index[j, k]))
        for obs in matched
        for j, k in zip(*np.nonzero(obs.matched))
    }
    result.refined = [
        refine_instance(x0, obs, cameras, topology, refine_cfg, rule, record_history, detections, claimed)
        for x0, obs in zip(initial, matched)
    ]
    return result
