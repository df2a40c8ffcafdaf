"""Confidence-aware voting, hip-anchored instance proposals and limb filtering."""

from __future__ import annotations

import itertools
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import (
    CameraView,
    Detection2D,
    LimbAffinity,
    PoseEstimate,
    SkeletonTopology,
)
from .triangulation import Candidate3D

MIN_CLUSTER_SIZE = 3


@dataclass(frozen=True)
class ProposalConfig:
    """Association thresholds. Distances in meters.

    The proposal box spans ``anchor +- box_half_width`` horizontally and
    ``[anchor_z - box_below, anchor_z + box_above]`` vertically.
    """

    rho: float = 0.15
    box_half_width: float = 1.0
    box_below: float = 1.2
    box_above: float = 1.0
    min_coverage: float = 0.9
    min_confidence: float = 0.3
    affinity_min: float = 0.5
    limb_length_min: float = 0.5
    limb_length_max: float = 1.8
    # Proposals keeping this fraction of parts or fewer after limb filtering
    # are dropped; 0 disables the check.
    min_filtered_coverage: float = 0.6
    # One detection supports at most one cluster per part (see consolidate_part).
    exclusive_detections: bool = True
    # Refill parts left empty by limb filtering (see reassign_evicted).
    reassign_evicted: bool = True

    def __post_init__(self):
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        if min(self.box_half_width, self.box_below, self.box_above) <= 0:
            raise ValueError("box dimensions must be positive")
        if not 0 <= self.min_filtered_coverage <= 1:
            raise ValueError("min_filtered_coverage must lie in [0, 1]")
        if not 0 <= self.min_coverage <= 1 or not 0 <= self.affinity_min <= 1:
            raise ValueError("coverage and affinity thresholds must lie in [0, 1]")
        if not 0 < self.limb_length_min <= self.limb_length_max:
            raise ValueError("limb length bounds must satisfy 0 < min <= max")


@dataclass(frozen=True, eq=False)
class JointCluster:
    part: int
    center: np.ndarray
    members: tuple[Candidate3D, ...]
    confidence: float
    seed: Candidate3D

    @property
    def size(self) -> int:
        return len(self.members)


@dataclass(frozen=True, eq=False)
class InstanceProposal:
    """A hip-anchored instance.

    ``coverage`` counts parts with any cluster inside the box;
    ``member_clusters`` holds the cluster each part was finally assigned
    after contested clusters went to the nearest anchor.
    """

    anchor: np.ndarray
    box: tuple[np.ndarray, np.ndarray]
    member_clusters: tuple[JointCluster | None, ...]
    coverage: float
    mean_confidence: float

    def contains(self, point) -> bool:
        lo, hi = self.box
        return bool(np.all(point >= lo) and np.all(point <= hi))


def _vote_order(candidates: Sequence[Candidate3D]) -> list[int]:
    # Highest confidence first; ties broken by lexicographic source order.
    return sorted(range(len(candidates)), key=lambda k: (-candidates[k].confidence, candidates[k].sources))


def greedy_vote(candidates: Sequence[Candidate3D], rho: float) -> list[tuple[Candidate3D, list[Candidate3D]]]:
    """Run the seed-and-absorb loop until the candidate set is exhausted.

    Returns every ``(seed, members)`` group in seeding order, including the
    groups later discarded for being too small.
    """
    if rho <= 0:
        raise ValueError("rho must be positive")
    if not candidates:
        return []
    order = _vote_order(candidates)
    pos = np.array([c.position for c in candidates])
    alive = np.ones(len(candidates), dtype=bool)
    groups = []
    for k in order:
        if not alive[k]:
            continue
        near = alive & (np.linalg.norm(pos - pos[k], axis=1) < rho)
        idx = [j for j in order if near[j]]
        alive[near] = False
        groups.append((candidates[k], [candidates[j] for j in idx]))
    return groups


def cluster_part(candidates: Sequence[Candidate3D], rho: float) -> list[JointCluster]:
    """Confidence-aware voting for one part label.

    Clusters with fewer than three members are treated as outliers.
    """
    clusters = []
    for seed, members in greedy_vote(candidates, rho):
        if len(members) < MIN_CLUSTER_SIZE:
            continue
        clusters.append(JointCluster(
            part=seed.part,
            center=np.mean([m.position for m in members], axis=0),
            members=tuple(members),
            confidence=float(np.mean([m.confidence for m in members])),
            seed=seed,
        ))
    return clusters


MAX_CLAIM_COMBINATIONS = 512


def _claim_score(claim, sources, pos) -> tuple[int, float]:
    keep = np.array([claim[a[0]] == a[1] and claim[b[0]] == b[1] for a, b in sources])
    if not keep.any():
        return 0, 0.0
    kept = pos[keep]
    return int(keep.sum()), float(np.sum((kept - kept.mean(axis=0)) ** 2))


def _claim_views(members: Sequence[Candidate3D]) -> dict[int, int]:
    """Pick one source detection per view for a cluster.

    The choice keeps the most members, then the tightest set. Every
    combination is scored when there are at most ``MAX_CLAIM_COMBINATIONS``;
    otherwise views are improved one at a time from the seed's detections.
    """
    sources = [m.sources for m in members]
    pos = np.array([m.position for m in members])
    options: dict[int, list[int]] = {}
    for src in sorted({s for pair in sources for s in pair}):
        options.setdefault(src[0], []).append(src[1])
    views = sorted(options)

    def better(a, b):
        return a[0] > b[0] or (a[0] == b[0] and a[1] < b[1])

    if np.prod([len(options[v]) for v in views]) <= MAX_CLAIM_COMBINATIONS:
        best, best_score = None, None
        for combo in itertools.product(*(options[v] for v in views)):
            claim = dict(zip(views, combo))
            score = _claim_score(claim, sources, pos)
            if best is None or better(score, best_score):
                best, best_score = claim, score
        return best
    ref = members[_vote_order(members)[0]]
    claim = {v: options[v][0] for v in views}
    claim.update(dict(ref.sources))
    score = _claim_score(claim, sources, pos)
    improved = True
    while improved:
        improved = False
        for v in views:
            for d in options[v]:
                trial = {**claim, v: d}
                s = _claim_score(trial, sources, pos)
                if better(s, score):
                    claim, score, improved = trial, s, True
    return claim


def consolidate_part(candidates: Sequence[Candidate3D], rho: float) -> list[JointCluster]:
    """Voting in which each 2D detection supports at most one cluster.

    Clusters from ``cluster_part`` keep only members that agree with one
    detection per view (see ``_claim_views``). Clusters claim in order of
    size, and detections claimed by one are unavailable to the rest.
    Released candidates are clustered again until no new cluster forms.
    Without this, pairs that mix two people's detections and land within
    ``rho`` of a real joint bias the cluster mean, and they can form
    clusters of their own.
    """
    out: list[JointCluster] = []
    claimed: set[tuple[int, int]] = set()
    pool = list(candidates)
    while pool:
        progress = False
        released: list[Candidate3D] = []
        # larger clusters claim first; sorted() is stable, so ties keep seeding order
        for cl in sorted(cluster_part(pool, rho), key=lambda c: -c.size):
            members = [m for m in cl.members if not claimed.intersection(m.sources)]
            if len(members) < MIN_CLUSTER_SIZE:
                continue
            claim = _claim_views(members)
            kept = [m for m in members if all(claim[v] == d for v, d in m.sources)]
            released += [m for m in members if not all(claim[v] == d for v, d in m.sources)]
            if len(kept) < MIN_CLUSTER_SIZE:
                continue
            claimed.update(src for m in kept for src in m.sources)
            out.append(JointCluster(
                part=cl.part,
                center=np.mean([m.position for m in kept], axis=0),
                members=tuple(kept),
                confidence=float(np.mean([m.confidence for m in kept])),
                seed=cl.seed,
            ))
            progress = True
        if not progress:
            break
        pool = [m for m in released if not claimed.intersection(m.sources)]
    return out


def proposal_box(anchor: np.ndarray, cfg: ProposalConfig) -> tuple[np.ndarray, np.ndarray]:
    h = cfg.box_half_width
    lo = anchor + np.array([-h, -h, -cfg.box_below])
    hi = anchor + np.array([h, h, cfg.box_above])
    return lo, hi


def generate_proposals(
    clusters: Sequence[Sequence[JointCluster]],
    topology: SkeletonTopology,
    cfg: ProposalConfig = ProposalConfig(),
) -> list[InstanceProposal]:
    """Place a fixed box on every hip cluster and keep well-covered, confident ones.

    Contested clusters go to the proposal whose anchor is nearest; the loser
    falls back to its next-nearest uncontested in-box cluster of that part.
    """
    n = topology.joint_count
    if len(clusters) != n:
        raise ValueError(f"expected {n} cluster lists, got {len(clusters)}")
    kept = []
    for hip in clusters[topology.hip_index]:
        anchor = hip.center
        lo, hi = proposal_box(anchor, cfg)
        in_box: list[list[JointCluster]] = []
        for part in range(n):
            if part == topology.hip_index:
                in_box.append([hip])
                continue
            inside = [c for c in clusters[part] if np.all(c.center >= lo) and np.all(c.center <= hi)]
            inside.sort(key=lambda c: np.linalg.norm(c.center - anchor))
            in_box.append(inside)
        covered = [b for b in in_box if b]
        coverage = len(covered) / n
        mean_conf = float(np.mean([b[0].confidence for b in covered]))
        if coverage > cfg.min_coverage and mean_conf > cfg.min_confidence:
            kept.append((hip, anchor, (lo, hi), in_box, coverage, mean_conf))

    # Nearest-anchor-wins resolution, one cluster per proposal per part.
    assigned: list[list[JointCluster | None]] = [[None] * n for _ in kept]
    for part in range(n):
        pairs = []
        for k, (_, anchor, _, in_box, _, _) in enumerate(kept):
            for c in in_box[part]:
                pairs.append((float(np.linalg.norm(c.center - anchor)), k, id(c), c))
        pairs.sort(key=lambda t: (t[0], t[1]))
        taken = set()
        for _, k, cid, c in pairs:
            if assigned[k][part] is None and cid not in taken:
                assigned[k][part] = c
                taken.add(cid)

    return [
        InstanceProposal(
            anchor=anchor,
            box=box,
            member_clusters=tuple(assigned[k]),
            coverage=coverage,
            mean_confidence=mean_conf,
        )
        for k, (_, anchor, box, _, coverage, mean_conf) in enumerate(kept)
    ]


def _source_mode(cluster: JointCluster) -> dict[int, int]:
    """Most frequent source detection per view among a cluster's members."""
    per_view: dict[int, Counter] = {}
    for m in cluster.members:
        for view, det in m.sources:
            per_view.setdefault(view, Counter())[det] += 1
    return {v: min(cnt.items(), key=lambda kv: (-kv[1], kv[0]))[0] for v, cnt in per_view.items()}


def limb_support(
    parent: JointCluster,
    child: JointCluster,
    limb: int,
    rest_length: float,
    affinity_table: dict[tuple[int, int, int, int], float] | None,
    cfg: ProposalConfig,
) -> float:
    """Support in [0, 1] that two clusters form one limb of the same person.

    With affinities, the mean score over views where both clusters have a
    source detection; otherwise 1 if the 3D length is plausible, else 0.
    """
    if affinity_table:
        src_p, src_c = _source_mode(parent), _source_mode(child)
        shared = sorted(set(src_p) & set(src_c))
        if shared:
            return float(np.mean([affinity_table.get((v, limb, src_p[v], src_c[v]), 0.0) for v in shared]))
    length = float(np.linalg.norm(child.center - parent.center))
    ok = cfg.limb_length_min * rest_length <= length <= cfg.limb_length_max * rest_length
    return 1.0 if ok else 0.0


def affinity_lookup(affinities: Sequence[LimbAffinity]) -> dict[tuple[int, int, int, int], float]:
    return {(a.view_id, a.limb, a.parent_det, a.child_det): a.score for a in affinities}


def _supported(members, limb, topology, table, cfg) -> bool:
    """Whether the child cluster of ``limb`` may stay, given the other members."""
    p, c = topology.limbs[limb]
    rest = topology.limb_rest_length
    if members[p] is not None:
        return limb_support(members[p], members[c], limb, rest[limb], table, cfg) >= cfg.affinity_min
    # Parent missing: bound the child's reach from the nearest kept ancestor.
    chain, a = rest[limb], p
    while members[a] is None and topology.parent[a] >= 0:
        chain += float(np.linalg.norm(topology.rest_offset[a]))
        a = topology.parent[a]
    if members[a] is None:
        return True
    return float(np.linalg.norm(members[c].center - members[a].center)) <= cfg.limb_length_max * chain


def _filter_members(proposal, table, topology, cfg) -> list[JointCluster | None]:
    members = list(proposal.member_clusters)
    # Limbs are in topological order, so a parent is settled before its children.
    for limb, (_, c) in enumerate(topology.limbs):
        if members[c] is not None and not _supported(members, limb, topology, table, cfg):
            members[c] = None
    return members


def _as_pose(members, topology, instance_id) -> PoseEstimate:
    X = np.full((topology.joint_count, 3), np.nan)
    w = np.zeros(topology.joint_count)
    for j, cl in enumerate(members):
        if cl is not None:
            X[j] = cl.center
            w[j] = max(cl.confidence, np.finfo(float).tiny)
    return PoseEstimate(X, w, instance_id)


def filter_cross_instance(
    proposal: InstanceProposal,
    affinities: Sequence[LimbAffinity] | None,
    cameras: Sequence[CameraView],
    detections: Sequence[Detection2D],
    topology: SkeletonTopology,
    cfg: ProposalConfig = ProposalConfig(),
    instance_id: int = 0,
) -> PoseEstimate:
    """Evict child joints whose limb support to their parent is too weak.

    ``cameras`` and ``detections`` are accepted for interface symmetry with a
    detector-backed affinity source; the scalar affinities already encode
    the per-view evidence.
    """
    table = affinity_lookup(affinities) if affinities else None
    return _as_pose(_filter_members(proposal, table, topology, cfg), topology, instance_id)


def reassign_evicted(
    proposals: Sequence[InstanceProposal],
    members: Sequence[list[JointCluster | None]],
    clusters: Sequence[Sequence[JointCluster]],
    topology: SkeletonTopology,
    affinities: Sequence[LimbAffinity] | None = None,
    cfg: ProposalConfig = ProposalConfig(),
) -> list[list[JointCluster | None]]:
    """Offer unused in-box clusters to proposals whose part is missing.

    Nearest-anchor assignment can hand one person's joint to a neighbor whose
    hip happens to be closer; limb filtering then evicts it and both people
    lose the part. Here, part by part in topological order, every cluster no
    proposal holds is offered to the proposals missing that part, nearest
    anchor first, and accepted only if it passes the same limb-support test
    as filtering. Children are re-checked against repaired parents first.
    """
    table = affinity_lookup(affinities) if affinities else None
    out = [list(m) for m in members]
    used = {id(cl) for m in out for cl in m if cl is not None}
    for limb, (_, c) in enumerate(topology.limbs):
        # A repaired parent can expose a child that only passed the reach check.
        for k in range(len(out)):
            if out[k][c] is not None and not _supported(out[k], limb, topology, table, cfg):
                used.discard(id(out[k][c]))
                out[k][c] = None
        offers = []
        for k, prop in enumerate(proposals):
            if out[k][c] is not None:
                continue
            for cl in clusters[c]:
                if id(cl) in used or not prop.contains(cl.center):
                    continue
                trial = list(out[k])
                trial[c] = cl
                if _supported(trial, limb, topology, table, cfg):
                    offers.append((float(np.linalg.norm(cl.center - prop.anchor)), k, id(cl), cl))
        offers.sort(key=lambda t: (t[0], t[1]))
        for _, k, cid, cl in offers:
            if out[k][c] is None and cid not in used:
                out[k][c] = cl
                used.add(cid)
    return out


def associate(
    candidates: Sequence[Sequence[Candidate3D]],
    topology: SkeletonTopology,
    cfg: ProposalConfig,
    affinities: Sequence[LimbAffinity] | None = None,
    cameras: Sequence[CameraView] = (),
    detections: Sequence[Detection2D] = (),
) -> tuple[list[InstanceProposal], list[PoseEstimate]]:
    """Candidates to initial poses: voting, proposals, limb filtering, reassignment.

    A proposal whose limb filtering leaves too few parts is discarded; such
    proposals are typically ghost hips where rays of different people cross.
    """
    vote = consolidate_part if cfg.exclusive_detections else cluster_part
    clusters = [vote(c, cfg.rho) for c in candidates]
    proposals = generate_proposals(clusters, topology, cfg)
    table = affinity_lookup(affinities) if affinities else None
    members = [_filter_members(p, table, topology, cfg) for p in proposals]
    if cfg.reassign_evicted:
        members = reassign_evicted(proposals, members, clusters, topology, affinities, cfg)
    kept_props, poses = [], []
    for p, m in zip(proposals, members):
        pose = _as_pose(m, topology, len(poses))
        if cfg.min_filtered_coverage > 0 and pose.present.mean() <= cfg.min_filtered_coverage:
            continue
        kept_props.append(p)
        poses.append(pose)
    return kept_props, poses
