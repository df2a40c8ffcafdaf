import itertools
import random

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_camera, stereo_pair
from oracles import count_accepted_pairs, midpoint_of_rays
from shapepose.geometry import Detection2D, project
from shapepose.synth import SceneConfig, generate_scene
from shapepose.triangulation import (
    CheiralityViolation,
    DegenerateRays,
    InconsistentPair,
    TriangulationDiagnostics,
    generate_candidates,
    triangulate_pair,
)


def _dets(cams, X, part=0, conf=(0.8, 0.6)):
    return [Detection2D(part, project(c, X), w, c.view_id) for c, w in zip(cams, conf)]


def test_stereo_exact_recovery():
    a, b = stereo_pair()
    X = np.array([0.2, 0.1, 3.0])
    da, db = _dets((a, b), X)
    cand = triangulate_pair(da, db, a, b)
    np.testing.assert_allclose(cand.position, X, atol=1e-9)
    assert cand.confidence == pytest.approx(0.7)
    assert cand.sources == ((0, 0), (1, 0))


def test_same_view_pair_is_rejected():
    a, _ = stereo_pair()
    X = np.array([0.0, 0.0, 3.0])
    d = Detection2D(0, project(a, X), 0.9, 0)
    with pytest.raises(ValueError):
        triangulate_pair(d, d, a, a)


def test_part_mismatch_is_rejected():
    a, b = stereo_pair()
    X = np.array([0.0, 0.0, 3.0])
    da, db = _dets((a, b), X)
    with pytest.raises(ValueError):
        triangulate_pair(da, Detection2D(1, db.uv, 0.5, 1), a, b)


def test_point_behind_cameras_is_rejected():
    a, b = stereo_pair()
    X = np.array([0.3, 0.2, -3.0])
    da, db = _dets((a, b), X)
    with pytest.raises(CheiralityViolation):
        triangulate_pair(da, db, a, b)


def test_coincident_cameras_are_degenerate():
    a, _ = stereo_pair()
    twin = type(a)(a.projection, a.width, a.height, 7)
    X = np.array([0.1, 0.0, 3.0])
    da = Detection2D(0, project(a, X), 0.9, 0)
    db = Detection2D(0, project(twin, X), 0.9, 7)
    with pytest.raises(DegenerateRays):
        triangulate_pair(da, db, a, twin)


def test_inconsistent_pair_gate():
    a, b = stereo_pair()
    X = np.array([0.0, 0.0, 3.0])
    da, db = _dets((a, b), X)
    shifted = Detection2D(0, db.uv + np.array([0.0, 40.0]), 0.5, 1)
    triangulate_pair(da, shifted, a, b)  # no gate by default
    with pytest.raises(InconsistentPair):
        triangulate_pair(da, shifted, a, b, max_residual=10.0)


def test_noisy_error_matches_midpoint_oracle():
    a, b = stereo_pair(baseline=1.0, focal=1000.0)
    rng = np.random.default_rng(0)
    X = np.array([0.1, -0.2, 3.0])
    ours, oracle = [], []
    for _ in range(500):
        ua = project(a, X) + rng.normal(scale=2.0 / np.sqrt(2), size=2)
        ub = project(b, X) + rng.normal(scale=2.0 / np.sqrt(2), size=2)
        c = triangulate_pair(Detection2D(0, ua, 0.9, 0), Detection2D(0, ub, 0.9, 1), a, b)
        ours.append(np.linalg.norm(c.position - X))
        oracle.append(np.linalg.norm(midpoint_of_rays(a.projection, ua, b.projection, ub) - X))
    ratio = np.mean(ours) / np.mean(oracle)
    assert abs(ratio - 1.0) <= 0.2, ratio


@given(st.integers(0, 2**32 - 1))
def test_noiseless_round_trip(seed):
    rng = np.random.default_rng(seed)
    a, b = random_camera(rng, 0), random_camera(rng, 1)
    X = rng.uniform(-1, 1, size=3)
    if a.depth(X)[0] <= 0.5 or b.depth(X)[0] <= 0.5:
        return
    if np.linalg.norm(a.center - b.center) < 0.5:
        return
    da, db = _dets((a, b), X)
    c = triangulate_pair(da, db, a, b)
    np.testing.assert_allclose(c.position, X, atol=1e-8)


def test_four_views_give_six_candidates_per_part(topology, ring):
    truth, obs = generate_scene(SceneConfig(n_persons=1, n_cameras=4, seed=2))
    C = generate_candidates(obs[0].detections, truth.cameras, topology.joint_count)
    assert [len(c) for c in C] == [6] * topology.joint_count


def test_empty_input_gives_empty_sets(topology, ring):
    C = generate_candidates([], ring, topology.joint_count)
    assert C == [[] for _ in range(topology.joint_count)]


def test_unknown_view_and_part_are_rejected(topology, ring):
    with pytest.raises(ValueError):
        generate_candidates([Detection2D(0, np.zeros(2), 0.5, 99)], ring, topology.joint_count)
    with pytest.raises(ValueError):
        generate_candidates([Detection2D(20, np.zeros(2), 0.5, 0)], ring, topology.joint_count)


def test_candidate_count_matches_pair_enumeration_oracle(topology):
    cfg = SceneConfig(n_persons=2, n_cameras=3, pixel_sigma=1.0, seed=4)
    truth, obs = generate_scene(cfg)
    dets = list(obs[0].detections)
    dets.append(Detection2D(5, np.array([600.0, 400.0]), 0.3, 1))
    diag = TriangulationDiagnostics()
    C = generate_candidates(dets, truth.cameras, topology.joint_count, diag)
    assert [len(c) for c in C] == count_accepted_pairs(dets, truth.cameras, topology.joint_count)
    assert diag.accepted == sum(len(c) for c in C)


def test_candidate_count_matches_oracle_without_gate(topology):
    cfg = SceneConfig(n_persons=3, n_cameras=4, pixel_sigma=2.0, p_fp=0.2, seed=9)
    truth, obs = generate_scene(cfg)
    dets = obs[0].detections
    C = generate_candidates(dets, truth.cameras, topology.joint_count, max_residual=None)
    assert [len(c) for c in C] == count_accepted_pairs(dets, truth.cameras, topology.joint_count, None)


def test_count_bounded_by_pair_products(topology):
    cfg = SceneConfig(n_persons=3, n_cameras=5, pixel_sigma=2.0, p_miss=0.3, p_fp=0.1, seed=5)
    truth, obs = generate_scene(cfg)
    dets = obs[0].detections
    C = generate_candidates(dets, truth.cameras, topology.joint_count, max_residual=None)
    for part in range(topology.joint_count):
        per_view = {}
        for d in dets:
            if d.part == part:
                per_view[d.view_id] = per_view.get(d.view_id, 0) + 1
        bound = sum(per_view[a] * per_view[b] for a, b in itertools.combinations(sorted(per_view), 2))
        assert len(C[part]) <= bound


def test_candidates_independent_of_view_block_order(topology):
    cfg = SceneConfig(n_persons=2, n_cameras=4, pixel_sigma=2.0, seed=6)
    truth, obs = generate_scene(cfg)
    dets = obs[0].detections
    by_view = {}
    for d in dets:
        by_view.setdefault(d.view_id, []).append(d)
    views = list(by_view)
    random.Random(0).shuffle(views)
    reordered = [d for v in views for d in by_view[v]]
    key = lambda c: (c.sources, tuple(np.round(c.position, 12)))
    a = generate_candidates(dets, truth.cameras, topology.joint_count)
    b = generate_candidates(reordered, truth.cameras, topology.joint_count)
    for ca, cb in zip(a, b):
        assert sorted(map(key, ca)) == sorted(map(key, cb))


def test_candidate_sources_reference_distinct_views(topology):
    cfg = SceneConfig(n_persons=2, n_cameras=4, pixel_sigma=2.0, p_fp=0.1, seed=8)
    truth, obs = generate_scene(cfg)
    for cands in generate_candidates(obs[0].detections, truth.cameras, topology.joint_count):
        for c in cands:
            assert c.sources[0][0] != c.sources[1][0]
            assert np.all(np.isfinite(c.position))
