import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.spatial.transform import Rotation

from oracles import fk_homogeneous
from shapepose.body_model import (
    CONFIDENCE_WEIGHTED,
    GATED,
    LOG_SCALE_LIMIT,
    BodyParams,
    DampedGaussNewton,
    InsufficientTargets,
    ShapeObjective,
    clamp_increment,
    fit_body,
    fk_jacobian,
    forward_kinematics,
    shape_energy,
    shape_weights,
)
from shapepose.geometry import PoseEstimate, default_skeleton

TOPO = default_skeleton()
N = TOPO.joint_count


def random_params(rng, rot_scale=0.6, beta_scale=0.3):
    return BodyParams(
        rng.uniform(-1, 1, 3),
        rng.normal(scale=rot_scale, size=(N, 3)),
        rng.uniform(-beta_scale, beta_scale, N - 1),
    )


def perturb(params, rng, scale=0.05):
    return BodyParams.from_vector(params.to_vector() + rng.normal(scale=scale, size=BodyParams.size(N)), N)


def test_identity_pose_is_rest_skeleton():
    np.testing.assert_allclose(forward_kinematics(BodyParams.zeros(N), TOPO), TOPO.rest_positions(), atol=1e-15)


def test_yaw_half_turn_rotates_about_root():
    t = np.array([0.4, -0.2, 1.0])
    rot = np.zeros((N, 3))
    rot[TOPO.hip_index] = [0.0, 0.0, np.pi]
    X = forward_kinematics(BodyParams(t, rot, np.zeros(N - 1)), TOPO)
    rest = TOPO.rest_positions()
    expected = t + rest * np.array([-1.0, -1.0, 1.0])
    np.testing.assert_allclose(X, expected, atol=1e-12)


def test_matches_homogeneous_transform_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        p = random_params(rng, rot_scale=1.0)
        np.testing.assert_allclose(forward_kinematics(p, TOPO), fk_homogeneous(p, TOPO), atol=1e-10, rtol=0)


def test_log_scale_clamped():
    p = BodyParams(np.zeros(3), np.zeros((N, 3)), np.full(N - 1, 5.0))
    assert np.all(p.bone_log_scale == LOG_SCALE_LIMIT)
    lengths = np.linalg.norm(np.diff(forward_kinematics(p, TOPO)[[0, 1]], axis=0))
    assert lengths == pytest.approx(2 * np.linalg.norm(TOPO.rest_offset[1]))


def test_nonfinite_params_rejected():
    with pytest.raises(ValueError):
        BodyParams([np.nan, 0, 0], np.zeros((N, 3)), np.zeros(N - 1))


@given(st.integers(0, 2**31 - 1))
def test_rigid_motion_equivariance(seed):
    rng = np.random.default_rng(seed)
    p = random_params(rng)
    R = Rotation.from_rotvec(rng.normal(size=3))
    d = rng.normal(size=3)
    moved_root = (R * Rotation.from_rotvec(np.array(p.joint_rotation[TOPO.hip_index]))).as_rotvec()
    rot = p.joint_rotation.copy()
    rot[TOPO.hip_index] = moved_root
    q = BodyParams(R.apply(p.root_translation) + d, rot, p.bone_log_scale)
    np.testing.assert_allclose(forward_kinematics(q, TOPO), R.apply(forward_kinematics(p, TOPO)) + d, atol=1e-10)


def test_jacobian_matches_finite_differences():
    rng = np.random.default_rng(1)
    h = 1e-6
    for _ in range(20):
        p = random_params(rng)
        _, J = fk_jacobian(p, TOPO)
        v = p.to_vector()
        fd = np.empty_like(J)
        for k in range(len(v)):
            e = np.zeros_like(v)
            e[k] = h
            hi = forward_kinematics(BodyParams.from_vector(v + e, N), TOPO).ravel()
            lo = forward_kinematics(BodyParams.from_vector(v - e, N), TOPO).ravel()
            fd[:, k] = (hi - lo) / (2 * h)
        np.testing.assert_allclose(J, fd, atol=1e-7)


# ---- shape energy ---------------------------------------------------------------


@pytest.mark.parametrize("mode", [GATED, CONFIDENCE_WEIGHTED])
def test_energy_zero_at_model(mode):
    p = random_params(np.random.default_rng(2))
    X = PoseEstimate(forward_kinematics(p, TOPO), np.full(N, 0.1))
    e, gx, gt = shape_energy(X, p, TOPO, mode=mode)
    assert e == 0.0
    assert np.all(gx == 0) and np.all(gt == 0)


def test_gate_closed_for_confident_joints():
    p = BodyParams.zeros(N)
    X = PoseEstimate(np.random.default_rng(3).normal(size=(N, 3)), np.full(N, 0.9))
    e, gx, _ = shape_energy(X, p, TOPO, rho_3d=0.25, mode=GATED)
    assert e == 0.0 and np.all(gx == 0)


def test_single_low_confidence_joint_displaced():
    p = BodyParams.zeros(N)
    X = TOPO.rest_positions().copy()
    X[5] += [0.1, 0.0, 0.0]
    w = np.full(N, 0.9)
    w[5] = 0.1
    e, _, _ = shape_energy(PoseEstimate(X, w), p, TOPO, rho_3d=0.25, mode=GATED)
    assert e == pytest.approx(0.01, rel=1e-12)


def test_missing_joints_carry_no_weight():
    w = np.array([0.0, 0.1, 0.5])
    present = w > 0
    np.testing.assert_array_equal(shape_weights(w, present, 0.25, GATED), [0, 1, 0])
    np.testing.assert_array_equal(shape_weights(w, present, 0.25, CONFIDENCE_WEIGHTED), [0, 0.1, 0.5])
    with pytest.raises(ValueError):
        shape_weights(w, present, 0.25, "neither")


def _rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


@pytest.mark.parametrize("mode", [GATED, CONFIDENCE_WEIGHTED])
def test_energy_gradients_match_finite_differences(mode):
    rng = np.random.default_rng(4)
    h = 1e-6
    worst = 0.0
    for _ in range(100):
        p = random_params(rng)
        X = forward_kinematics(p, TOPO) + rng.normal(scale=0.1, size=(N, 3))
        w = rng.uniform(0.01, 1.0, N)
        _, gx, gt = shape_energy(X, p, TOPO, 0.5, mode, confidence=w)
        fx = np.empty_like(X)
        for j in range(N):
            for a in range(3):
                Xp, Xm = X.copy(), X.copy()
                Xp[j, a] += h
                Xm[j, a] -= h
                fx[j, a] = (shape_energy(Xp, p, TOPO, 0.5, mode, w)[0] - shape_energy(Xm, p, TOPO, 0.5, mode, w)[0]) / (2 * h)
        v = p.to_vector()
        ft = np.empty_like(v)
        for k in range(len(v)):
            e = np.zeros_like(v)
            e[k] = h
            hi = shape_energy(X, BodyParams.from_vector(v + e, N), TOPO, 0.5, mode, w)[0]
            lo = shape_energy(X, BodyParams.from_vector(v - e, N), TOPO, 0.5, mode, w)[0]
            ft[k] = (hi - lo) / (2 * h)
        worst = max(worst, _rel_err(gx, fx), _rel_err(gt, ft))
    assert worst <= 1e-5


# ---- fitting ------------------------------------------------------------------


def test_fit_fixed_point():
    p = random_params(np.random.default_rng(5))
    target = PoseEstimate(forward_kinematics(p, TOPO), np.ones(N))
    out = fit_body(target, p, TOPO)
    np.testing.assert_array_equal(out.to_vector(), p.to_vector())


def test_fit_recovers_small_perturbation():
    rng = np.random.default_rng(6)
    for _ in range(10):
        truth = random_params(rng)
        target = PoseEstimate(forward_kinematics(truth, TOPO), np.ones(N))
        out = fit_body(target, perturb(truth, rng), TOPO, iterations=30)
        residual = np.linalg.norm(forward_kinematics(out, TOPO) - target.joints, axis=1)
        assert residual.max() <= 1e-3


def test_fit_ignores_missing_joint():
    # 7 mm per axis matches the spread of triangulated cluster centers on the benchmark scenes
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(30):
        truth = random_params(rng)
        noisy = forward_kinematics(truth, TOPO) + rng.normal(scale=0.007, size=(N, 3))
        init = perturb(truth, rng)
        full = fit_body(PoseEstimate(noisy, np.ones(N)), init, TOPO)
        drop = int(rng.integers(1, N))
        w = np.ones(N)
        w[drop] = 0.0
        ablated = fit_body(PoseEstimate(noisy, w), init, TOPO)
        keep = np.arange(N) != drop

        def rms(params):
            return np.sqrt(np.mean(np.sum((forward_kinematics(params, TOPO) - noisy)[keep] ** 2, axis=1)))

        worst = max(worst, abs(rms(full) - rms(ablated)))
    assert worst <= 5e-3


def test_fit_energy_never_increases():
    rng = np.random.default_rng(8)
    rule = DampedGaussNewton()
    for _ in range(10):
        truth = random_params(rng)
        pts = forward_kinematics(truth, TOPO) + rng.normal(scale=0.03, size=(N, 3))
        w = rng.uniform(0.2, 1.0, N)
        obj = ShapeObjective(pts, w, TOPO)
        params = perturb(truth, rng, 0.2)
        energies = [obj.energy(params)]
        for _ in range(30):
            delta = rule(obj.gradient(params), params, obj)
            params = BodyParams.from_vector(params.to_vector() + delta, N)
            energies.append(obj.energy(params))
        assert all(b <= a for a, b in zip(energies, energies[1:]))


def test_too_few_targets():
    w = np.zeros(N)
    w[[0, 1, 2]] = 1.0
    with pytest.raises(InsufficientTargets):
        fit_body(PoseEstimate(TOPO.rest_positions(), w), BodyParams.zeros(N), TOPO)


def test_missing_hip_is_insufficient():
    w = np.ones(N)
    w[TOPO.hip_index] = 0.0
    with pytest.raises(InsufficientTargets):
        fit_body(PoseEstimate(TOPO.rest_positions(), w), BodyParams.zeros(N), TOPO)


@given(st.integers(0, 2**31 - 1))
def test_clamped_increments_stay_in_bounds(seed):
    rng = np.random.default_rng(seed)
    p = random_params(rng, beta_scale=0.69)
    delta = clamp_increment(rng.normal(scale=10, size=BodyParams.size(N)), p)
    assert np.all(np.isfinite(delta))
    assert np.linalg.norm(delta[:3]) <= 0.5 + 1e-12
    assert np.all(np.linalg.norm(delta[3:3 + 3 * N].reshape(N, 3), axis=1) <= 0.5 + 1e-12)
    assert np.all(np.abs(p.bone_log_scale + delta[3 + 3 * N:]) <= LOG_SCALE_LIMIT + 1e-12)
