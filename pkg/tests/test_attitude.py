import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from evstab.attitude import attitude_at, attitude_at_array, from_poses, fuse_imu
from evstab.core import Quat, quat_angle, quat_to_rot
from evstab.errors import InsufficientSamples, OutOfRange
from evstab.ingest import ImuSample, PoseSample
from evstab.sim import LOOK_FORWARD, SimConfig, Trajectory, Wave, build_trajectory, synthesize_imu, synthesize_poses


def _angle_between(a, b):
    a = np.asarray(a) / np.linalg.norm(a)
    b = np.asarray(b) / np.linalg.norm(b)
    return math.degrees(math.acos(np.clip(a @ b, -1, 1)))


def _poses(quats, dt=0.01):
    return [PoseSample(k * dt, np.zeros(3), q) for k, q in enumerate(quats)]


def test_stationary_imu_keeps_initial_tilt():
    q0 = Quat.from_axis_angle([1, 0, 0], 0.3)
    g_body = quat_to_rot(q0).T @ [0, 0, 9.81]
    samples = [ImuSample(k / 200, g_body, np.zeros(3)) for k in range(2001)]
    tr = fuse_imu(samples, gain=0.02, q0=q0)
    assert math.degrees(quat_angle(Quat.from_array(tr.quats[-1]), q0)) < 0.1


def test_constant_z_rate_closed_form():
    rate = 1000
    n = int(math.pi * rate)
    samples = [ImuSample(k / rate, np.array([0, 0, 9.81]), np.array([0, 0, 1.0])) for k in range(n + 1)]
    tr = fuse_imu(samples, gain=0.0)
    expected = Quat.from_axis_angle([0, 0, 1], n / rate)
    assert math.degrees(quat_angle(Quat.from_array(tr.quats[-1]), expected)) < 0.5
    half = Quat.from_axis_angle([0, 0, 1], math.pi)
    assert math.degrees(quat_angle(attitude_at(tr, math.pi), half)) < 0.5


def test_tilt_correction_converges_to_gravity():
    samples = [ImuSample(k / 200, np.array([9.81, 0, 0]), np.zeros(3)) for k in range(1001)]
    tr = fuse_imu(samples, gain=0.05)
    R = quat_to_rot(Quat.from_array(tr.quats[-1]))
    # world gravity (down) seen in the body frame
    assert _angle_between(R.T @ [0, 0, -1], [-1, 0, 0]) < 1.0


def test_fuse_imu_needs_two_samples():
    with pytest.raises(InsufficientSamples):
        fuse_imu([ImuSample(0.0, np.zeros(3), np.zeros(3))])


def test_fuse_imu_rejects_bad_gain():
    s = [ImuSample(k * 0.01, np.array([0, 0, 9.81]), np.zeros(3)) for k in range(3)]
    with pytest.raises(ValueError):
        fuse_imu(s, gain=1.5)


def test_gyro_integration_matches_simulated_attitude():
    traj = build_trajectory(SimConfig("rot-dominant", seed=3, duration=5.0))
    imu = synthesize_imu(traj, rate=1000)
    tr = fuse_imu(imu, gain=0.0, q0=traj.quaternion(0.0))
    worst = max(math.degrees(quat_angle(attitude_at(tr, t), traj.quaternion(t))) for t in np.linspace(0, 5, 51))
    assert worst < 0.5


def test_from_poses_identity_passthrough(rng):
    qs = [Quat.from_array(rng.normal(size=4), normalize=True) for _ in range(5)]
    tr = from_poses(_poses(qs))
    for k, q in enumerate(qs):
        np.testing.assert_allclose(quat_to_rot(attitude_at(tr, k * 0.01)), quat_to_rot(q), atol=1e-12)


def test_from_poses_applies_extrinsic_by_conjugation(rng):
    q_o = Quat.from_axis_angle([0, 0, 1], math.pi / 2)
    qs = [Quat.from_array(rng.normal(size=4), normalize=True) for _ in range(3)]
    tr = from_poses(_poses(qs), q_o)
    Ro = quat_to_rot(q_o)
    for k, q in enumerate(qs):
        np.testing.assert_allclose(quat_to_rot(Quat.from_array(tr.quats[k])), Ro @ quat_to_rot(q) @ Ro.T,
                                   atol=1e-12)


def test_single_pose_is_insufficient():
    with pytest.raises(InsufficientSamples):
        from_poses(_poses([Quat()]))


def test_slerp_midpoint():
    tr = from_poses(_poses([Quat(), Quat.from_axis_angle([0, 0, 1], math.pi / 2)], dt=1.0))
    mid = attitude_at(tr, 0.5)
    np.testing.assert_allclose(quat_to_rot(mid), quat_to_rot(Quat.from_axis_angle([0, 0, 1], math.pi / 4)),
                               atol=1e-9)


def test_clamp_inside_margin_and_out_of_range():
    last = Quat.from_axis_angle([0, 1, 0], 0.2)
    tr = from_poses(_poses([Quat(), last], dt=1.0))
    np.testing.assert_allclose(attitude_at(tr, 1.0 + 0.010).as_array(), last.as_array(), atol=1e-12)
    with pytest.raises(OutOfRange):
        attitude_at(tr, 1.0 + 0.0101)
    with pytest.raises(OutOfRange):
        attitude_at_array(tr, [-0.02])


@given(st.floats(0.0, 1.999))
def test_attitude_is_continuous(t):
    traj = build_trajectory(SimConfig("fast-switching", seed=1, duration=2.0))
    tr = from_poses(synthesize_poses(traj, 200))
    assert math.degrees(quat_angle(attitude_at(tr, t), attitude_at(tr, t + 1e-6))) < 0.01


def test_doubling_pose_rate_converges():
    traj = build_trajectory(SimConfig("rot-dominant", seed=2, duration=2.0))
    a = from_poses(synthesize_poses(traj, 200))
    b = from_poses(synthesize_poses(traj, 400))
    ts = np.linspace(0, 2, 301)
    qa, qb = attitude_at_array(a, ts), attitude_at_array(b, ts)
    ang = np.degrees(2 * np.arccos(np.clip(np.abs(np.sum(qa * qb, axis=1)), 0, 1)))
    assert ang.max() < 0.05


def test_tracks_are_camera_frame_for_look_forward_base():
    traj = Trajectory(1.0, LOOK_FORWARD.copy(), np.zeros(3), np.zeros(3),
                      ((Wave(0.1, 1.0, 0.0),), (), ()), ((), (), ()))
    tr = from_poses(synthesize_poses(traj, 100))
    np.testing.assert_allclose(quat_to_rot(attitude_at(tr, 0.37)), traj.rotation(0.37), atol=1e-6)
