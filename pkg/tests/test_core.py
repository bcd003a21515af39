import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.linalg import expm, logm
from scipy.spatial.transform import Rotation

from evstab.core import (
    CameraModel,
    Quat,
    distort_normalized,
    make_events,
    normalized_to_pixel,
    pixel_to_normalized,
    quat_angle,
    quat_conj,
    quat_mul,
    quat_slerp,
    quat_to_rot,
    quat_to_rotvec,
    rot_to_quat,
    undistort_normalized,
)
from evstab.errors import InvalidCalibration, NonUnitQuaternion

finite = st.floats(-1.0, 1.0, allow_nan=False)


@st.composite
def unit_quats(draw):
    v = np.array([draw(finite) for _ in range(4)])
    if np.linalg.norm(v) < 1e-3:
        v = np.array([1.0, 0.0, 0.0, 0.0])
    return Quat.from_array(v, normalize=True)


def rodrigues(axis, angle):
    k = np.asarray(axis, float) / np.linalg.norm(axis)
    Kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(angle) * Kx + (1 - math.cos(angle)) * Kx @ Kx


def test_identity_quat_gives_identity_matrix():
    np.testing.assert_array_equal(quat_to_rot(Quat()), np.eye(3))


def test_quarter_turn_about_z_maps_x_to_y():
    s = math.sqrt(2) / 2
    R = quat_to_rot(Quat(s, 0, 0, s))
    np.testing.assert_allclose(R @ [1, 0, 0], [0, 1, 0], atol=1e-12)


@given(unit_quats())
def test_rotation_matches_rodrigues_oracle(q):
    angle = 2 * math.atan2(math.sqrt(q.x**2 + q.y**2 + q.z**2), q.w)
    axis = np.array([q.x, q.y, q.z])
    R = quat_to_rot(q)
    if np.linalg.norm(axis) < 1e-9:
        np.testing.assert_allclose(R, np.eye(3), atol=1e-9)
        return
    np.testing.assert_allclose(R, rodrigues(axis, angle), atol=1e-12)


@given(unit_quats())
def test_rotation_matches_scipy(q):
    ref = Rotation.from_quat([q.x, q.y, q.z, q.w]).as_matrix()
    np.testing.assert_allclose(quat_to_rot(q), ref, atol=1e-12)


@given(unit_quats())
def test_q_and_minus_q_give_same_matrix(q):
    np.testing.assert_allclose(quat_to_rot(q), quat_to_rot(-q), atol=1e-15)


@given(unit_quats(), unit_quats())
def test_rotation_homomorphism(a, b):
    np.testing.assert_allclose(quat_to_rot(quat_mul(a, b)), quat_to_rot(a) @ quat_to_rot(b), atol=1e-9)


@given(unit_quats(), unit_quats(), unit_quats())
def test_quat_mul_associative(a, b, c):
    l = quat_mul(quat_mul(a, b), c).as_array()
    r = quat_mul(a, quat_mul(b, c)).as_array()
    np.testing.assert_allclose(l, r, atol=1e-12)


@given(unit_quats())
def test_unit_norm_and_orthonormality(q):
    assert abs(np.linalg.norm(q.as_array()) - 1) < 1e-9
    R = quat_to_rot(q)
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-9)
    assert abs(np.linalg.det(R) - 1) < 1e-9


def test_composition_chain_stays_orthonormal(rng):
    R = np.eye(3)
    for _ in range(100):
        q = Quat.from_array(rng.normal(size=4), normalize=True)
        R = R @ quat_to_rot(q)
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-7)
    assert abs(np.linalg.det(R) - 1) < 1e-7


@given(unit_quats())
def test_times_conjugate_is_identity(q):
    p = quat_mul(q, quat_conj(q))
    np.testing.assert_allclose(quat_to_rot(p), np.eye(3), atol=1e-12)


@given(unit_quats())
def test_rot_to_quat_inverts_quat_to_rot(q):
    back = rot_to_quat(quat_to_rot(q))
    np.testing.assert_allclose(quat_to_rot(back), quat_to_rot(q), atol=1e-12)


@given(unit_quats(), unit_quats())
def test_slerp_endpoints(a, b):
    np.testing.assert_allclose(quat_to_rot(quat_slerp(a, b, 0.0)), quat_to_rot(a), atol=1e-9)
    np.testing.assert_allclose(quat_to_rot(quat_slerp(a, b, 1.0)), quat_to_rot(b), atol=1e-9)


@given(unit_quats())
def test_slerp_of_equal_endpoints(a):
    np.testing.assert_allclose(quat_to_rot(quat_slerp(a, a, 0.5)), quat_to_rot(a), atol=1e-12)


def test_slerp_halfway_matches_matrix_log():
    b = Quat.from_axis_angle([0, 0, 1], math.pi / 2)
    mid = quat_to_rot(quat_slerp(Quat(), b, 0.5))
    oracle = expm(0.5 * np.real(logm(quat_to_rot(b))))
    np.testing.assert_allclose(mid, oracle, atol=1e-12)


def test_slerp_takes_shortest_arc():
    a = Quat()
    b = -Quat.from_axis_angle([1, 0, 0], 0.4)  # same rotation, opposite hemisphere
    mid = quat_slerp(a, b, 0.5)
    assert quat_angle(a, mid) == pytest.approx(0.2, abs=1e-12)


def test_rotvec_round_trip():
    v = np.array([0.3, -0.2, 0.9])
    np.testing.assert_allclose(quat_to_rotvec(Quat.from_rotvec(v)), v, atol=1e-12)


def test_non_unit_quaternion_rejected():
    with pytest.raises(NonUnitQuaternion):
        Quat(0.5, 0, 0, 0)
    Quat(1.0 + 5e-4, 0, 0, 0)  # within tolerance, renormalized


def test_nearly_unit_quaternion_is_renormalized():
    q = Quat(1.0 + 5e-7, 0, 0, 0)
    assert abs(np.linalg.norm(q.as_array()) - 1) < 1e-12


def test_principal_point_maps_to_origin(cam):
    np.testing.assert_allclose(pixel_to_normalized(cam, [cam.cx, cam.cy]), [0, 0], atol=0)
    np.testing.assert_allclose(pixel_to_normalized(cam, [cam.cx + cam.fx, cam.cy]), [1, 0], atol=1e-15)


def test_coordinate_round_trip(cam, rng):
    diag = math.hypot(cam.width, cam.height)
    p = rng.uniform(-10 * diag, 10 * diag, size=(1000, 2))
    np.testing.assert_allclose(normalized_to_pixel(cam, pixel_to_normalized(cam, p)), p, atol=1e-12, rtol=0)


def test_homography_equals_ray_rotation(cam, rng):
    """K R K^-1 agrees with back-projecting, rotating and re-projecting each pixel."""
    R = Rotation.from_rotvec([0.05, -0.08, 0.12]).as_matrix()
    px = rng.uniform(0, 240, size=(200, 2))
    h = np.column_stack([px, np.ones(200)]) @ cam.homography(R).T
    via_h = h[:, :2] / h[:, 2:]
    rays = np.column_stack([(px[:, 0] - cam.cx) / cam.fx, (px[:, 1] - cam.cy) / cam.fy, np.ones(200)])
    r = rays @ R.T
    oracle = np.column_stack([cam.fx * r[:, 0] / r[:, 2] + cam.cx, cam.fy * r[:, 1] / r[:, 2] + cam.cy])
    np.testing.assert_allclose(via_h, oracle, atol=1e-9)


def test_undistort_inverts_distort(distorted_cam, rng):
    x = rng.uniform(-0.5, 0.5, 500)
    y = rng.uniform(-0.4, 0.4, 500)
    xd, yd = distort_normalized(x, y, distorted_cam.distortion)
    xu, yu, ok = undistort_normalized(xd, yd, distorted_cam.distortion)
    assert ok.all()
    np.testing.assert_allclose(xu, x, atol=1e-9)
    np.testing.assert_allclose(yu, y, atol=1e-9)


@pytest.mark.parametrize("kw", [dict(fx=0.0), dict(fy=-1.0), dict(cx=240.0), dict(cy=-0.5)])
def test_invalid_camera(kw):
    base = dict(fx=199.0, fy=199.0, cx=120.0, cy=90.0, width=240, height=180)
    base.update(kw)
    with pytest.raises(InvalidCalibration):
        CameraModel(**base)


def test_make_events_fields():
    ev = make_events([0.1, 0.2], [1, 2], [3, 4], [1, -1])
    assert ev["t"].tolist() == [0.1, 0.2]
    assert ev["p"].tolist() == [1, -1]


def test_expm_oracle_consistency():
    w = np.array([0.1, 0.2, -0.3])
    W = np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]])
    np.testing.assert_allclose(quat_to_rot(Quat.from_rotvec(w)), expm(W), atol=1e-12)
