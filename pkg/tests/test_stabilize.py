import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from evstab.attitude import attitude_at_array, from_poses
from evstab.core import CameraModel, Event, Quat, distort_normalized, make_events, quat_mul, rot_to_quat
from evstab.errors import DivergentUndistortion
from evstab.ingest import ImageGrid
from evstab.sim import SimConfig, build_scene, build_trajectory, generate_events, synthesize_poses
from evstab.stabilize import (
    StabilizerState,
    build_undistort_lut,
    maybe_saccade,
    principal_point_displacement,
    rotate_pixels,
    stabilization_homography,
    stabilize_event,
    stabilize_events,
    stabilize_frame,
    warp_frame,
)


def axis_quat(axis, angle):
    axis = np.asarray(axis, float) / np.linalg.norm(axis)
    return Quat(math.cos(angle / 2), *(math.sin(angle / 2) * axis))


def matrix_oracle(x, y, R, c):
    """Reference K R K^-1 applied point by point with a 3x3 matrix product."""
    K = np.array([[c.fx, 0, c.cx], [0, c.fy, c.cy], [0, 0, 1.0]])
    H = K @ R @ np.linalg.inv(K)
    out = np.array([H @ np.array([a, b, 1.0]) for a, b in zip(x, y)])
    return out[:, 0] / out[:, 2], out[:, 1] / out[:, 2]


class TestUndistortLut:
    def test_identity_without_distortion(self, cam):
        lut = build_undistort_lut(cam)
        v, u = np.mgrid[0 : cam.height, 0 : cam.width]
        assert np.abs(lut.map_x - u).max() < 1e-9
        assert np.abs(lut.map_y - v).max() < 1e-9

    def test_barrel_corners_move_outward_and_redistort(self):
        # f=300 keeps every sensor radius inside the invertible range of k1=-0.4
        c = CameraModel(300.0, 300.0, 119.5, 89.5, 240, 180, k1=-0.4)
        lut = build_undistort_lut(c)
        for (py, px) in [(0, 0), (0, 239), (179, 0), (179, 239)]:
            r_raw = math.hypot(px - c.cx, py - c.cy)
            r_und = math.hypot(lut.map_x[py, px] - c.cx, lut.map_y[py, px] - c.cy)
            assert r_und > r_raw
        xn = (lut.map_x - c.cx) / c.fx
        yn = (lut.map_y - c.cy) / c.fy
        xd, yd = distort_normalized(xn, yn, c.distortion)
        v, u = np.mgrid[0 : c.height, 0 : c.width]
        assert np.abs(xd * c.fx + c.cx - u).max() < 1e-6
        assert np.abs(yd * c.fy + c.cy - v).max() < 1e-6

    @pytest.mark.parametrize("f, k1", [(199.0, 10.0), (300.0, 10.0), (199.0, -0.4)])
    def test_divergent_model_raises(self, f, k1):
        # k1=-0.4 at f=199 folds over before the sensor corner: not invertible
        c = CameraModel(f, f, 119.5, 89.5, 240, 180, k1=k1)
        with pytest.raises(DivergentUndistortion):
            build_undistort_lut(c)

    def test_lookup_exact_at_integer_pixels(self, distorted_cam):
        lut = build_undistort_lut(distorted_cam)
        x = np.array([0, 17, 239, 100])
        y = np.array([0, 33, 179, 90])
        lx, ly = lut.lookup(x, y)
        assert np.array_equal(lx, lut.map_x[y, x])
        assert np.array_equal(ly, lut.map_y[y, x])


class TestEventStabilization:
    def test_identity_rotation_is_identity(self, cam, rng):
        lut = build_undistort_lut(cam)
        ev = make_events(np.sort(rng.uniform(0, 1, 200)), rng.integers(0, 240, 200), rng.integers(0, 180, 200),
                         rng.integers(0, 2, 200))
        q = np.tile(Quat().as_array(), (200, 1))
        out, ok = stabilize_events(ev, q, Quat(), cam, lut)
        assert np.abs(out["x"] - ev["x"]).max() < 1e-9
        assert np.abs(out["y"] - ev["y"]).max() < 1e-9
        assert ok.all()
        assert np.array_equal(out["t"], ev["t"]) and np.array_equal(out["p"], ev["p"])

    def test_roll_about_optical_axis_fixes_principal_point(self, cam):
        lut = build_undistort_lut(cam)
        state = StabilizerState.for_camera(cam)
        e = Event(0.1, cam.cx, cam.cy, 1)
        out = stabilize_event(e, axis_quat([0, 0, 1], 0.7), state, cam, lut)
        assert abs(out.x - cam.cx) < 1e-9 and abs(out.y - cam.cy) < 1e-9

    def test_matches_matrix_oracle(self, cam, rng):
        lut = build_undistort_lut(cam)
        n = 1000
        ev = make_events(np.sort(rng.uniform(0, 1, n)), rng.integers(0, 240, n), rng.integers(0, 180, n),
                         rng.integers(0, 2, n))
        q_ref = axis_quat([0.3, -1.0, 0.2], 0.05)
        q_c = axis_quat([1.0, 0.4, -0.3], 0.08)
        out, _ = stabilize_events(ev, np.tile(q_c.as_array(), (n, 1)), q_ref, cam, lut)
        R = rot_to_matrix(quat_mul(q_ref.conj(), q_c))
        ox, oy = matrix_oracle(ev["x"], ev["y"], R, cam)
        assert np.abs(out["x"] - ox).max() < 1e-9
        assert np.abs(out["y"] - oy).max() < 1e-9

    def test_homography_matches_rotate_pixels(self, cam):
        q_ref, q_c = axis_quat([0, 1, 0], 0.02), axis_quat([1, 1, 0], 0.1)
        H = stabilization_homography(q_ref, q_c, cam)
        x, y = np.array([3.0, 120.0, 200.0]), np.array([5.0, 90.0, 170.0])
        p = np.stack([x, y, np.ones(3)])
        p = H @ p
        rx, ry = rotate_pixels(x, y, rot_to_matrix(quat_mul(q_ref.conj(), q_c)), cam)
        assert np.allclose(p[0] / p[2], rx, atol=1e-9) and np.allclose(p[1] / p[2], ry, atol=1e-9)

    @given(st.floats(-0.3, 0.3), st.floats(-0.3, 0.3), st.floats(-0.3, 0.3),
           st.floats(0, 239), st.floats(0, 179))
    def test_composition_with_inverse_returns_original(self, a, b, g, x, y):
        c = CameraModel(199.0, 199.0, 119.5, 89.5, 240, 180)
        dq = quat_mul(quat_mul(axis_quat([1, 0, 0], a), axis_quat([0, 1, 0], b)), axis_quat([0, 0, 1], g))
        R = rot_to_matrix(dq)
        x1, y1 = rotate_pixels(np.array([x]), np.array([y]), R, c)
        x2, y2 = rotate_pixels(x1, y1, R.T, c)
        assert abs(x2[0] - x) < 1e-6 and abs(y2[0] - y) < 1e-6

    def test_points_behind_camera_are_nan(self, cam):
        x, y = rotate_pixels(np.array([cam.cx]), np.array([cam.cy]), rot_to_matrix(axis_quat([0, 1, 0], math.pi)),
                             cam)
        assert np.isnan(x[0]) and np.isnan(y[0])

    def test_pure_rotation_landmarks_stay_put(self):
        # Under a pure rotation every event, stabilized with pose-interpolated
        # attitude, must land where its world point projects at the reference time.
        cfg = SimConfig(preset="pure-rotation", duration=0.4)
        c = cfg.camera()
        scene, traj = build_scene(cfg), build_trajectory(cfg)
        ev = generate_events(scene, traj, c, cfg.threshold, 0.2, 0.24)
        assert ev.size > 1000
        track = from_poses(synthesize_poses(traj, cfg.pose_rate))
        q_c = attitude_at_array(track, ev["t"])
        q_ref = traj.quaternion(0.0)
        out, ok = stabilize_events(ev, q_c, q_ref, c, build_undistort_lut(c))
        # exact reference: ray at event time, rotated into the t=0 camera
        d = np.stack([(ev["x"] - c.cx) / c.fx, (ev["y"] - c.cy) / c.fy, np.ones(ev.size)], axis=1)
        world = np.einsum("nij,nj->ni", traj.rotation(ev["t"]), d)
        ref = world @ traj.rotation(0.0)
        ex = c.fx * ref[:, 0] / ref[:, 2] + c.cx
        ey = c.fy * ref[:, 1] / ref[:, 2] + c.cy
        err = np.hypot(out["x"] - ex, out["y"] - ey)
        assert err.max() < 0.5


def rot_to_matrix(q: Quat) -> np.ndarray:
    from evstab.core import quat_to_rot

    return quat_to_rot(q)


def bars(u, v, c, angle=0.0):
    """Smooth bar pattern defined on undistorted pixel coordinates."""
    xn, yn = (u - c.cx) / c.fx, (v - c.cy) / c.fy
    s = xn * math.cos(angle) + yn * math.sin(angle)
    return 0.5 + 0.4 * np.sin(2 * math.pi * s / 0.25)


class TestFrameStabilization:
    def test_identity_is_exact(self, cam, rng):
        img = ImageGrid(rng.uniform(0, 1, (cam.height, cam.width)), t=0.5)
        out = stabilize_frame(img, Quat(), StabilizerState.for_camera(cam), cam)
        assert np.array_equal(out.values, img.values)
        assert out.mask.all()

    def test_quarter_turn_rotates_bars(self):
        c = CameraModel(60.0, 60.0, 31.5, 31.5, 64, 64)
        v, u = np.mgrid[0:64, 0:64].astype(float)
        img = ImageGrid(bars(u, v, c), t=0.0)
        q = axis_quat([0, 0, 1], math.pi / 2)
        out = stabilize_frame(img, q, StabilizerState.for_camera(c), c)
        # output(x, y) samples the raw frame at Rz^T (x, y) = (y, -x): bars along x become bars along y
        expected = bars(u, v, c, angle=math.pi / 2)
        assert out.mask.mean() > 0.95
        assert np.abs(out.values - expected)[out.mask].mean() < 0.02

    def test_forward_then_inverse_warp(self, cam):
        v, u = np.mgrid[0 : cam.height, 0 : cam.width].astype(float)
        img = ImageGrid(bars(u, v, cam, 0.4), t=0.0)
        R = rot_to_matrix(axis_quat([0.2, 1.0, 0.5], 0.06))
        back = warp_frame(warp_frame(img, R, cam), R.T, cam)
        assert back.mask.mean() > 0.5
        assert np.abs(back.values - img.values)[back.mask].mean() < 0.03

    def test_size_mismatch_rejected(self, cam):
        img = ImageGrid(np.zeros((10, 10)), t=0.0)
        with pytest.raises(ValueError):
            stabilize_frame(img, Quat(), StabilizerState.for_camera(cam), cam)


class TestSaccade:
    @staticmethod
    def pitch_for(px, c):
        return math.atan(px / c.fx)

    def test_default_threshold_is_sixth_of_width(self, cam):
        assert StabilizerState.for_camera(cam).threshold_px == pytest.approx(40.0)

    def test_boundary_is_kept(self, cam):
        state = StabilizerState.for_camera(cam)
        q = axis_quat([0, 1, 0], self.pitch_for(40.0, cam))
        assert principal_point_displacement(state.q_ref, q, cam) == pytest.approx(40.0, abs=1e-9)
        assert maybe_saccade(state, q, cam) == "kept"
        assert state.q_ref == Quat()

    def test_just_over_resets(self, cam):
        state = StabilizerState.for_camera(cam)
        q = axis_quat([0, 1, 0], self.pitch_for(40.0 + 1e-6, cam))
        assert maybe_saccade(state, q, cam) == "reset"
        assert state.q_ref == q and state.saccade_count == 1

    def test_slow_drift_resets_once(self, cam):
        state = StabilizerState.for_camera(cam)
        target = self.pitch_for(60.0, cam)
        results = [maybe_saccade(state, axis_quat([0, 1, 0], a), cam) for a in np.linspace(0, target, 400)]
        assert results.count("reset") == 1
        assert state.saccade_count == 1

    def test_nonpositive_threshold_rejected(self):
        with pytest.raises(ValueError):
            StabilizerState(Quat(), 0.0)
