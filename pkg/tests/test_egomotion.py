import math
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evstab.core import CameraModel, pixel_to_normalized
from evstab.egomotion import (
    SolverOptions,
    angle_deg,
    cauchy_weights,
    erl_full_solve,
    erlv_residuals,
    erlv_solve,
    icosphere,
    mae_angle,
    motion_field,
    sensitivity_A,
    sensitivity_B,
)
from evstab.errors import DegenerateGeometry, InsufficientFlow, LengthMismatch
from evstab.flow import FlowSet

CAM = CameraModel(199.0, 199.0, 119.5, 89.5, 240, 180)


def projected_flow(xn, depth, V, omega):
    """Independent oracle: differentiate the projection of a 3D point seen by a moving camera."""
    X = np.column_stack([xn * depth[:, None], depth])
    Xdot = -np.cross(np.broadcast_to(omega, X.shape), X) - V
    u = (Xdot[:, 0] - xn[:, 0] * Xdot[:, 2]) / depth
    v = (Xdot[:, 1] - xn[:, 1] * Xdot[:, 2]) / depth
    return np.column_stack([u, v])


def scene(seed, n, V, omega=(0.0, 0.0, 0.0), depth=(1.0, 5.0)):
    """(pixel points, normalized points, normalized flows, depths) with exact flow."""
    rng = np.random.default_rng(seed)
    px = np.column_stack([rng.uniform(5, CAM.width - 6, n), rng.uniform(5, CAM.height - 6, n)])
    xn = pixel_to_normalized(CAM, px)
    Z = rng.uniform(*depth, n)
    return px, xn, projected_flow(xn, Z, np.asarray(V, float), np.asarray(omega, float)), Z


def flowset(px, fn, dt=0.01):
    """Pack normalized flows as a pixel-space FlowSet in px/s."""
    return FlowSet(px, fn * [CAM.fx, CAM.fy], np.ones(len(px)), dt)


def unit(v):
    v = np.asarray(v, float)
    return v / np.linalg.norm(v)


class TestInteractionMatrix:
    def test_translation_examples(self):
        assert np.allclose(sensitivity_A((0, 0)) @ [0, 0, 1], [0, 0])
        assert np.allclose(sensitivity_A((0.1, 0.2)) @ [0, 0, 1], [0.1, 0.2])
        assert np.allclose(2.0 * sensitivity_A((0.3, -0.1)) @ [1, 0, 0], [-2, 0])

    @given(
        st.floats(-0.6, 0.6), st.floats(-0.45, 0.45), st.floats(0.5, 20),
        st.lists(st.floats(-2, 2), min_size=6, max_size=6),
    )
    def test_motion_field_matches_projection(self, x, y, Z, vw):
        V, om = np.array(vw[:3]), np.array(vw[3:])
        xn = np.array([[x, y]])
        want = projected_flow(xn, np.array([Z]), V, om)
        assert np.allclose(motion_field(xn, V, np.array([1 / Z]), om), want, atol=1e-12)
        blocks = sensitivity_A((x, y)) @ V / Z + sensitivity_B((x, y)) @ om
        assert np.allclose(blocks, want[0], atol=1e-12)

    def test_icosphere_size(self):
        v = icosphere(3)
        assert v.shape == (642, 3)
        assert np.allclose(np.linalg.norm(v, axis=1), 1.0)


class TestErlV:
    def test_exact_forward_motion(self):
        px, _, fn, _ = scene(0, 100, (0, 0, 1))
        est = erlv_solve(flowset(px, fn), CAM)
        assert angle_deg(est.V, [0, 0, 1]) < 0.01

    @settings(max_examples=30)
    @given(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1), st.integers(0, 1000))
    def test_exact_flow_any_direction(self, a, b, c, seed):
        v = np.array([a, b, c])
        if np.linalg.norm(v) < 0.1:
            return
        V = unit(v)
        px, _, fn, _ = scene(seed, 80, V)
        est = erlv_solve(flowset(px, fn), CAM)
        assert angle_deg(est.V, V) < 0.01

    def test_residual_vanishes_at_truth(self):
        V = unit([0.3, -0.2, 1.0])
        _, xn, fn, _ = scene(1, 200, V)
        assert np.abs(erlv_residuals(xn, fn, V)).max() < 1e-10

    def contaminated(self, seed):
        V = unit([0.4, 0.1, 1.0])
        px, _, fn, _ = scene(seed, 200, V)
        rng = np.random.default_rng(seed + 100)
        bad = rng.choice(200, 40, replace=False)
        scale = np.abs(fn).max()
        fn = fn.copy()
        fn[bad] = rng.uniform(-3 * scale, 3 * scale, (40, 2))
        return V, flowset(px, fn), bad

    def test_outliers_are_rejected(self):
        V, fs, _ = self.contaminated(0)
        robust = erlv_solve(fs, CAM)
        plain = erlv_solve(fs, CAM, SolverOptions(irls_rounds=0))
        assert angle_deg(robust.V, V) <= 2.0
        assert angle_deg(plain.V, V) > 5.0

    def test_outlier_weights(self):
        _, fs, bad = self.contaminated(1)
        w = erlv_solve(fs, CAM).weights
        good = np.setdiff1d(np.arange(len(fs)), bad)
        assert np.mean(w[bad] < 0.2) >= 0.9
        assert np.mean(w[good] > 0.8) >= 0.9

    @given(st.floats(0.01, 100))
    def test_scale_invariance(self, k):
        px, _, fn, _ = scene(2, 120, unit([-0.5, 0.3, 0.8]))
        ref = erlv_solve(flowset(px, fn), CAM).V
        assert np.abs(erlv_solve(flowset(px, fn * k), CAM).V - ref).max() < 1e-9

    def test_negated_flow_gives_antipode(self):
        V = unit([0.2, 0.5, 1.0])
        px, _, fn, _ = scene(3, 150, V)
        a = erlv_solve(flowset(px, fn), CAM).V
        b = erlv_solve(flowset(px, -fn), CAM).V
        assert angle_deg(a, V) < 0.01
        assert angle_deg(b, -V) < 0.01

    def test_inverse_depths_recovered_up_to_scale(self):
        V = unit([0.0, 0.3, 1.0])
        px, _, fn, Z = scene(4, 100, V)
        rho = erlv_solve(flowset(px, fn), CAM).inverse_depths
        assert np.allclose(rho, 1.0 / Z, rtol=1e-6)

    def test_too_few_samples(self):
        px, _, fn, _ = scene(5, 1, (0, 0, 1))
        with pytest.raises(InsufficientFlow):
            erlv_solve(flowset(px, fn), CAM)

    def test_zero_flow_is_degenerate(self):
        px, _, fn, _ = scene(6, 50, (0, 0, 1))
        with pytest.raises(DegenerateGeometry):
            erlv_solve(flowset(px, 0 * fn), CAM)


class TestErlFull:
    def test_translation_and_rotation(self):
        V, om = np.array([1.0, 0, 0]), np.array([0, 0.2, 0])
        px, _, fn, _ = scene(7, 200, V, om)
        est = erl_full_solve(flowset(px, fn), CAM)
        assert angle_deg(est.V, V) < 0.1
        assert np.abs(est.omega - om).max() < 1e-3

    def test_pure_rotation_is_degenerate(self):
        px, _, fn, _ = scene(8, 200, (0, 0, 0), (0.1, -0.3, 0.05))
        with pytest.raises(DegenerateGeometry):
            erl_full_solve(flowset(px, fn), CAM)

    def test_empty_input(self):
        with pytest.raises(InsufficientFlow):
            erl_full_solve(FlowSet(np.empty((0, 2)), np.empty((0, 2)), np.empty(0), 0.01), CAM)

    def test_outliers_with_rotation(self):
        V, om = unit([0.3, -0.2, 1.0]), np.array([0.05, -0.1, 0.2])
        px, _, fn, _ = scene(9, 300, V, om)
        rng = np.random.default_rng(9)
        bad = rng.choice(300, 45, replace=False)
        fn = fn.copy()
        fn[bad] = rng.uniform(-1, 1, (45, 2)) * np.abs(fn).max()
        est = erl_full_solve(flowset(px, fn), CAM)
        assert angle_deg(est.V, V) < 2.0

    def test_erlv_is_faster(self):
        px, _, fn, _ = scene(10, 500, unit([0.2, 0.1, 1.0]), (0.02, 0.0, 0.01))
        fs = flowset(px, fn)
        erlv_solve(fs, CAM), erl_full_solve(fs, CAM)  # warm caches

        def best(fn_, k=3):
            out = []
            for _ in range(k):
                t0 = time.perf_counter()
                fn_(fs, CAM)
                out.append(time.perf_counter() - t0)
            return min(out)

        assert best(erlv_solve) < best(erl_full_solve)


class TestMetric:
    def test_examples(self):
        assert mae_angle([[0, 0, 1]], [[0, 0, 1]]) == pytest.approx(0.0, abs=1e-9)
        assert mae_angle([[1, 0, 0]], [[0, 0, 1]]) == pytest.approx(90.0)
        assert mae_angle([[1, 0, 1]], [[0, 0, 1]]) == pytest.approx(45.0)
        assert mae_angle([[0, 0, 1], [1, 0, 0]], [[0, 0, 2], [0, 0, 1]]) == pytest.approx(45.0)

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            mae_angle([[0, 0, 1]], [[0, 0, 1], [1, 0, 0]])
        with pytest.raises(LengthMismatch):
            mae_angle([[0, 0, 1]], [[0, 0, 1]], speeds=[1.0, 2.0])

    def test_speed_floor(self):
        est, gt = [[1, 0, 0], [0, 0, 1]], [[0, 0, 1], [0, 0, 1]]
        assert mae_angle(est, gt, speeds=[0.005, 1.0]) == pytest.approx(0.0, abs=1e-9)
        assert math.isnan(mae_angle(est, gt, speeds=[0.0, 0.001]))

    def test_angle_deg_antipodal(self):
        assert angle_deg([0, 0, 1], [0, 0, -1]) == pytest.approx(180.0)


def test_cauchy_weights():
    w = cauchy_weights(np.array([0.0, 2.3849, 1e6]), 1.0)
    assert np.allclose(w, [1.0, 0.5, 0.0], atol=1e-9)
