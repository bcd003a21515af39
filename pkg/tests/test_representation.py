import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from evstab.core import CameraModel, make_events
from evstab.errors import DegenerateWindow
from evstab.representation import (
    MIN_CMAX_EVENTS,
    TimeSurfaceState,
    WarpParams,
    iwe_variance,
    maximize_contrast,
    render_iwe,
    render_time_surface,
    search_kernel_table,
    splat_gaussians,
)
from evstab.stabilize import in_bounds
from evstab.window import EventWindow

CAM = CameraModel(199.0, 199.0, 119.5, 89.5, 240, 180)


def window(x, y, t, c=CAM):
    x, y, t = (np.asarray(a, float) for a in (x, y, t))
    ev = make_events(t, x, y, np.ones(t.size))
    return EventWindow(ev, in_bounds(c, x, y), float(t.min()), float(t.max()))


def dots_window(seed, vx, vy=0.0, per=30, spacing=12, duration=0.03):
    """Isolated dots on a jittered grid, each firing ``per`` events while moving at (vx, vy) px/s."""
    rng = np.random.default_rng(seed)
    gy, gx = np.mgrid[spacing / 2 : 180 : spacing, spacing / 2 : 240 - spacing : spacing]
    x0 = gx.ravel() + rng.uniform(-2, 2, gx.size)
    y0 = gy.ravel() + rng.uniform(-2, 2, gx.size)
    n = x0.size * per
    t = np.sort(rng.uniform(0, duration, n))
    j = rng.integers(0, x0.size, n)
    return window(x0[j] + vx * t, y0[j] + vy * t, t)


def brute_splat(xs, ys, shape, sigma):
    """Independent Gaussian splat: full-grid evaluation, 3-sigma disc, unit mass per point."""
    h, w = shape
    v, u = np.mgrid[0:h, 0:w].astype(float)
    out = np.zeros(shape)
    for x, y in zip(xs, ys):
        # normalize over the untruncated lattice disc, then clip to the image
        r = int(math.ceil(3 * sigma)) + 1
        k = np.arange(-r - 1, r + 2)
        kx, ky = np.meshgrid(np.floor(x) + k, np.floor(y) + k)
        d2 = (kx - x) ** 2 + (ky - y) ** 2
        total = np.exp(-d2 / (2 * sigma**2))[d2 <= (3 * sigma) ** 2].sum()
        d2i = (u - x) ** 2 + (v - y) ** 2
        out += np.where(d2i <= (3 * sigma) ** 2, np.exp(-d2i / (2 * sigma**2)), 0.0) / total
    return out


class TestIwe:
    def test_single_event_unit_mass_and_peak(self):
        img = render_iwe(window([120.0], [90.0], [0.0]), None, 1.0, CAM)
        assert img.values.sum() == pytest.approx(1.0, abs=1e-6)
        assert np.unravel_index(img.values.argmax(), img.values.shape) == (90, 120)

    @given(st.integers(1, 300), st.integers(0, 2**32 - 1), st.floats(0.5, 2.0))
    def test_mass_conservation(self, n, seed, sigma):
        rng = np.random.default_rng(seed)
        m = 3 * sigma + 1
        x = rng.uniform(m, CAM.width - 1 - m, n)
        y = rng.uniform(m, CAM.height - 1 - m, n)
        img = render_iwe(window(x, y, np.sort(rng.uniform(0, 0.01, n))), None, sigma, CAM)
        assert img.values.sum() == pytest.approx(n, abs=1e-6)

    def test_matches_brute_force_splat(self, rng):
        x = np.concatenate([rng.uniform(-2, 50, 40), [0.3, 49.6]])
        y = np.concatenate([rng.uniform(-2, 40, 40), [39.8, 0.1]])
        fast = splat_gaussians(x, y, (40, 50), 1.0)
        assert np.abs(fast - brute_splat(x, y, (40, 50), 1.0)).max() < 1e-12

    def test_boundary_events_lose_mass(self):
        img = render_iwe(window([0.0], [0.0], [0.0]), None, 1.0, CAM)
        assert 0.2 < img.values.sum() < 0.5

    def test_true_flow_sharpens(self):
        w = dots_window(0, 400.0, -150.0)
        true = WarpParams.uniform(CAM, (400.0, -150.0))
        assert iwe_variance(w, true, 1.0, CAM) > iwe_variance(w, None, 1.0, CAM)

    def test_out_of_fov_events_are_dropped(self):
        w = window([-10.0, 120.0], [5.0, 90.0], [0.0, 0.001])
        assert render_iwe(w, None, 1.0, CAM).values.sum() == pytest.approx(1.0, abs=1e-6)

    def test_sigma_must_be_positive(self):
        with pytest.raises(ValueError):
            render_iwe(window([1.0], [1.0], [0.0]), None, 0.0, CAM)


class TestWarpParams:
    def test_cap_and_shape_validation(self):
        with pytest.raises(ValueError):
            WarpParams.uniform(CAM, (6000.0, 0.0))
        with pytest.raises(ValueError):
            WarpParams(np.zeros((3, 4)), 240, 180)
        with pytest.raises(ValueError):
            WarpParams(np.full((3, 4, 2), np.nan), 240, 180)

    def test_bilinear_between_tile_centres(self):
        th = np.zeros((1, 2, 2))
        th[0, 1, 0] = 100.0
        p = WarpParams(th, 240, 180)
        vx, _ = p.flow_at(np.array([0.0, 60.0, 120.0, 180.0, 239.0]), np.full(5, 90.0))
        assert np.allclose(vx, [0.0, 0.0, 50.0, 100.0, 100.0])


class TestContrastMaximization:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_recovers_uniform_flow(self, seed):
        w = dots_window(seed, 30.0)
        theta = maximize_contrast(w, CAM)
        assert np.all(np.abs(theta.theta[..., 0] - 30.0) <= 3.0)
        assert np.all(np.abs(theta.theta[..., 1]) <= 3.0)

    def test_stationary_scene_gives_near_zero_flow(self):
        w = dots_window(4, 0.0)
        theta = maximize_contrast(w, CAM)
        assert np.median(np.linalg.norm(theta.theta, axis=2)) < 2.0

    def test_never_worse_than_zero_flow(self, rng):
        for seed in range(3):
            w = dots_window(seed, rng.uniform(-200, 200), rng.uniform(-200, 200), per=10)
            theta = maximize_contrast(w, CAM)
            assert iwe_variance(w, theta, 1.0, CAM) >= iwe_variance(w, None, 1.0, CAM)

    def test_too_few_events(self):
        w = window(np.arange(5) * 10.0 + 20, np.full(5, 50.0), np.arange(5) * 1e-3)
        with pytest.raises(DegenerateWindow):
            maximize_contrast(w, CAM)

    def test_threshold_is_ten_in_fov_events(self):
        n = MIN_CMAX_EVENTS
        x = np.concatenate([np.linspace(20, 200, n - 1), [-5.0]])
        w = window(x, np.full(n, 50.0), np.arange(n) * 1e-3)
        with pytest.raises(DegenerateWindow):
            maximize_contrast(w, CAM)
        w = window(np.linspace(20, 200, n), np.full(n, 50.0), np.arange(n) * 1e-3)
        assert maximize_contrast(w, CAM).theta.shape == (3, 4, 2)

    def test_search_kernel_is_phase_invariant(self):
        table, _ = search_kernel_table()
        assert np.allclose(table.sum(axis=1), 1.0)
        sq = (table**2).sum(axis=1)
        assert (sq.max() - sq.min()) / sq.mean() < 0.005


class TestTimeSurface:
    def test_last_event_pixel_is_one_and_decay(self):
        st_ = TimeSurfaceState.for_camera(CAM, tau0=0.02, alpha=0.0)
        w = window([10.0, 20.0], [10.0, 10.0], [0.0, 0.02])
        img = render_time_surface(w, st_)
        assert img.values[10, 20] == 1.0
        assert img.values[10, 10] == pytest.approx(math.exp(-1.0), abs=1e-9)
        assert img.values[50, 50] == 0.0

    def test_tau_recursion_closed_form(self):
        tau0, dt, alpha = 0.1, 0.01, 0.3
        st_ = TimeSurfaceState.for_camera(CAM, tau0=tau0, alpha=alpha)
        for k in range(1, 30):
            w = window([5.0, 6.0], [5.0, 5.0], [k * 0.1, k * 0.1 + dt])
            render_time_surface(w, st_)
            assert abs(st_.tau - dt) == pytest.approx(alpha**k * abs(tau0 - dt), abs=1e-12)

    def test_last_times_persist_across_windows(self):
        st_ = TimeSurfaceState.for_camera(CAM, tau0=0.05, alpha=0.3)
        render_time_surface(window([30.0, 31.0], [30.0, 30.0], [0.0, 0.01]), st_)
        img = render_time_surface(window([60.0, 61.0], [30.0, 30.0], [0.05, 0.06]), st_)
        assert img.values[30, 30] == pytest.approx(math.exp(-0.06 / st_.tau))

    def test_state_validation(self):
        with pytest.raises(ValueError):
            TimeSurfaceState(0.0)
        with pytest.raises(ValueError):
            TimeSurfaceState(0.1, alpha=1.0)
