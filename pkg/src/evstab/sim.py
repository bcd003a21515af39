"""Synthetic sequences: textured planes seen by a moving camera.

The camera orientation is ``R_wc(t) = R_base Rz(psi) Ry(theta) Rx(phi)``
(camera to world) with each Euler angle a sum of sines or smoothed triangle
waves, so angular velocity has a closed form. Position is a sum of sines plus
a constant drift. World z points up; the default base orientation has the
camera looking along world +x.

Events follow the ideal threshold-crossing model: every pixel's log intensity
is sampled at fixed micro-steps and an event is emitted whenever it moves a
whole contrast threshold away from the pixel's reference level, with the
timestamp interpolated linearly inside the step.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numba
import numpy as np
from scipy.ndimage import gaussian_filter

from .core import CameraModel, Quat, make_events, rot_to_quat, undistort_normalized
from .errors import DivergentUndistortion, IoError, PlaneBehindCamera, PointNotOnPlane
from .flow import FlowSet, SourceKind
from .ingest import (
    ImageGrid,
    ImuSample,
    PoseSample,
    ensure_dir,
    write_calib,
    write_events,
    write_imu,
    write_pgm,
    write_poses,
)

GRAVITY = 9.81
DEFAULT_STEP = 1e-4
LOG_EPS = 1e-3

# camera z -> world +x, camera x -> world -y, camera y -> world -z
LOOK_FORWARD = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


# --- scene ------------------------------------------------------------------


@dataclass(frozen=True)
class Plane:
    """A textured rectangle; ``texture`` holds log intensity, rows along ``e2``."""

    origin: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    half_extent: tuple[float, float]
    texture: np.ndarray

    def __post_init__(self):
        e1 = np.asarray(self.e1, dtype=float)
        e2 = np.asarray(self.e2, dtype=float)
        if abs(e1 @ e2) > 1e-9 or abs(np.linalg.norm(e1) - 1) > 1e-9 or abs(np.linalg.norm(e2) - 1) > 1e-9:
            raise ValueError("plane axes must be orthonormal")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float))
        object.__setattr__(self, "e1", e1)
        object.__setattr__(self, "e2", e2)
        object.__setattr__(self, "texture", np.ascontiguousarray(self.texture, dtype=np.float64))

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.e1, self.e2)

    @property
    def texel_density(self) -> tuple[float, float]:
        """Texels per metre along e1 and e2."""
        h, w = self.texture.shape
        return w / (2 * self.half_extent[0]), h / (2 * self.half_extent[1])


@dataclass(frozen=True)
class Scene:
    planes: tuple[Plane, ...]
    background: float = math.log(0.5)

    def packed(self):
        """Flat arrays for the rendering kernels."""
        static = np.empty((len(self.planes), 7))
        offs = 0
        for j, pl in enumerate(self.planes):
            h, w = pl.texture.shape
            dx, dy = pl.texel_density
            static[j] = (pl.half_extent[0], pl.half_extent[1], dx, dy, offs, w, h)
            offs += w * h
        tex = np.concatenate([pl.texture.ravel() for pl in self.planes])
        return static, tex


def checker_texture(half_extent, cell: float, density: float, contrast: float = 0.8, sharpness: float = 4.0):
    """Smooth checkerboard (log intensity) with square ``cell`` metres."""
    hw, hh = half_extent
    nx, ny = int(round(2 * hw * density)), int(round(2 * hh * density))
    u = -hw + (np.arange(nx) + 0.5) / density
    v = -hh + (np.arange(ny) + 0.5) / density
    su = np.tanh(sharpness * np.sin(math.pi * u / cell))
    sv = np.tanh(sharpness * np.sin(math.pi * v / cell))
    inten = 0.5 * (1.0 + contrast * np.outer(sv, su) / math.tanh(sharpness) ** 2)
    return np.log(np.clip(inten, LOG_EPS, None))


def mondrian_texture(rng: np.random.Generator, half_extent, density: float, n_rects: int = 400,
                     size_range=(0.08, 0.6), blur_m: float = 0.012, lo: float = 0.15, hi: float = 0.95):
    """Overlapping axis-aligned rectangles of random gray, lightly blurred; rich in corners."""
    hw, hh = half_extent
    nx, ny = int(round(2 * hw * density)), int(round(2 * hh * density))
    img = np.full((ny, nx), rng.uniform(lo, hi))
    for _ in range(n_rects):
        w = rng.uniform(*size_range) * density
        h = rng.uniform(*size_range) * density
        x0 = rng.uniform(-w, nx)
        y0 = rng.uniform(-h, ny)
        xs = slice(max(int(x0), 0), min(int(x0 + w), nx))
        ys = slice(max(int(y0), 0), min(int(y0 + h), ny))
        img[ys, xs] = rng.uniform(lo, hi)
    img = gaussian_filter(img, blur_m * density, mode="nearest")
    return np.log(np.clip(img, LOG_EPS, None))


def frontal_plane(distance: float, half_extent, texture, R_wc: np.ndarray = LOOK_FORWARD, center_offset=(0.0, 0.0)):
    """Plane facing a camera with orientation ``R_wc`` at the origin, ``distance`` metres ahead."""
    ex, ey, ez = R_wc[:, 0], R_wc[:, 1], R_wc[:, 2]
    origin = ez * distance + ex * center_offset[0] + ey * center_offset[1]
    return Plane(origin, ex, ey, tuple(half_extent), texture)


# --- trajectory -------------------------------------------------------------


@dataclass(frozen=True)
class Wave:
    """``amp * s(2 pi f t + phase)`` with s a sine or, when ``tri_eps > 0``, a smoothed triangle."""

    amp: float
    freq: float
    phase: float = 0.0
    tri_eps: float = 0.0

    def value(self, t):
        a = 2 * math.pi * self.freq * t + self.phase
        if self.tri_eps > 0:
            k = 1.0 - self.tri_eps
            return self.amp * (2 / math.pi) * np.arcsin(k * np.sin(a))
        return self.amp * np.sin(a)

    def rate(self, t):
        w = 2 * math.pi * self.freq
        a = w * t + self.phase
        if self.tri_eps > 0:
            k = 1.0 - self.tri_eps
            s = k * np.sin(a)
            return self.amp * (2 / math.pi) * k * w * np.cos(a) / np.sqrt(1.0 - s * s)
        return self.amp * w * np.cos(a)

    def accel(self, t):
        if self.tri_eps > 0:
            raise NotImplementedError("triangle waves are only used for angles")
        w = 2 * math.pi * self.freq
        return -self.amp * w * w * np.sin(w * t + self.phase)


def _sum(waves, fn, t):
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    for wv in waves:
        out = out + getattr(wv, fn)(t)
    return out


@dataclass(frozen=True)
class Trajectory:
    duration: float
    R_base: np.ndarray = field(default_factory=lambda: np.eye(3))
    p0: np.ndarray = field(default_factory=lambda: np.zeros(3))
    drift: np.ndarray = field(default_factory=lambda: np.zeros(3))
    # (roll about camera x, pitch about y, yaw about the optical axis z)
    angle_waves: tuple = ((), (), ())
    pos_waves: tuple = ((), (), ())

    def angles(self, t):
        return np.stack([_sum(w, "value", t) for w in self.angle_waves], axis=-1)

    def angle_rates(self, t):
        return np.stack([_sum(w, "rate", t) for w in self.angle_waves], axis=-1)

    def rotation(self, t) -> np.ndarray:
        """Camera-to-world rotation; (3, 3) for scalar t, (N, 3, 3) for arrays."""
        ang = self.angles(t)
        phi, th, psi = ang[..., 0], ang[..., 1], ang[..., 2]
        cf, sf = np.cos(phi), np.sin(phi)
        ct, st = np.cos(th), np.sin(th)
        cp, sp = np.cos(psi), np.sin(psi)
        # Rz(psi) Ry(theta) Rx(phi)
        E = np.stack([
            np.stack([cp * ct, cp * st * sf - sp * cf, cp * st * cf + sp * sf], axis=-1),
            np.stack([sp * ct, sp * st * sf + cp * cf, sp * st * cf - cp * sf], axis=-1),
            np.stack([-st, ct * sf, ct * cf], axis=-1),
        ], axis=-2)
        return np.asarray(self.R_base) @ E

    def omega(self, t) -> np.ndarray:
        """Angular velocity in the camera frame (rad/s)."""
        ang = self.angles(t)
        rate = self.angle_rates(t)
        phi, th = ang[..., 0], ang[..., 1]
        dphi, dth, dpsi = rate[..., 0], rate[..., 1], rate[..., 2]
        return np.stack([
            dphi - dpsi * np.sin(th),
            dth * np.cos(phi) + dpsi * np.cos(th) * np.sin(phi),
            -dth * np.sin(phi) + dpsi * np.cos(th) * np.cos(phi),
        ], axis=-1)

    def position(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        osc = np.stack([_sum(w, "value", t) for w in self.pos_waves], axis=-1)
        return np.asarray(self.p0) + np.multiply.outer(t, np.asarray(self.drift)) + osc

    def velocity_world(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        osc = np.stack([_sum(w, "rate", t) for w in self.pos_waves], axis=-1)
        return np.asarray(self.drift) + osc

    def accel_world(self, t) -> np.ndarray:
        return np.stack([_sum(w, "accel", t) for w in self.pos_waves], axis=-1)

    def velocity_camera(self, t) -> np.ndarray:
        R = self.rotation(t)
        v = self.velocity_world(t)
        return np.einsum("...ji,...j->...i", R, v)

    def quaternion(self, t: float) -> Quat:
        return rot_to_quat(self.rotation(float(t)))


# --- rendering kernels ------------------------------------------------------


def _plane_params(scene: Scene, R: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Per-step camera-frame plane parameters, shape (T, K, 12).

    Along a camera ray ``d = (x, y, 1)`` the plane is hit at depth
    ``h / (m . d)`` with texture coordinates ``b + depth * (a . d)``.
    """
    R = R.reshape(-1, 3, 3)
    p = p.reshape(-1, 3)
    out = np.empty((R.shape[0], len(scene.planes), 12))
    for j, pl in enumerate(scene.planes):
        n = pl.normal
        out[:, j, 0:3] = np.einsum("tji,j->ti", R, pl.e1)
        out[:, j, 3:6] = np.einsum("tji,j->ti", R, pl.e2)
        out[:, j, 6:9] = np.einsum("tji,j->ti", R, n)
        rel = p - pl.origin
        out[:, j, 9] = rel @ pl.e1
        out[:, j, 10] = rel @ pl.e2
        out[:, j, 11] = -(rel @ n)
    return out


@numba.njit(cache=True, fastmath=True, inline="always")
def _shade(rx, ry, dyn, static, tex, bg):
    """Log intensity and depth of the nearest plane hit along ray (rx, ry, 1)."""
    best = np.inf
    val = bg
    for j in range(dyn.shape[0]):
        den = dyn[j, 6] * rx + dyn[j, 7] * ry + dyn[j, 8]
        if den == 0.0:
            continue
        lam = dyn[j, 11] / den
        if lam <= 0.0 or lam >= best:
            continue
        s1 = dyn[j, 9] + lam * (dyn[j, 0] * rx + dyn[j, 1] * ry + dyn[j, 2])
        s2 = dyn[j, 10] + lam * (dyn[j, 3] * rx + dyn[j, 4] * ry + dyn[j, 5])
        hw = static[j, 0]
        hh = static[j, 1]
        if s1 < -hw or s1 > hw or s2 < -hh or s2 > hh:
            continue
        w = int(static[j, 5])
        h = int(static[j, 6])
        off = int(static[j, 4])
        u = (s1 + hw) * static[j, 2] - 0.5
        v = (s2 + hh) * static[j, 3] - 0.5
        u = min(max(u, 0.0), w - 1.0)
        v = min(max(v, 0.0), h - 1.0)
        u0 = min(int(u), w - 2)
        v0 = min(int(v), h - 2)
        fu = u - u0
        fv = v - v0
        i00 = off + v0 * w + u0
        top = tex[i00] * (1.0 - fu) + tex[i00 + 1] * fu
        bot = tex[i00 + w] * (1.0 - fu) + tex[i00 + w + 1] * fu
        val = top * (1.0 - fv) + bot * fv
        best = lam
    return val, best


@numba.njit(cache=True)
def _render_rays(rays_x, rays_y, dyn, static, tex, bg, out_L, out_depth):
    for i in range(rays_x.shape[0]):
        out_L[i], out_depth[i] = _shade(rays_x[i], rays_y[i], dyn, static, tex, bg)


@numba.njit(cache=True, fastmath=True)
def _emit_events(rays_x, rays_y, pix_x, pix_y, times, dyn, static, tex, bg, C,
                 L_ref, L_prev, out_t, out_x, out_y, out_p):
    """Threshold crossings for steps ``times[1:]``; ``L_prev`` holds values at ``times[0]``.

    Returns the number of events, or -1 if the output buffers were too small
    (state arrays are then partially updated and must be restored by the caller).
    """
    n = 0
    cap = out_t.shape[0]
    for i in range(rays_x.shape[0]):
        ref = L_ref[i]
        prev = L_prev[i]
        for k in range(1, times.shape[0]):
            cur, _ = _shade(rays_x[i], rays_y[i], dyn[k - 1], static, tex, bg)
            d = cur - prev
            if d != 0.0:
                while True:
                    if cur >= ref + C:
                        level = ref + C
                        pol = 1
                    elif cur <= ref - C:
                        level = ref - C
                        pol = -1
                    else:
                        break
                    if n >= cap:
                        return -1
                    frac = (level - prev) / d
                    out_t[n] = times[k - 1] + frac * (times[k] - times[k - 1])
                    out_x[n] = pix_x[i]
                    out_y[n] = pix_y[i]
                    out_p[n] = pol
                    n += 1
                    ref = level
            prev = cur
        L_ref[i] = ref
        L_prev[i] = prev
    return n


# --- camera rays ------------------------------------------------------------


def pixel_rays(c: CameraModel, u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Undistorted normalized rays through (distorted) pixel positions."""
    xd = (np.asarray(u, dtype=float) - c.cx) / c.fx
    yd = (np.asarray(v, dtype=float) - c.cy) / c.fy
    if not c.has_distortion:
        return xd, yd
    x, y, ok = undistort_normalized(xd, yd, c.distortion, iterations=50)
    if not np.all(ok):
        raise DivergentUndistortion("lens model cannot be inverted over the sensor")
    return x, y


def _check_planes_visible(scene: Scene, R: np.ndarray, p: np.ndarray) -> None:
    for j, pl in enumerate(scene.planes):
        z = (pl.origin - p) @ R[:, 2]
        if z <= 0:
            raise PlaneBehindCamera(f"plane {j} is behind the camera (depth {z:.3f} m)")


def render_frame(scene: Scene, traj: Trajectory, c: CameraModel, t: float, supersample: int = 2) -> ImageGrid:
    """Intensity image in [0, 1] at time ``t``, box-filtered over ``supersample``^2 samples per pixel."""
    if not 0.0 <= t <= traj.duration + 1e-12:
        raise ValueError(f"t={t} outside the trajectory [0, {traj.duration}]")
    R = traj.rotation(float(t))
    p = traj.position(float(t))
    _check_planes_visible(scene, R, p)
    s = int(supersample)
    off = (np.arange(s) + 0.5) / s - 0.5
    v, u = np.mgrid[0 : c.height, 0 : c.width].astype(float)
    shape = (c.height, c.width, s, s)
    uu = np.broadcast_to(u[:, :, None, None] + off[None, None, None, :], shape).ravel()
    vv = np.broadcast_to(v[:, :, None, None] + off[None, None, :, None], shape).ravel()
    rx, ry = pixel_rays(c, uu, vv)
    static, tex = scene.packed()
    L = np.empty(rx.shape[0])
    depth = np.empty(rx.shape[0])
    _render_rays(rx, ry, _plane_params(scene, R, p)[0], static, tex, scene.background, L, depth)
    inten = np.exp(L).reshape(c.height, c.width, s * s).mean(axis=2)
    return ImageGrid(np.clip(inten, 0.0, 1.0), t=float(t))


def generate_events(
    scene: Scene,
    traj: Trajectory,
    c: CameraModel,
    contrast_threshold: float,
    t0: float,
    t1: float,
    step: float = DEFAULT_STEP,
    chunk_steps: int = 200,
    rng: np.random.Generator | None = None,
    jitter: float = 0.0,
    noise_rate: float = 0.0,
) -> np.ndarray:
    """Ideal event stream between ``t0`` and ``t1`` as a time-sorted structured array.

    Optional corruption: Gaussian timestamp ``jitter`` (s) and uniformly
    scattered noise events at ``noise_rate`` events per pixel per second.
    """
    if not t1 > t0:
        raise ValueError("t1 must be after t0")
    if not contrast_threshold > 0:
        raise ValueError("contrast threshold must be positive")
    v, u = np.mgrid[0 : c.height, 0 : c.width]
    pix_x = u.ravel().astype(np.int32)
    pix_y = v.ravel().astype(np.int32)
    rx, ry = pixel_rays(c, pix_x, pix_y)
    static, tex = scene.packed()
    n_steps = max(1, int(math.ceil((t1 - t0) / step - 1e-9)))
    times = np.minimum(t0 + step * np.arange(n_steps + 1), t1)
    times[-1] = t1

    R0 = traj.rotation(float(t0))
    p0 = traj.position(float(t0))
    _check_planes_visible(scene, R0, p0)
    L_prev = np.empty(rx.shape[0])
    depth = np.empty(rx.shape[0])
    _render_rays(rx, ry, _plane_params(scene, R0, p0)[0], static, tex, scene.background, L_prev, depth)
    L_ref = L_prev.copy()

    chunks = []
    cap = 4 * rx.shape[0]
    for s in range(0, n_steps, chunk_steps):
        ts = times[s : min(s + chunk_steps, n_steps) + 1]
        dyn = _plane_params(scene, traj.rotation(ts[1:]), traj.position(ts[1:]))
        while True:
            ref_bak, prev_bak = L_ref.copy(), L_prev.copy()
            bt = np.empty(cap)
            bx = np.empty(cap, np.int32)
            by = np.empty(cap, np.int32)
            bp = np.empty(cap, np.int8)
            n = _emit_events(rx, ry, pix_x, pix_y, ts, dyn, static, tex, scene.background,
                             contrast_threshold, L_ref, L_prev, bt, bx, by, bp)
            if n >= 0:
                break
            L_ref, L_prev = ref_bak, prev_bak
            cap *= 2
        order = np.argsort(bt[:n], kind="stable")
        chunks.append(make_events(bt[:n][order], bx[:n][order], by[:n][order], bp[:n][order]))
    ev = np.concatenate(chunks) if chunks else make_events([], [], [], [])
    if rng is not None and (jitter > 0 or noise_rate > 0):
        ev = _corrupt(ev, c, t0, t1, rng, jitter, noise_rate)
    return ev


def _corrupt(ev, c, t0, t1, rng, jitter, noise_rate):
    ev = ev.copy()
    if jitter > 0:
        ev["t"] = np.clip(ev["t"] + rng.normal(0.0, jitter, ev.shape[0]), t0, t1)
    if noise_rate > 0:
        k = rng.poisson(noise_rate * c.width * c.height * (t1 - t0))
        noise = make_events(rng.uniform(t0, t1, k), rng.integers(0, c.width, k), rng.integers(0, c.height, k),
                            rng.choice(np.array([-1, 1]), k))
        ev = np.concatenate([ev, noise])
    return ev[np.argsort(ev["t"], kind="stable")]


# --- ground truth -----------------------------------------------------------


def depth_at(scene: Scene, traj: Trajectory, c: CameraModel, t: float, points) -> np.ndarray:
    """Depth (m along the optical axis) at undistorted pixel positions; inf where no plane is hit."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    rx = (pts[:, 0] - c.cx) / c.fx
    ry = (pts[:, 1] - c.cy) / c.fy
    static, tex = scene.packed()
    L = np.empty(pts.shape[0])
    depth = np.empty(pts.shape[0])
    dyn = _plane_params(scene, traj.rotation(float(t)), traj.position(float(t)))[0]
    _render_rays(rx, ry, dyn, static, tex, scene.background, L, depth)
    return depth


def gt_velocity(traj: Trajectory, t: float) -> tuple[np.ndarray, np.ndarray, float]:
    """(unit translation direction, angular velocity, speed) in the camera frame."""
    V = traj.velocity_camera(float(t))
    speed = float(np.linalg.norm(V))
    direction = V / speed if speed > 0 else np.zeros(3)
    return direction, traj.omega(float(t)), speed


def gt_flow(scene: Scene, traj: Trajectory, c: CameraModel, t: float, points) -> FlowSet:
    """Exact motion field (px/s) at undistorted pixel positions."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    z = depth_at(scene, traj, c, t, pts)
    if not np.all(np.isfinite(z)):
        bad = int(np.flatnonzero(~np.isfinite(z))[0])
        raise PointNotOnPlane(f"point {pts[bad].tolist()} does not see any plane at t={t}")
    x = (pts[:, 0] - c.cx) / c.fx
    y = (pts[:, 1] - c.cy) / c.fy
    V = traj.velocity_camera(float(t))
    wx, wy, wz = traj.omega(float(t))
    rho = 1.0 / z
    u = (-V[0] + x * V[2]) * rho + x * y * wx - (1 + x * x) * wy + y * wz
    v = (-V[1] + y * V[2]) * rho + (1 + y * y) * wx - x * y * wy - x * wz
    return FlowSet(pts, np.stack([u * c.fx, v * c.fy], axis=1), np.ones(pts.shape[0]), 1.0,
                   SourceKind.SYNTHETIC, float(t))


def project_points(traj: Trajectory, c: CameraModel, t: float, X) -> np.ndarray:
    """Pinhole projection (undistorted pixels) of world points at time ``t``."""
    X = np.asarray(X, dtype=float).reshape(-1, 3)
    Xc = (X - traj.position(float(t))) @ traj.rotation(float(t))
    return np.stack([c.fx * Xc[:, 0] / Xc[:, 2] + c.cx, c.fy * Xc[:, 1] / Xc[:, 2] + c.cy], axis=1)


def plane_homography(plane: Plane, traj: Trajectory, c: CameraModel, t_a: float, t_b: float) -> np.ndarray:
    """Maps undistorted pixels of a plane point at ``t_a`` to its pixels at ``t_b``."""
    Ra, Rb = traj.rotation(float(t_a)), traj.rotation(float(t_b))
    pa, pb = traj.position(float(t_a)), traj.position(float(t_b))
    n = plane.normal
    n_a = Ra.T @ n
    d_a = float(n @ (plane.origin - pa))
    R_ba = Rb.T @ Ra
    t_ba = Rb.T @ (pa - pb)
    H = c.K @ (R_ba + np.outer(t_ba, n_a) / d_a) @ c.K_inv
    return H / H[2, 2]


def synthesize_imu(traj: Trajectory, rate: float = 1000.0, rng: np.random.Generator | None = None,
                   gyro_noise: float = 0.0, accel_noise: float = 0.0) -> list[ImuSample]:
    """Gyro (camera-frame angular velocity) and specific force, IMU frame = camera frame."""
    n = int(math.floor(traj.duration * rate + 1e-9)) + 1
    t = np.arange(n) / rate
    R = traj.rotation(t)
    gyro = traj.omega(t)
    acc_w = traj.accel_world(t) + np.array([0.0, 0.0, GRAVITY])
    accel = np.einsum("tji,tj->ti", R, acc_w)
    if rng is not None:
        gyro = gyro + rng.normal(0.0, gyro_noise, gyro.shape) if gyro_noise > 0 else gyro
        accel = accel + rng.normal(0.0, accel_noise, accel.shape) if accel_noise > 0 else accel
    return [ImuSample(float(ti), a, g) for ti, a, g in zip(t, accel, gyro)]


def synthesize_poses(traj: Trajectory, rate: float = 200.0) -> list[PoseSample]:
    n = int(math.floor(traj.duration * rate + 1e-9)) + 1
    t = np.arange(n) / rate
    P = traj.position(t)
    R = traj.rotation(t)
    return [PoseSample(float(ti), p, rot_to_quat(r)) for ti, p, r in zip(t, P, R)]


# --- presets ----------------------------------------------------------------

PRESETS = ("rot-dominant", "mixed-6dof", "fast-switching", "pure-rotation")
SCENES = ("boxes", "wall")


@dataclass(frozen=True)
class SimConfig:
    preset: str = "rot-dominant"
    seed: int = 0
    duration: float = 2.0
    width: int = 240
    height: int = 180
    focal: float = 199.0
    threshold: float = 0.3
    step: float = DEFAULT_STEP
    frame_rate: float = 25.0
    imu_rate: float = 1000.0
    pose_rate: float = 200.0
    scene: str = ""
    jitter: float = 0.0
    noise_rate: float = 0.0
    k1: float = 0.0
    k2: float = 0.0

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {', '.join(PRESETS)}")
        if self.scene and self.scene not in SCENES:
            raise ValueError(f"unknown scene {self.scene!r}; choose from {', '.join(SCENES)}")
        if not self.duration > 0:
            raise ValueError("duration must be positive")

    @property
    def scene_kind(self) -> str:
        return self.scene or ("wall" if self.preset == "pure-rotation" else "boxes")

    def camera(self) -> CameraModel:
        return CameraModel(self.focal, self.focal, (self.width - 1) / 2.0, (self.height - 1) / 2.0,
                           self.width, self.height, self.k1, self.k2)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _phases(rng, n):
    return rng.uniform(0, 2 * math.pi, n)


def build_trajectory(cfg: SimConfig) -> Trajectory:
    rng = np.random.default_rng([cfg.seed, 1])
    ph = _phases(rng, 12)
    name = cfg.preset
    if name == "rot-dominant":
        ang = (
            (Wave(0.22, 0.55, ph[0]), Wave(0.05, 1.6, ph[1])),
            (Wave(0.30, 0.45, ph[2]), Wave(0.06, 1.3, ph[3])),
            (Wave(0.20, 0.60, ph[4]),),
        )
        pos = ((Wave(0.08, 0.4, ph[5]),), (Wave(0.10, 0.35, ph[6]),), (Wave(0.06, 0.5, ph[7]),))
        drift = np.array([0.25, 0.0, 0.0])
    elif name == "mixed-6dof":
        ang = (
            (Wave(0.10, 0.5, ph[0]),),
            (Wave(0.14, 0.4, ph[2]),),
            (Wave(0.10, 0.45, ph[4]),),
        )
        pos = ((Wave(0.25, 0.45, ph[5]),), (Wave(0.35, 0.4, ph[6]),), (Wave(0.20, 0.55, ph[7]),))
        drift = np.array([0.3, 0.0, 0.0])
    elif name == "fast-switching":
        ang = (
            (Wave(0.18, 0.7, ph[0], tri_eps=0.03),),
            (Wave(0.25, 0.6, ph[2], tri_eps=0.03),),
            (Wave(0.12, 0.8, ph[4], tri_eps=0.03),),
        )
        pos = ((Wave(0.10, 0.4, ph[5]),), (Wave(0.12, 0.35, ph[6]),), (Wave(0.08, 0.5, ph[7]),))
        drift = np.array([0.3, 0.0, 0.0])
    else:  # pure-rotation
        ang = (
            (Wave(0.20, 0.5, ph[0]),),
            (Wave(0.25, 0.4, ph[2]),),
            (Wave(0.20, 0.6, ph[4]),),
        )
        pos = ((), (), ())
        drift = np.zeros(3)
    return Trajectory(cfg.duration, LOOK_FORWARD.copy(), np.zeros(3), drift, ang, pos)


def build_scene(cfg: SimConfig) -> Scene:
    rng = np.random.default_rng([cfg.seed, 2])
    density = 70.0  # texels per metre
    wall_half = (9.0, 6.5)
    if cfg.scene_kind == "wall":
        wall = frontal_plane(3.5, wall_half, mondrian_texture(rng, wall_half, density, n_rects=900))
        return Scene((wall,))
    wall = frontal_plane(4.5, wall_half, mondrian_texture(rng, wall_half, density, n_rects=900))
    box_half = (0.6, 0.5)
    box1 = frontal_plane(2.2, box_half, mondrian_texture(rng, box_half, 2 * density, n_rects=60,
                                                         size_range=(0.05, 0.3)), center_offset=(-0.7, 0.2))
    box2 = frontal_plane(3.0, box_half, mondrian_texture(rng, box_half, 2 * density, n_rects=60,
                                                         size_range=(0.05, 0.3)), center_offset=(0.9, -0.3))
    return Scene((box1, box2, wall))


@dataclass
class SimSequence:
    """A fully generated synthetic sequence."""

    config: SimConfig
    camera: CameraModel
    scene: Scene
    trajectory: Trajectory
    events: np.ndarray
    frames: list[ImageGrid]
    imu: list[ImuSample]
    poses: list[PoseSample]


def frame_times(cfg: SimConfig) -> np.ndarray:
    n = int(math.floor(cfg.duration * cfg.frame_rate + 1e-9)) + 1
    return np.arange(n) / cfg.frame_rate


def simulate(cfg: SimConfig, with_frames: bool = True) -> SimSequence:
    c = cfg.camera()
    scene = build_scene(cfg)
    traj = build_trajectory(cfg)
    rng = np.random.default_rng([cfg.seed, 3])
    ev = generate_events(scene, traj, c, cfg.threshold, 0.0, cfg.duration, cfg.step, rng=rng,
                         jitter=cfg.jitter, noise_rate=cfg.noise_rate)
    frames = [render_frame(scene, traj, c, float(t)) for t in frame_times(cfg)] if with_frames else []
    return SimSequence(cfg, c, scene, traj, ev, frames, synthesize_imu(traj, cfg.imu_rate),
                     synthesize_poses(traj, cfg.pose_rate))


def gt_velocity_table(traj: Trajectory, times) -> np.ndarray:
    """Rows ``t vx vy vz wx wy wz speed`` (unit direction, camera frame)."""
    rows = []
    for t in times:
        V, w, s = gt_velocity(traj, float(t))
        rows.append([float(t), *V, *w, s])
    return np.array(rows)


def export_sequence(seq: SimSequence, out_dir, flow_stride: int = 12) -> Path:
    """Write a sequence in the on-disk formats (see docs/formats.md)."""
    out = ensure_dir(out_dir)
    c, traj = seq.camera, seq.trajectory
    write_events(seq.events, out / "events.txt")
    write_calib(c, out / "calib.txt")
    write_imu(seq.imu, out / "imu.txt")
    write_poses(seq.poses, out / "groundtruth.txt")
    img_dir = ensure_dir(out / "images")
    flow_dir = ensure_dir(out / "gtflow")
    lines = []
    v, u = np.mgrid[flow_stride // 2 : c.height : flow_stride, flow_stride // 2 : c.width : flow_stride]
    grid = np.stack([u.ravel(), v.ravel()], axis=1).astype(float)
    for k, fr in enumerate(seq.frames):
        name = f"frame_{k:05d}.pgm"
        write_pgm(fr, img_dir / name)
        lines.append(f"{fr.t:.9f} images/{name}\n")
        z = depth_at(seq.scene, traj, c, fr.t, grid)
        keep = np.isfinite(z)
        fs = gt_flow(seq.scene, traj, c, fr.t, grid[keep])
        _write_text(flow_dir / f"flow_{k:05d}.txt",
                    "".join(f"{p[0]:.3f} {p[1]:.3f} {float(f[0])!r} {float(f[1])!r}\n" for p, f in zip(fs.points, fs.flows)))
    _write_text(out / "images.txt", "".join(lines))
    vt = gt_velocity_table(traj, np.arange(0.0, traj.duration + 1e-9, 1.0 / seq.config.pose_rate))
    _write_text(out / "gt_velocity.txt", "".join(" ".join(repr(float(x)) for x in r) + "\n" for r in vt))
    _write_text(out / "sequence.json", seq.config.to_json() + "\n")
    return out


def _write_text(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_sequence_config(path) -> SimConfig:
    data = json.loads(Path(path).read_text())
    return SimConfig(**data)


def config_digest(cfg: SimConfig) -> str:
    return hashlib.sha256(cfg.to_json().encode()).hexdigest()


def with_overrides(cfg: SimConfig, **kw) -> SimConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
