"""Undistortion and rotational stabilization of events and frames.

A pixel observed under camera orientation ``q_C`` is re-projected as if the
camera held the reference orientation ``q_ref``::

    x' ~ K R(q*) K^-1 x,   q* = q_ref^-1 q_C

Events are undistorted through a per-pixel look-up table first. When the
principal point's stabilized image drifts more than ``threshold_px`` from
its rest position the reference is reset to the current orientation
(a "saccade").
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .core import (
    CameraModel,
    Event,
    Quat,
    distort_normalized,
    quat_conj_array,
    quat_mul_array,
    quat_to_rot,
    quats_to_rots,
    undistort_normalized,
)
from .errors import DivergentUndistortion
from .ingest import ImageGrid

LUT_ITERATIONS = 20
LUT_TOL = 1e-10


@dataclass(frozen=True)
class UndistortLut:
    """Undistorted pixel coordinates for every integer pixel, shape (H, W)."""

    map_x: np.ndarray
    map_y: np.ndarray
    camera: CameraModel

    def lookup(self, x, y) -> tuple[np.ndarray, np.ndarray]:
        """Bilinear lookup; exact at integer pixels. Inputs are clamped to the sensor."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        h, w = self.map_x.shape
        xc = np.clip(x, 0.0, w - 1.0)
        yc = np.clip(y, 0.0, h - 1.0)
        x0 = np.minimum(np.floor(xc).astype(np.intp), w - 2) if w > 1 else np.zeros_like(xc, dtype=np.intp)
        y0 = np.minimum(np.floor(yc).astype(np.intp), h - 2) if h > 1 else np.zeros_like(yc, dtype=np.intp)
        fx = xc - x0
        fy = yc - y0
        x1 = np.minimum(x0 + 1, w - 1)
        y1 = np.minimum(y0 + 1, h - 1)

        def interp(m):
            top = m[y0, x0] * (1 - fx) + m[y0, x1] * fx
            bot = m[y1, x0] * (1 - fx) + m[y1, x1] * fx
            return top * (1 - fy) + bot * fy

        return interp(self.map_x), interp(self.map_y)


@dataclass
class StabilizerState:
    """Reference orientation and saccade bookkeeping (single writer)."""

    q_ref: Quat
    threshold_px: float
    saccade_count: int = 0

    def __post_init__(self):
        if not self.threshold_px > 0:
            raise ValueError("threshold_px must be positive")

    @classmethod
    def for_camera(cls, c: CameraModel, q_ref: Quat = Quat(), threshold_px: float | None = None):
        return cls(q_ref=q_ref, threshold_px=c.width / 6.0 if threshold_px is None else threshold_px)


def build_undistort_lut(c: CameraModel) -> UndistortLut:
    """Invert the lens model at every integer pixel by fixed-point iteration."""
    v, u = np.mgrid[0 : c.height, 0 : c.width].astype(float)
    xd = (u - c.cx) / c.fx
    yd = (v - c.cy) / c.fy
    if not c.has_distortion:
        return UndistortLut(u, v, c)
    x, y, ok = undistort_normalized(xd, yd, c.distortion, LUT_ITERATIONS, LUT_TOL)
    if not np.all(ok):
        bad = np.argwhere(~ok)[0]
        raise DivergentUndistortion(
            f"undistortion did not converge at pixel (x={bad[1]}, y={bad[0]}); "
            f"{int((~ok).sum())} pixels failed"
        )
    return UndistortLut(x * c.fx + c.cx, y * c.fy + c.cy, c)


def relative_quats(q_ref: Quat, q_C: np.ndarray) -> np.ndarray:
    """q* = q_ref^-1 q_C for an (N, 4) array of orientations."""
    return quat_mul_array(quat_conj_array(q_ref.as_array()), np.asarray(q_C, dtype=float))


def stabilization_homography(q_ref: Quat, q_C: Quat, c: CameraModel) -> np.ndarray:
    q_star = Quat.from_array(relative_quats(q_ref, q_C.as_array()[None])[0], normalize=True)
    return c.homography(quat_to_rot(q_star))


def in_bounds(c: CameraModel, x, y) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    with np.errstate(invalid="ignore"):
        return (x >= 0) & (x <= c.width - 1) & (y >= 0) & (y <= c.height - 1)


def undistort_events(events: np.ndarray, lut: UndistortLut) -> np.ndarray:
    out = events.copy()
    out["x"], out["y"] = lut.lookup(events["x"], events["y"])
    return out


def rotate_pixels(x, y, R: np.ndarray, c: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    """Apply K R K^-1 to undistorted pixels; R is (3, 3) or per-point (N, 3, 3).

    Points that rotate behind the camera come back as NaN.
    """
    nx = (np.asarray(x, dtype=float) - c.cx) / c.fx
    ny = (np.asarray(y, dtype=float) - c.cy) / c.fy
    if R.ndim == 2:
        rx = R[0, 0] * nx + R[0, 1] * ny + R[0, 2]
        ry = R[1, 0] * nx + R[1, 1] * ny + R[1, 2]
        rz = R[2, 0] * nx + R[2, 1] * ny + R[2, 2]
    else:
        rx = R[:, 0, 0] * nx + R[:, 0, 1] * ny + R[:, 0, 2]
        ry = R[:, 1, 0] * nx + R[:, 1, 1] * ny + R[:, 1, 2]
        rz = R[:, 2, 0] * nx + R[:, 2, 1] * ny + R[:, 2, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(rz > 1e-12, 1.0 / rz, np.nan)
    return c.fx * rx * inv + c.cx, c.fy * ry * inv + c.cy


def stabilize_events(
    events: np.ndarray, q_C: np.ndarray, q_ref: Quat, c: CameraModel, lut: UndistortLut
) -> tuple[np.ndarray, np.ndarray]:
    """Undistort and stabilize a structured event array.

    Args:
        events: structured array with fields t, x, y, p (raw pixel coordinates).
        q_C: (N, 4) camera orientation at each event timestamp.
        q_ref: reference orientation shared by all events.

    Returns:
        (stabilized events, in-FOV mask). Time and polarity are untouched;
        coordinates are real-valued and may fall outside the sensor.
    """
    ux, uy = lut.lookup(events["x"], events["y"])
    R = quats_to_rots(relative_quats(q_ref, q_C))
    out = events.copy()
    out["x"], out["y"] = rotate_pixels(ux, uy, R, c)
    return out, in_bounds(c, out["x"], out["y"])


def stabilize_event(e: Event, q_C: Quat, state: StabilizerState, c: CameraModel, lut: UndistortLut) -> Event:
    """Single-event form of :func:`stabilize_events` (use ``in_bounds`` for the FOV flag)."""
    ux, uy = lut.lookup(np.array([e.x]), np.array([e.y]))
    R = quats_to_rots(relative_quats(state.q_ref, q_C.as_array()[None]))
    x, y = rotate_pixels(ux, uy, R, c)
    return Event(e.t, float(x[0]), float(y[0]), e.p)


def _snap(a: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    r = np.round(a)
    return np.where(np.abs(a - r) < tol, r, a)


def bilinear_sample(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear sample with zero fill; returns (values, valid mask)."""
    h, w = img.shape
    with np.errstate(invalid="ignore"):
        valid = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xs = np.where(valid, x, 0.0)
    ys = np.where(valid, y, 0.0)
    x0 = np.clip(np.floor(xs).astype(np.intp), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(ys).astype(np.intp), 0, max(h - 2, 0))
    fx = xs - x0
    fy = ys - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    vals = top * (1 - fy) + bot * fy
    return np.where(valid, vals, 0.0), valid


def warp_frame(img: ImageGrid, R_star: np.ndarray, c: CameraModel) -> ImageGrid:
    """Inverse-warp a raw (distorted) frame into the stabilized, undistorted view."""
    h, w = img.values.shape
    v, u = np.mgrid[0:h, 0:w].astype(float)
    # output pixel -> ray in the reference frame -> ray in the current frame
    nx = (u - c.cx) / c.fx
    ny = (v - c.cy) / c.fy
    Rt = R_star.T
    rx = Rt[0, 0] * nx + Rt[0, 1] * ny + Rt[0, 2]
    ry = Rt[1, 0] * nx + Rt[1, 1] * ny + Rt[1, 2]
    rz = Rt[2, 0] * nx + Rt[2, 1] * ny + Rt[2, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(rz > 1e-12, 1.0 / rz, np.nan)
    xn, yn = rx * inv, ry * inv
    if c.has_distortion:
        xn, yn = distort_normalized(xn, yn, c.distortion)
    sx = _snap(c.fx * xn + c.cx)
    sy = _snap(c.fy * yn + c.cy)
    vals, valid = bilinear_sample(img.values, sx, sy)
    if img.mask is not None:
        mvals, _ = bilinear_sample(img.mask.astype(float), sx, sy)
        valid &= mvals > 0.999
        vals = np.where(valid, vals, 0.0)
    return ImageGrid(vals, t=img.t, mask=valid)


def stabilize_frame(img: ImageGrid, q_C: Quat, state: StabilizerState, c: CameraModel, lut=None) -> ImageGrid:
    """Stabilize a frame against ``state.q_ref``; invalid pixels are 0 and masked out.

    ``lut`` is accepted for symmetry with the event path; frames use the
    forward distortion model directly since output pixels are not on the
    source lattice.
    """
    if (img.width, img.height) != (c.width, c.height):
        raise ValueError(f"frame is {img.width}x{img.height}, camera is {c.width}x{c.height}")
    q_star = Quat.from_array(relative_quats(state.q_ref, q_C.as_array()[None])[0], normalize=True)
    return warp_frame(img, quat_to_rot(q_star), c)


def principal_point_displacement(q_ref: Quat, q_C: Quat, c: CameraModel) -> float:
    """Distance (px) the principal point moves under K R(q*) K^-1."""
    q_star = Quat.from_array(relative_quats(q_ref, q_C.as_array()[None])[0], normalize=True)
    r = quat_to_rot(q_star)[:, 2]
    if r[2] <= 1e-12:
        return float("inf")
    return float(np.hypot(c.fx * r[0] / r[2], c.fy * r[1] / r[2]))


def maybe_saccade(state: StabilizerState, q_C: Quat, c: CameraModel) -> Literal["kept", "reset"]:
    """Reset the reference when the displacement strictly exceeds the threshold."""
    if principal_point_displacement(state.q_ref, q_C, c) > state.threshold_px:
        state.q_ref = q_C
        state.saccade_count += 1
        return "reset"
    return "kept"
