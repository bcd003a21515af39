"""Geometric and temporal primitives: quaternions, rotations, cameras, events.

Quaternions are stored in (w, x, y, z) order and use the Hamilton product, so
that ``quat_to_rot(quat_mul(a, b)) == quat_to_rot(a) @ quat_to_rot(b)``.
An orientation quaternion maps vectors from the body (camera) frame to the
world frame.

Scalar helpers take :class:`Quat` values; the ``*_array`` variants operate on
``(N, 4)`` arrays and are what the per-event hot paths use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import InvalidCalibration, NonUnitQuaternion

UNIT_TOL = 1e-3


@dataclass(frozen=True)
class Quat:
    """Unit quaternion (w, x, y, z).

    The constructor accepts inputs whose norm is within ``UNIT_TOL`` of one and
    renormalizes them; anything further away raises :class:`NonUnitQuaternion`.
    """

    w: float = 1.0
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    def __post_init__(self):
        n = math.sqrt(self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z)
        if not math.isfinite(n) or abs(n - 1.0) > UNIT_TOL:
            raise NonUnitQuaternion(f"quaternion norm {n} is not 1")
        if n != 1.0:
            object.__setattr__(self, "w", self.w / n)
            object.__setattr__(self, "x", self.x / n)
            object.__setattr__(self, "y", self.y / n)
            object.__setattr__(self, "z", self.z / n)

    @classmethod
    def identity(cls) -> "Quat":
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, a, normalize: bool = False) -> "Quat":
        a = np.asarray(a, dtype=float)
        if normalize:
            n = np.linalg.norm(a)
            if not np.isfinite(n) or n == 0.0:
                raise NonUnitQuaternion("cannot normalize a zero quaternion")
            a = a / n
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))

    @classmethod
    def from_axis_angle(cls, axis, angle: float) -> "Quat":
        axis = np.asarray(axis, dtype=float)
        axis = axis / np.linalg.norm(axis)
        s = math.sin(0.5 * angle)
        return cls(math.cos(0.5 * angle), *(s * axis))

    @classmethod
    def from_rotvec(cls, v) -> "Quat":
        return cls.from_array(rotvec_to_quat_array(np.asarray(v, dtype=float)))

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    def __neg__(self) -> "Quat":
        return Quat(-self.w, -self.x, -self.y, -self.z)

    def __mul__(self, other: "Quat") -> "Quat":
        return quat_mul(self, other)

    def conj(self) -> "Quat":
        return quat_conj(self)


def quat_mul(a: Quat, b: Quat) -> Quat:
    return Quat.from_array(quat_mul_array(a.as_array(), b.as_array()), normalize=True)


def quat_conj(q: Quat) -> Quat:
    return Quat(q.w, -q.x, -q.y, -q.z)


def quat_to_rot(q: Quat) -> np.ndarray:
    """Rotation matrix of a unit quaternion; q and -q give the same matrix."""
    if not isinstance(q, Quat):
        q = Quat.from_array(q)
    return quats_to_rots(q.as_array()[None, :])[0]


def rot_to_quat(R) -> Quat:
    """Inverse of :func:`quat_to_rot` (Shepperd's method), returned with w >= 0."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * math.sqrt(1.0 + tr)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    if q[0] < 0:
        q = -q
    return Quat.from_array(q, normalize=True)


def quat_slerp(a: Quat, b: Quat, s: float) -> Quat:
    """Spherical interpolation along the shortest arc (b is negated if a·b < 0)."""
    out = slerp_array(a.as_array()[None, :], b.as_array()[None, :], np.array([float(s)]))[0]
    return Quat.from_array(out, normalize=True)


def quat_angle(a: Quat, b: Quat) -> float:
    """Angle (rad) of the relative rotation between two orientations."""
    d = abs(float(np.dot(a.as_array(), b.as_array())))
    return 2.0 * math.acos(min(1.0, d))


def quat_to_rotvec(q: Quat) -> np.ndarray:
    v = np.array([q.x, q.y, q.z])
    w = q.w
    if w < 0:
        v, w = -v, -w
    n = np.linalg.norm(v)
    if n < 1e-15:
        return 2.0 * v
    return 2.0 * math.atan2(n, w) * v / n


# --- array forms ------------------------------------------------------------


def quat_mul_array(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product of broadcastable (..., 4) arrays."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=float), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=float), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conj_array(q: np.ndarray) -> np.ndarray:
    q = np.array(q, dtype=float, copy=True)
    q[..., 1:] *= -1.0
    return q


def quats_to_rots(q: np.ndarray) -> np.ndarray:
    """(N, 4) unit quaternions -> (N, 3, 3) rotation matrices."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (yy + zz)
    R[:, 0, 1] = 2 * (xy - wz)
    R[:, 0, 2] = 2 * (xz + wy)
    R[:, 1, 0] = 2 * (xy + wz)
    R[:, 1, 1] = 1 - 2 * (xx + zz)
    R[:, 1, 2] = 2 * (yz - wx)
    R[:, 2, 0] = 2 * (xz - wy)
    R[:, 2, 1] = 2 * (yz + wx)
    R[:, 2, 2] = 1 - 2 * (xx + yy)
    return R


def rotvec_to_quat_array(v: np.ndarray) -> np.ndarray:
    """Exponential map of rotation vectors (..., 3) -> unit quaternions (..., 4)."""
    v = np.asarray(v, dtype=float)
    angle = np.linalg.norm(v, axis=-1)
    half = 0.5 * angle
    # sin(half)/angle with its Taylor series near zero
    small = angle < 1e-8
    safe = np.where(small, 1.0, angle)
    k = np.where(small, 0.5 - angle**2 / 48.0, np.sin(half) / safe)
    return np.concatenate([np.cos(half)[..., None], k[..., None] * v], axis=-1)


def slerp_array(a: np.ndarray, b: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Row-wise shortest-arc slerp between (N, 4) arrays with fractions (N,)."""
    a = np.asarray(a, dtype=float)
    b = np.array(b, dtype=float, copy=True)
    s = np.asarray(s, dtype=float)
    d = np.einsum("ij,ij->i", a, b)
    neg = d < 0
    b[neg] *= -1.0
    d = np.abs(d)
    out = np.empty_like(a)
    lin = d > 0.9995
    if np.any(lin):
        sl = s[lin, None]
        v = a[lin] + sl * (b[lin] - a[lin])
        out[lin] = v / np.linalg.norm(v, axis=1, keepdims=True)
    nl = ~lin
    if np.any(nl):
        theta = np.arccos(np.clip(d[nl], -1.0, 1.0))
        sin_t = np.sin(theta)
        sl = s[nl]
        wa = np.sin((1.0 - sl) * theta) / sin_t
        wb = np.sin(sl * theta) / sin_t
        out[nl] = wa[:, None] * a[nl] + wb[:, None] * b[nl]
    return out


# --- camera -----------------------------------------------------------------


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics with radial-tangential (plumb-bob) distortion."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    k1: float = 0.0
    k2: float = 0.0
    p1: float = 0.0
    p2: float = 0.0
    k3: float = 0.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidCalibration(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise InvalidCalibration(f"invalid sensor size {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidCalibration(f"principal point ({self.cx}, {self.cy}) outside the sensor")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.array(
            [[1.0 / self.fx, 0.0, -self.cx / self.fx], [0.0, 1.0 / self.fy, -self.cy / self.fy], [0.0, 0.0, 1.0]]
        )

    @property
    def distortion(self) -> tuple[float, float, float, float, float]:
        return (self.k1, self.k2, self.p1, self.p2, self.k3)

    @property
    def has_distortion(self) -> bool:
        return any(c != 0.0 for c in self.distortion)

    def without_distortion(self) -> "CameraModel":
        return CameraModel(self.fx, self.fy, self.cx, self.cy, self.width, self.height)

    def homography(self, R: np.ndarray) -> np.ndarray:
        """K R K^-1 for a rotation R."""
        return self.K @ R @ self.K_inv


def pixel_to_normalized(c: CameraModel, x_px) -> np.ndarray:
    """Pixel coordinates (..., 2) -> normalized image coordinates (no distortion)."""
    p = np.asarray(x_px, dtype=float)
    return np.stack([(p[..., 0] - c.cx) / c.fx, (p[..., 1] - c.cy) / c.fy], axis=-1)


def normalized_to_pixel(c: CameraModel, x_n) -> np.ndarray:
    p = np.asarray(x_n, dtype=float)
    return np.stack([p[..., 0] * c.fx + c.cx, p[..., 1] * c.fy + c.cy], axis=-1)


def distort_normalized(x, y, coeffs):
    """Apply the radial-tangential model to normalized coordinates."""
    k1, k2, p1, p2, k3 = coeffs
    r2 = x * x + y * y
    radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
    xd = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
    yd = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
    return xd, yd


def undistort_normalized(xd, yd, coeffs, iterations: int = 20, tol: float = 1e-10):
    """Fixed-point inversion of :func:`distort_normalized`.

    Returns ``(x, y, converged)``; ``converged`` is a boolean array that is
    False where the last update exceeded ``tol`` or the iterate is not finite.
    """
    k1, k2, p1, p2, k3 = coeffs
    xd = np.asarray(xd, dtype=float)
    yd = np.asarray(yd, dtype=float)
    x, y = xd.copy(), yd.copy()
    step = np.full(x.shape, np.inf)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for _ in range(iterations):
            r2 = x * x + y * y
            radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
            dx = 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
            dy = p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
            xn = (xd - dx) / radial
            yn = (yd - dy) / radial
            step = np.hypot(xn - x, yn - y)
            x, y = xn, yn
        converged = np.isfinite(x) & np.isfinite(y) & (step <= tol)
    return x, y, converged


# --- events -----------------------------------------------------------------


class Event(NamedTuple):
    t: float
    x: float
    y: float
    p: int


EVENT_DTYPE = np.dtype([("t", "f8"), ("x", "f8"), ("y", "f8"), ("p", "i1")])


def make_events(t, x, y, p) -> np.ndarray:
    """Pack column arrays into a structured event array."""
    t = np.asarray(t, dtype=float)
    ev = np.empty(t.shape[0], dtype=EVENT_DTYPE)
    ev["t"] = t
    ev["x"] = x
    ev["y"] = y
    ev["p"] = p
    return ev


def events_from_list(events) -> np.ndarray:
    events = list(events)
    if not events:
        return np.empty(0, dtype=EVENT_DTYPE)
    arr = np.array([tuple(e) for e in events], dtype=float)
    return make_events(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3].astype(np.int8))
