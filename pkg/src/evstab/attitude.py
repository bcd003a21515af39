"""Camera orientation over time, from ground-truth poses or IMU fusion.

Both sources are re-expressed in the camera frame with the extrinsic rotation
``q_o`` as ``q_C = q_o q_I q_o'`` and queried by slerp between samples.

The IMU filter integrates the gyroscope and pulls roll/pitch toward the
accelerometer's gravity estimate. There is no magnetometer term, so yaw
drifts with gyro error.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .core import (
    Quat,
    quat_conj_array,
    quat_mul_array,
    rotvec_to_quat_array,
    slerp_array,
)
from .errors import InsufficientSamples, OutOfRange
from .ingest import ImuSample, PoseSample

QUERY_MARGIN = 0.010
DEFAULT_GAIN = 0.02


class AttitudeSource(str, Enum):
    GROUND_TRUTH = "gt"
    IMU_FILTER = "imu"


@dataclass(frozen=True)
class AttitudeTrack:
    times: np.ndarray  # (N,) strictly increasing
    quats: np.ndarray  # (N, 4) camera orientations, (w, x, y, z)
    source: AttitudeSource = AttitudeSource.GROUND_TRUTH
    q_o: Quat = Quat()

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        q = np.asarray(self.quats, dtype=float)
        if t.shape[0] < 2:
            raise InsufficientSamples("an attitude track needs at least 2 samples")
        if q.shape != (t.shape[0], 4):
            raise ValueError("quats must be (N, 4)")
        if np.any(np.diff(t) <= 0):
            raise ValueError("attitude sample times must be strictly increasing")
        q = q / np.linalg.norm(q, axis=1, keepdims=True)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "quats", q)

    @property
    def t_first(self) -> float:
        return float(self.times[0])

    @property
    def t_last(self) -> float:
        return float(self.times[-1])


def _to_camera(q_imu: np.ndarray, q_o: Quat) -> np.ndarray:
    qo = q_o.as_array()
    return quat_mul_array(quat_mul_array(qo, q_imu), quat_conj_array(qo))


def _dedupe(times: np.ndarray, quats: np.ndarray):
    # keep the last sample of any run of identical timestamps
    keep = np.append(np.diff(times) > 0, True)
    return times[keep], quats[keep]


def from_poses(poses: Sequence[PoseSample], q_o: Quat = Quat()) -> AttitudeTrack:
    """Orientation track from ground-truth poses; positions are dropped."""
    if len(poses) < 2:
        raise InsufficientSamples(f"need at least 2 poses, got {len(poses)}")
    t = np.array([p.t for p in poses], dtype=float)
    q = np.array([p.orientation.as_array() for p in poses])
    t, q = _dedupe(t, q)
    return AttitudeTrack(t, _to_camera(q, q_o), AttitudeSource.GROUND_TRUTH, q_o)


def _tilt_correction(q: np.ndarray, accel: np.ndarray, gain: float) -> np.ndarray:
    """World-frame rotation taking the measured 'up' toward +z, scaled by gain."""
    n = np.linalg.norm(accel)
    if n < 1e-9 or gain <= 0.0:
        return np.array([1.0, 0.0, 0.0, 0.0])
    a = accel / n
    # rotate body 'up' into the world frame: v_w = q a q*
    qa = np.concatenate([[0.0], a])
    g = quat_mul_array(quat_mul_array(q, qa), quat_conj_array(q))[1:]
    if g[2] < -1.0 + 1e-12:
        # upside down: any horizontal axis works
        dq = np.array([0.0, 1.0, 0.0, 0.0])
    else:
        dq = np.array([1.0 + g[2], g[1], -g[0], 0.0])
        dq /= np.linalg.norm(dq)
    return slerp_array(np.array([[1.0, 0.0, 0.0, 0.0]]), dq[None, :], np.array([gain]))[0]


def fuse_imu(
    samples: Sequence[ImuSample],
    gain: float = DEFAULT_GAIN,
    q_o: Quat = Quat(),
    q0: Quat | None = None,
) -> AttitudeTrack:
    """Gyro integration with accelerometer tilt correction.

    Each step rotates by the mean gyro rate of the bracketing samples,
    ``q <- q (x) exp(w dt / 2)``, then applies the gravity correction with
    weight ``gain`` (0 disables it). ``q0`` is the IMU orientation at the
    first sample (identity by default).
    """
    if len(samples) < 2:
        raise InsufficientSamples(f"need at least 2 IMU samples, got {len(samples)}")
    if not 0.0 <= gain <= 1.0:
        raise ValueError(f"gain must be in [0, 1], got {gain}")
    t = np.array([s.t for s in samples], dtype=float)
    gyro = np.array([s.gyro for s in samples], dtype=float)
    accel = np.array([s.accel for s in samples], dtype=float)

    q = (q0 or Quat()).as_array()
    out = np.empty((len(samples), 4))
    out[0] = q
    for k in range(1, len(samples)):
        dt = t[k] - t[k - 1]
        w = 0.5 * (gyro[k - 1] + gyro[k])
        q = quat_mul_array(q, rotvec_to_quat_array(w * dt))
        if gain > 0.0:
            q = quat_mul_array(_tilt_correction(q, accel[k], gain), q)
        q /= np.linalg.norm(q)
        out[k] = q
    t, out = _dedupe(t, out)
    return AttitudeTrack(t, _to_camera(out, q_o), AttitudeSource.IMU_FILTER, q_o)


def attitude_at_array(track: AttitudeTrack, ts) -> np.ndarray:
    """Camera orientations (N, 4) at query times (vectorized slerp)."""
    ts = np.atleast_1d(np.asarray(ts, dtype=float))
    if ts.size == 0:
        return np.empty((0, 4))
    lo, hi = ts.min(), ts.max()
    if lo < track.t_first - QUERY_MARGIN or hi > track.t_last + QUERY_MARGIN:
        bad = lo if lo < track.t_first - QUERY_MARGIN else hi
        raise OutOfRange(f"t={bad:.6f} outside attitude range [{track.t_first:.6f}, {track.t_last:.6f}]")
    tc = np.clip(ts, track.t_first, track.t_last)
    idx = np.searchsorted(track.times, tc, side="right") - 1
    idx = np.clip(idx, 0, track.times.shape[0] - 2)
    t0 = track.times[idx]
    s = (tc - t0) / (track.times[idx + 1] - t0)
    return slerp_array(track.quats[idx], track.quats[idx + 1], s)


def attitude_at(track: AttitudeTrack, t: float) -> Quat:
    """Camera orientation at time ``t``; clamped within 10 ms of the ends."""
    return Quat.from_array(attitude_at_array(track, [t])[0], normalize=True)
