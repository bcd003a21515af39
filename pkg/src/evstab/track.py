"""KLT feature tracking on image grids and the tracking-accuracy metrics.

Tracks are compared against ground-truth tracks with the same id. Errors are
taken at the ground-truth sample times inside the estimated track's lifetime,
with the estimate linearly interpolated in time (exact when both share the
grid timestamps).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import cv2
import numpy as np

from .errors import NoValidTracks
from .flow import DEFAULT_EPS, DEFAULT_ITERS, DEFAULT_LEVELS, DEFAULT_WINDOW, detect_corners, lk_track_points, to_uint8
from .ingest import ImageGrid


class TrackStatus(str, Enum):
    ACTIVE = "active"
    LOST = "lost"
    RESTARTED = "restarted"


@dataclass
class FeatureTrack:
    id: int
    times: list = field(default_factory=list)
    points: list = field(default_factory=list)
    status: TrackStatus = TrackStatus.ACTIVE
    birth_t: float = math.nan
    death_t: float | None = None

    def append(self, t: float, xy) -> None:
        if self.status is not TrackStatus.ACTIVE:
            raise ValueError(f"track {self.id} is {self.status.value}; cannot append")
        if self.times and t <= self.times[-1]:
            raise ValueError("track samples must be strictly time-ordered")
        if not self.times:
            self.birth_t = float(t)
        self.times.append(float(t))
        self.points.append((float(xy[0]), float(xy[1])))

    def end(self, status: TrackStatus) -> None:
        self.status = status
        self.death_t = self.times[-1] if self.times else self.birth_t

    @property
    def t(self) -> np.ndarray:
        return np.asarray(self.times, dtype=float)

    @property
    def xy(self) -> np.ndarray:
        return np.asarray(self.points, dtype=float).reshape(-1, 2)

    @property
    def age(self) -> float:
        return self.times[-1] - self.times[0] if self.times else 0.0

    def __len__(self) -> int:
        return len(self.times)

    def position_at(self, ts) -> np.ndarray:
        """Linear interpolation of the track at times inside its lifetime."""
        t = self.t
        xy = self.xy
        ts = np.asarray(ts, dtype=float)
        return np.stack([np.interp(ts, t, xy[:, 0]), np.interp(ts, t, xy[:, 1])], axis=-1)


@dataclass(frozen=True)
class TrackMetrics:
    TE: float
    TTE: float
    ETE: float
    NFA: float
    TFA: float
    n_valid: int = 0

    def as_row(self) -> dict:
        return {"TE": self.TE, "TTE": self.TTE, "ETE": self.ETE, "NFA": self.NFA, "TFA": self.TFA,
                "n_valid": self.n_valid}


def _in_bounds(xy: np.ndarray, shape) -> np.ndarray:
    h, w = shape
    return (xy[:, 0] >= 0) & (xy[:, 0] <= w - 1) & (xy[:, 1] >= 0) & (xy[:, 1] <= h - 1)


def klt_track(
    grids: Iterable[ImageGrid],
    init=None,
    restart_at: Iterable[int] = (),
    max_corners: int = 200,
    min_distance: float = 7.0,
    levels: int = DEFAULT_LEVELS,
    window: int = DEFAULT_WINDOW,
    iters: int = DEFAULT_ITERS,
    eps: float = DEFAULT_EPS,
    border: int = 0,
) -> list[FeatureTrack]:
    """Track points through consecutive grids with pyramidal LK.

    Args:
        grids: time-ordered grids (at least 2).
        init: starting points (N, 2); Harris corners of the first grid when None.
        restart_at: grid indices at which the reference changed (a saccade).
            Active tracks end there as Restarted and fresh corners are detected.
        border: tracks closer than this to the edge (or to masked pixels) are Lost.
    """
    grids = list(grids)
    if len(grids) < 2:
        raise ValueError("klt_track needs at least 2 grids")
    restarts = set(int(k) for k in restart_at)
    tracks: list[FeatureTrack] = []
    active: list[FeatureTrack] = []

    def spawn(k: int, pts) -> None:
        for p in np.asarray(pts, dtype=float).reshape(-1, 2):
            tr = FeatureTrack(len(tracks))
            tr.append(grids[k].t, p)
            tracks.append(tr)
            active.append(tr)

    def detect(k: int):
        g = grids[k]
        return detect_corners(g, max_corners, min_distance, mask=_detect_mask(g, border))

    spawn(0, detect(0) if init is None else init)
    for k in range(1, len(grids)):
        prev, nxt = grids[k - 1], grids[k]
        if k in restarts:
            for tr in active:
                tr.end(TrackStatus.RESTARTED)
            active.clear()
            spawn(k, detect(k))
            continue
        if not active:
            continue
        a, b = to_uint8(prev, nxt)
        pts = np.array([tr.points[-1] for tr in active])
        new, ok, _ = lk_track_points(a, b, pts, levels, window, iters, eps)
        ok &= _inside(new, nxt, border)
        still = []
        for tr, p, good in zip(active, new, ok):
            if good:
                tr.append(nxt.t, p)
                still.append(tr)
            else:
                tr.end(TrackStatus.LOST)
        active[:] = still
    return tracks


def _detect_mask(g: ImageGrid, border: int) -> np.ndarray | None:
    if g.mask is None and border <= 0:
        return None
    m = np.ones(g.values.shape, bool) if g.mask is None else g.mask.copy()
    if border > 0:
        m = cv2.erode(m.astype(np.uint8), np.ones((2 * border + 1, 2 * border + 1), np.uint8),
                      borderType=cv2.BORDER_CONSTANT, borderValue=0).astype(bool)
    return m


def _inside(xy: np.ndarray, g: ImageGrid, border: int) -> np.ndarray:
    h, w = g.values.shape
    ok = np.all(np.isfinite(xy), axis=1)
    ok &= (xy[:, 0] >= border) & (xy[:, 0] <= w - 1 - border) & (xy[:, 1] >= border) & (xy[:, 1] <= h - 1 - border)
    if g.mask is not None and ok.any():
        ix = np.clip(np.rint(xy[:, 0]).astype(int), 0, w - 1)
        iy = np.clip(np.rint(xy[:, 1]).astype(int), 0, h - 1)
        ok &= g.mask[iy, ix]
    return ok


def apply_homography(H: np.ndarray, xy: np.ndarray) -> np.ndarray:
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    p = xy @ H[:, :2].T + H[:, 2]
    return p[:, :2] / p[:, 2:3]


def propagate_gt_tracks(
    homographies: Sequence[np.ndarray],
    init,
    times: Sequence[float] | None = None,
    shape: tuple[int, int] | None = None,
    ids: Sequence[int] | None = None,
    masks: Sequence[np.ndarray] | None = None,
) -> list[FeatureTrack]:
    """Ground-truth tracks as homography images of ``init``.

    ``homographies[k]`` maps pixels of the first grid to grid ``k`` (so the
    first one is normally the identity). With ``shape=(H, W)`` a GT track ends
    (Lost) once it leaves the image or lands on a masked-out pixel.
    """
    init = np.asarray(init, dtype=float).reshape(-1, 2)
    times = list(range(len(homographies))) if times is None else list(times)
    if len(times) != len(homographies):
        raise ValueError("need one timestamp per homography")
    ids = list(range(init.shape[0])) if ids is None else list(ids)
    tracks = [FeatureTrack(i) for i in ids]
    for k, (H, t) in enumerate(zip(homographies, times)):
        xy = apply_homography(np.asarray(H, dtype=float), init)
        ok = np.all(np.isfinite(xy), axis=1)
        if shape is not None:
            ok &= _in_bounds(xy, shape)
            if masks is not None and masks[k] is not None:
                h, w = shape
                ix = np.clip(np.rint(xy[:, 0]).astype(int), 0, w - 1)
                iy = np.clip(np.rint(xy[:, 1]).astype(int), 0, h - 1)
                ok &= masks[k][iy, ix]
        for tr, p, good in zip(tracks, xy, ok):
            if tr.status is not TrackStatus.ACTIVE:
                continue
            if good:
                tr.append(t, p)
            elif tr.times:
                tr.end(TrackStatus.LOST)
    return tracks


def compute_track_metrics(
    est: Sequence[FeatureTrack],
    gt: Sequence[FeatureTrack],
    tau_valid: float,
    normalization: str = "per-track",
) -> TrackMetrics:
    """TE, TTE, ETE (px) and NFA, TFA (ratios) over valid tracks.

    A track is valid when its estimated age is at least ``tau_valid``. Ages are
    normalized by the GT age and capped at 1.

    ``normalization="per-track"`` averages per-track mean errors for TTE and
    weights each track's age ratio by its sample count for TFA;
    ``"global"`` pools every sample (TTE) and divides total age by total GT
    age (TFA).
    """
    if normalization not in ("per-track", "global"):
        raise ValueError(f"unknown normalization {normalization!r}")
    gt_by_id = {g.id: g for g in gt}
    all_err: list[np.ndarray] = []
    track_mean, end_err, ratio, n_samples, ages, gt_ages = [], [], [], [], [], []
    for tr in est:
        g = gt_by_id.get(tr.id)
        if g is None or len(tr) == 0 or len(g) == 0 or tr.age < tau_valid:
            continue
        gt_age = g.age
        if not gt_age > 0:
            continue
        gt_t = g.t
        sel = (gt_t >= tr.times[0] - 1e-12) & (gt_t <= tr.times[-1] + 1e-12)
        if not sel.any():
            continue
        e = np.linalg.norm(tr.position_at(gt_t[sel]) - g.xy[sel], axis=1)
        all_err.append(e)
        track_mean.append(float(e.mean()))
        # end-point error at the last instant both tracks exist
        t_end = min(tr.times[-1], g.times[-1])
        end_err.append(float(np.linalg.norm(tr.position_at(t_end) - g.position_at(t_end))))
        ratio.append(min(1.0, tr.age / gt_age))
        n_samples.append(int(sel.sum()))
        ages.append(min(tr.age, gt_age))
        gt_ages.append(gt_age)
    if not all_err:
        raise NoValidTracks(f"no track reached the validity age {tau_valid} s")
    pooled = np.concatenate(all_err)
    TE = float(pooled.mean())
    ratio_a = np.asarray(ratio)
    NFA = float(ratio_a.mean())
    if normalization == "per-track":
        TTE = float(np.mean(track_mean))
        TFA = float(np.average(ratio_a, weights=np.asarray(n_samples, float)))
    else:
        TTE = TE
        TFA = float(np.sum(ages) / np.sum(gt_ages))
    return TrackMetrics(TE, TTE, float(np.mean(end_err)), NFA, TFA, len(ratio))
