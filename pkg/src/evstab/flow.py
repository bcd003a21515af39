"""Sparse optical flow between consecutive image grids.

Harris corners and pyramidal Lucas-Kanade come from OpenCV. Grids of any
range (frames, IWEs, time surfaces) are mapped to 8 bits with a scale shared
by both images of a pair. Flow is reported in px/s.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import cv2
import numpy as np

from .errors import NoTexture
from .ingest import ImageGrid

DEFAULT_LEVELS = 3
DEFAULT_WINDOW = 15
DEFAULT_ITERS = 20
DEFAULT_EPS = 0.01
DEFAULT_FB_MAX = 1.0  # px; forward-backward round-trip tolerance
HARRIS_K = 0.04


class SourceKind(str, Enum):
    FRAME = "frame"
    IWE = "iwe"
    TS = "ts"
    SYNTHETIC = "synthetic"


@dataclass
class FlowSet:
    """Sparse flow samples: pixel positions (N, 2), flows (N, 2) in px/s, quality (N,)."""

    points: np.ndarray
    flows: np.ndarray
    quality: np.ndarray
    dt: float
    source_kind: SourceKind = SourceKind.SYNTHETIC
    t: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 2)
        self.flows = np.asarray(self.flows, dtype=float).reshape(-1, 2)
        self.quality = np.asarray(self.quality, dtype=float).reshape(-1)
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not (self.points.shape[0] == self.flows.shape[0] == self.quality.shape[0]):
            raise ValueError("points, flows and quality must have the same length")
        if not np.all(np.isfinite(self.flows)):
            raise ValueError("flows must be finite")

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def samples(self):
        return list(zip(map(tuple, self.points), map(tuple, self.flows), self.quality))

    def subset(self, idx) -> "FlowSet":
        return FlowSet(self.points[idx], self.flows[idx], self.quality[idx], self.dt, self.source_kind, self.t,
                       dict(self.meta))

    def scaled(self, k: float) -> "FlowSet":
        return FlowSet(self.points, self.flows * k, self.quality, self.dt, self.source_kind, self.t, dict(self.meta))


def to_uint8(*grids: ImageGrid, scale: float | None = None) -> list[np.ndarray]:
    """Quantize grids with one shared scale (1.0 for [0, 1] images)."""
    if scale is None:
        vmax = max(float(g.values.max()) for g in grids)
        if vmax <= 1.0:
            scale = 1.0
        else:
            both = np.concatenate([g.values.ravel() for g in grids])
            nz = both[both > 0]
            scale = float(np.percentile(nz, 99.5)) if nz.size else 1.0
    scale = max(scale, 1e-12)
    return [np.round(np.clip(g.values / scale, 0.0, 1.0) * 255.0).astype(np.uint8) for g in grids]


def detect_corners(
    img: ImageGrid,
    max_n: int = 500,
    min_distance: float = 7.0,
    quality_level: float = 0.01,
    mask: np.ndarray | None = None,
) -> np.ndarray:
    """Harris corners (k=0.04, 3x3 Sobel, 3x3 window) as an (N, 2) array of (x, y)."""
    vals = img.values.astype(np.float32)
    if float(vals.max() - vals.min()) <= 0.0:
        raise NoTexture("image is constant")
    m = None if mask is None else mask.astype(np.uint8)
    pts = cv2.goodFeaturesToTrack(
        vals, maxCorners=int(max_n), qualityLevel=quality_level, minDistance=float(min_distance),
        mask=m, blockSize=3, gradientSize=3, useHarrisDetector=True, k=HARRIS_K,
    )
    if pts is None or pts.shape[0] < 2:
        raise NoTexture(f"found {0 if pts is None else pts.shape[0]} corners, need at least 2")
    return pts.reshape(-1, 2).astype(float)


def lk_track_points(
    prev_u8: np.ndarray,
    next_u8: np.ndarray,
    points: np.ndarray,
    levels: int = DEFAULT_LEVELS,
    window: int = DEFAULT_WINDOW,
    iters: int = DEFAULT_ITERS,
    eps: float = DEFAULT_EPS,
    fb_max: float | None = DEFAULT_FB_MAX,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Run pyramidal LK on 8-bit images; returns (new points, ok mask, residual in [0, 1] units).

    ``levels`` counts pyramid reductions above full resolution, so the
    coarsest level is downsampled by ``2**levels``.

    With ``fb_max`` set, each point is also tracked back from ``next_u8`` and
    rejected when it does not return within ``fb_max`` px.
    """
    points = np.asarray(points, dtype=np.float32).reshape(-1, 1, 2)
    if points.shape[0] == 0:
        return np.empty((0, 2)), np.zeros(0, bool), np.empty(0)
    win = (window, window)
    crit = (cv2.TERM_CRITERIA_COUNT | cv2.TERM_CRITERIA_EPS, iters, eps)
    nxt, status, err = cv2.calcOpticalFlowPyrLK(prev_u8, next_u8, points, None, winSize=win,
                                                maxLevel=levels, criteria=crit)
    ok = status.reshape(-1).astype(bool)
    if fb_max is not None:
        back, st_b, _ = cv2.calcOpticalFlowPyrLK(next_u8, prev_u8, nxt, None, winSize=win,
                                                 maxLevel=levels, criteria=crit)
        fb = np.linalg.norm(back.reshape(-1, 2) - points.reshape(-1, 2), axis=1)
        ok &= st_b.reshape(-1).astype(bool) & (fb <= fb_max)
    nxt = nxt.reshape(-1, 2).astype(float)
    h, w = prev_u8.shape
    ok &= np.all(np.isfinite(nxt), axis=1)
    ok &= (nxt[:, 0] >= 0) & (nxt[:, 0] <= w - 1) & (nxt[:, 1] >= 0) & (nxt[:, 1] <= h - 1)
    err = err.reshape(-1)
    res = np.where(np.isfinite(err), err, 255.0).astype(float) / 255.0
    return nxt, ok, res


def lk_flow(
    prev: ImageGrid,
    next: ImageGrid,
    points,
    levels: int = DEFAULT_LEVELS,
    window: int = DEFAULT_WINDOW,
    iters: int = DEFAULT_ITERS,
    eps: float = DEFAULT_EPS,
    source_kind: SourceKind = SourceKind.FRAME,
    valid_mask: np.ndarray | None = None,
    fb_max: float | None = DEFAULT_FB_MAX,
    border: float | None = None,
) -> FlowSet:
    """Sparse flow from ``prev`` to ``next`` at ``points``; failed samples are dropped.

    ``valid_mask`` (optional, on ``next``) drops samples that land on invalid
    pixels, e.g. outside a stabilized frame's footprint. Samples starting or
    ending within ``border`` px of the image edge (default: half the window)
    are dropped too, since their window reads padding.
    """
    if prev.values.shape != next.values.shape:
        raise ValueError("grids must have the same size")
    dt = next.t - prev.t
    if not dt > 0:
        raise ValueError(f"grids must be time-ordered (dt={dt})")
    a, b = to_uint8(prev, next)
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    nxt, ok, res = lk_track_points(a, b, pts, levels, window, iters, eps, fb_max)
    m = window // 2 if border is None else border
    h, w = a.shape
    for q in (pts, nxt):
        ok &= (q[:, 0] >= m) & (q[:, 0] <= w - 1 - m) & (q[:, 1] >= m) & (q[:, 1] <= h - 1 - m)
    if valid_mask is not None and ok.any():
        ix = np.clip(np.rint(nxt[:, 0]).astype(int), 0, a.shape[1] - 1)
        iy = np.clip(np.rint(nxt[:, 1]).astype(int), 0, a.shape[0] - 1)
        ok &= valid_mask[iy, ix]
    p = pts[ok]
    return FlowSet(p, (nxt[ok] - p) / dt, np.exp(-res[ok]), dt, source_kind, 0.5 * (prev.t + next.t))
