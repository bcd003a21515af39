"""Image-like event representations.

* Image of Warped Events (IWE): every in-FOV event is moved along a per-tile
  flow field to the window's end time and splatted as a normalized Gaussian.
* Contrast maximization picks the flow field that maximizes IWE variance.
* Time surface: exponential decay of the last event time per pixel, with the
  decay constant low-pass filtered over window durations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.optimize import minimize

from .core import CameraModel
from .errors import DegenerateWindow
from .ingest import ImageGrid
from .window import EventWindow

DEFAULT_SIGMA = 1.0
DEFAULT_CAP = 5000.0
DEFAULT_CMAX_TILES = (3, 4)
TAU0_ECD = 0.035
TAU0_MVSEC = 0.100
DEFAULT_ALPHA = 0.3
MIN_CMAX_EVENTS = 10


@dataclass
class WarpParams:
    """Per-tile flow (px/s), shape (rows, cols, 2), interpolated bilinearly between tile centers."""

    theta: np.ndarray
    width: int
    height: int
    cap: float = DEFAULT_CAP

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        if self.theta.ndim != 3 or self.theta.shape[2] != 2:
            raise ValueError("theta must have shape (rows, cols, 2)")
        if not np.all(np.isfinite(self.theta)):
            raise ValueError("theta must be finite")
        mag = np.linalg.norm(self.theta, axis=2)
        if np.any(mag > self.cap * (1 + 1e-9)):
            raise ValueError(f"flow magnitude {mag.max():.1f} exceeds cap {self.cap}")

    @classmethod
    def zeros(cls, c: CameraModel, tiles=DEFAULT_CMAX_TILES, cap: float = DEFAULT_CAP) -> "WarpParams":
        return cls(np.zeros((tiles[0], tiles[1], 2)), c.width, c.height, cap)

    @classmethod
    def uniform(cls, c: CameraModel, flow, tiles=DEFAULT_CMAX_TILES, cap: float = DEFAULT_CAP):
        th = np.zeros((tiles[0], tiles[1], 2))
        th[:, :] = flow
        return cls(th, c.width, c.height, cap)

    @property
    def rows(self) -> int:
        return self.theta.shape[0]

    @property
    def cols(self) -> int:
        return self.theta.shape[1]

    def flow_at(self, x, y) -> tuple[np.ndarray, np.ndarray]:
        """Bilinear interpolation between tile centers, constant beyond the outer centers."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if self.rows == 1 and self.cols == 1:
            return np.full(x.shape, self.theta[0, 0, 0]), np.full(x.shape, self.theta[0, 0, 1])
        gx = np.clip(x * self.cols / self.width - 0.5, 0.0, self.cols - 1.0)
        gy = np.clip(y * self.rows / self.height - 0.5, 0.0, self.rows - 1.0)
        x0 = np.minimum(np.floor(gx).astype(np.intp), max(self.cols - 2, 0))
        y0 = np.minimum(np.floor(gy).astype(np.intp), max(self.rows - 2, 0))
        x1 = np.minimum(x0 + 1, self.cols - 1)
        y1 = np.minimum(y0 + 1, self.rows - 1)
        fx = gx - x0
        fy = gy - y0
        th = self.theta
        out = []
        for k in range(2):
            top = th[y0, x0, k] * (1 - fx) + th[y0, x1, k] * fx
            bot = th[y1, x0, k] * (1 - fx) + th[y1, x1, k] * fx
            out.append(top * (1 - fy) + bot * fy)
        return out[0], out[1]


@numba.njit(cache=True)
def _splat(xs, ys, sigma, out, ox, oy):
    """Add a unit-mass Gaussian per point into ``out``; (ox, oy) is out's origin.

    The kernel is truncated to a 3-sigma disc and renormalized; the exponent
    separates, so each point costs one exp per row and per column.
    """
    h, w = out.shape
    rad = 3.0 * sigma
    r2max = rad * rad
    inv2s2 = 1.0 / (2.0 * sigma * sigma)
    n = int(2.0 * rad) + 2
    gx = np.empty(n)
    gy = np.empty(n)
    for k in range(xs.shape[0]):
        cx = xs[k] - ox
        cy = ys[k] - oy
        x0 = int(math.ceil(cx - rad))
        x1 = int(math.floor(cx + rad))
        y0 = int(math.ceil(cy - rad))
        y1 = int(math.floor(cy + rad))
        for ix in range(x0, x1 + 1):
            dx = ix - cx
            gx[ix - x0] = math.exp(-dx * dx * inv2s2)
        for iy in range(y0, y1 + 1):
            dy = iy - cy
            gy[iy - y0] = math.exp(-dy * dy * inv2s2)
        total = 0.0
        for iy in range(y0, y1 + 1):
            dy = iy - cy
            for ix in range(x0, x1 + 1):
                dx = ix - cx
                if dx * dx + dy * dy <= r2max:
                    total += gy[iy - y0] * gx[ix - x0]
        if total <= 0.0:
            continue
        norm = 1.0 / total
        for iy in range(max(y0, 0), min(y1, h - 1) + 1):
            dy = iy - cy
            for ix in range(max(x0, 0), min(x1, w - 1) + 1):
                dx = ix - cx
                if dx * dx + dy * dy <= r2max:
                    out[iy, ix] += gy[iy - y0] * gx[ix - x0] * norm


SEARCH_PHASES = 32  # sub-pixel positions tabulated for the search kernel
SEARCH_SCALE = 1.5  # cubic B-spline stretch; std ~0.87 px
SEARCH_TAPS = 6  # taps per axis at that stretch


def _bspline3(t: np.ndarray) -> np.ndarray:
    t = np.abs(t)
    return np.where(t < 1, 2 / 3 - t**2 + t**3 / 2, np.where(t < 2, (2 - t) ** 3 / 6, 0.0))


def search_kernel_table(phases: int = SEARCH_PHASES) -> tuple[np.ndarray, int]:
    """Unit-sum 1-D kernel weights per sub-pixel phase, and the first tap's offset.

    Row ``b`` is the kernel centred ``b / phases`` px right of ``floor(x)``.
    A stretched cubic B-spline is smooth and compact, so the summed squares
    (the variance an isolated event adds) vary by under 0.5% with phase.
    """
    lo = 1 - SEARCH_TAPS // 2
    k = np.arange(lo, lo + SEARCH_TAPS, dtype=float)
    f = np.arange(phases + 1, dtype=float)[:, None] / phases
    g = _bspline3((k[None, :] - f) / SEARCH_SCALE)
    return g / g.sum(axis=1, keepdims=True), lo


@numba.njit(cache=True, fastmath=True)
def _warped_variance(xs, ys, dts, vx, vy, buf, table, lo, ox, oy):
    """Variance of the image of events warped by a constant flow (vx, vy).

    This is the search objective. Each event is spread with a separable
    kernel looked up by sub-pixel phase, which keeps the objective free of
    the pixel-grid bias a bilinear vote would have.
    """
    h, w = buf.shape
    phases = table.shape[0] - 1
    buf[:, :] = 0.0
    for k in range(xs.shape[0]):
        x = xs[k] + vx * dts[k] - ox
        y = ys[k] + vy * dts[k] - oy
        if not (x > -SEARCH_TAPS and y > -SEARCH_TAPS and x < w + SEARCH_TAPS and y < h + SEARCH_TAPS):
            continue
        x0 = int(math.floor(x))
        y0 = int(math.floor(y))
        bx = int((x - x0) * phases + 0.5)
        by = int((y - y0) * phases + 0.5)
        ix0 = x0 + lo
        iy0 = y0 + lo
        if ix0 >= 0 and iy0 >= 0 and ix0 + SEARCH_TAPS <= w and iy0 + SEARCH_TAPS <= h:
            for a in range(SEARCH_TAPS):
                wy = table[by, a]
                row = buf[iy0 + a]
                for b in range(SEARCH_TAPS):
                    row[ix0 + b] += wy * table[bx, b]
        else:
            for a in range(SEARCH_TAPS):
                iy = iy0 + a
                if iy < 0 or iy >= h:
                    continue
                wy = table[by, a]
                for b in range(SEARCH_TAPS):
                    ix = ix0 + b
                    if ix >= 0 and ix < w:
                        buf[iy, ix] += wy * table[bx, b]
    s1 = 0.0
    s2 = 0.0
    for i in range(h):
        for j in range(w):
            v = buf[i, j]
            s1 += v
            s2 += v * v
    n = h * w
    m = s1 / n
    return s2 / n - m * m


def splat_gaussians(xs, ys, shape, sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    out = np.zeros(shape)
    _splat(np.ascontiguousarray(xs, dtype=float), np.ascontiguousarray(ys, dtype=float), float(sigma), out, 0.0, 0.0)
    return out


def warp_events(w: EventWindow, theta: WarpParams | None) -> tuple[np.ndarray, np.ndarray]:
    """Warped (x, y) of the window's in-FOV events at t_end."""
    ev = w.events[w.in_fov]
    x, y = ev["x"], ev["y"]
    if theta is None:
        return x.copy(), y.copy()
    dt = w.t_end - ev["t"]
    vx, vy = theta.flow_at(x, y)
    return x + vx * dt, y + vy * dt


def render_iwe(w: EventWindow, theta: WarpParams | None, sigma: float, c: CameraModel) -> ImageGrid:
    """Image of warped events at the window's end time; polarity is ignored."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    xs, ys = warp_events(w, theta)
    return ImageGrid(splat_gaussians(xs, ys, (c.height, c.width), sigma), t=w.t_end)


def iwe_variance(w: EventWindow, theta: WarpParams | None, sigma: float, c: CameraModel) -> float:
    return float(render_iwe(w, theta, sigma, c).values.var())


def _tile_bounds(r, cidx, rows, cols, c: CameraModel):
    x0 = cidx * c.width / cols
    x1 = (cidx + 1) * c.width / cols
    y0 = r * c.height / rows
    y1 = (r + 1) * c.height / rows
    return x0, x1, y0, y1


def _optimize_tile(xs, ys, dts, box, span, budget, cap, tol_v):
    """Grid search then Nelder-Mead on a single tile's events; returns (vx, vy)."""
    ox, oy, bw, bh = box
    buf = np.zeros((bh, bw))
    table, lo = search_kernel_table()

    def negvar(v):
        if v[0] * v[0] + v[1] * v[1] > cap * cap:
            return 0.0
        return -_warped_variance(xs, ys, dts, float(v[0]), float(v[1]), buf, table, lo, ox, oy)

    grid = np.linspace(-span, span, 9)
    best, best_f = np.zeros(2), negvar(np.zeros(2))
    for gx in grid:
        for gy in grid:
            v = np.array([gx, gy])
            f = negvar(v)
            if f < best_f:
                best, best_f = v, f
    remaining = budget - 82
    if remaining > 3:
        h = grid[1] - grid[0]
        simplex = np.array([best, best + [0.5 * h, 0.0], best + [0.0, 0.5 * h]])
        res = minimize(
            negvar, best, method="Nelder-Mead",
            options=dict(maxfev=remaining, xatol=tol_v, fatol=1e-15, initial_simplex=simplex),
        )
        if res.fun < best_f:
            best, best_f = res.x, res.fun
    return best


def maximize_contrast(
    w: EventWindow,
    c: CameraModel,
    tiles=DEFAULT_CMAX_TILES,
    cap: float = DEFAULT_CAP,
    sigma: float = DEFAULT_SIGMA,
    budget: int = 200,
    max_shift_px: float = 8.0,
    margin_px: int = 8,
    max_tile_events: int = 1200,
) -> WarpParams:
    """Per-tile translational flow that sharpens the IWE.

    Each tile is optimized on its own events over a padded patch. The search
    grid spans +-min(cap, max_shift_px / duration) so grid points stay within
    a few pixels of displacement. Tiles with too few events keep zero flow.
    The per-tile search scores candidates with a fixed smooth kernel (see
    ``_warped_variance``) on at most ``max_tile_events`` events, evenly
    strided in time; ``sigma`` sets the IWE used for the final check.
    If the assembled field does not beat zero flow on the whole-image
    variance, zero flow is returned, so the result is never worse than no warp.
    """
    nfov = int(np.count_nonzero(w.in_fov))
    if nfov < MIN_CMAX_EVENTS:
        raise DegenerateWindow(f"window has {nfov} in-FOV events; need {MIN_CMAX_EVENTS}")
    rows, cols = tiles
    ev = w.events[w.in_fov]
    xs_all = np.ascontiguousarray(ev["x"])
    ys_all = np.ascontiguousarray(ev["y"])
    dts_all = w.t_end - ev["t"]
    duration = max(w.t_end - w.t_start, 1e-6)
    span = min(cap, max_shift_px / duration) / math.sqrt(2.0)
    tol_v = 0.01 / duration

    theta = np.zeros((rows, cols, 2))
    col_idx = np.minimum((xs_all * cols / c.width).astype(int), cols - 1)
    row_idx = np.minimum((ys_all * rows / c.height).astype(int), rows - 1)
    for r in range(rows):
        for k in range(cols):
            sel = np.flatnonzero((row_idx == r) & (col_idx == k))
            if sel.size < MIN_CMAX_EVENTS:
                continue
            if sel.size > max_tile_events:
                sel = sel[np.linspace(0, sel.size - 1, max_tile_events).astype(np.intp)]
            x0, x1, y0, y1 = _tile_bounds(r, k, rows, cols, c)
            ox = max(int(math.floor(x0)) - margin_px, 0)
            oy = max(int(math.floor(y0)) - margin_px, 0)
            bw = min(int(math.ceil(x1)) + margin_px, c.width) - ox
            bh = min(int(math.ceil(y1)) + margin_px, c.height) - oy
            theta[r, k] = _optimize_tile(
                xs_all[sel], ys_all[sel], dts_all[sel], (float(ox), float(oy), bw, bh),
                span, budget, cap, tol_v,
            )
    field = WarpParams(theta, c.width, c.height, cap)
    zero = WarpParams.zeros(c, tiles, cap)
    if iwe_variance(w, field, sigma, c) < iwe_variance(w, zero, sigma, c):
        return zero
    return field


@dataclass
class TimeSurfaceState:
    """Decay constant and per-pixel last event time, persisted across windows."""

    tau: float
    alpha: float = DEFAULT_ALPHA
    last_t: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("alpha must be in [0, 1)")

    @classmethod
    def for_camera(cls, c: CameraModel, tau0: float = TAU0_ECD, alpha: float = DEFAULT_ALPHA):
        return cls(tau0, alpha, np.full((c.height, c.width), -np.inf))

    def update_tau(self, dt: float) -> float:
        self.tau = (1.0 - self.alpha) * dt + self.alpha * self.tau
        return self.tau


def render_time_surface(w: EventWindow, state: TimeSurfaceState, c: CameraModel | None = None) -> ImageGrid:
    """Update tau from the window span, stamp the window's events, and render."""
    if state.last_t is None:
        if c is None:
            raise ValueError("state has no grid; pass the camera or use TimeSurfaceState.for_camera")
        state.last_t = np.full((c.height, c.width), -np.inf)
    h, wd = state.last_t.shape
    state.update_tau(w.t_end - w.t_start)
    ev = w.events[w.in_fov]
    ix = np.rint(ev["x"]).astype(np.intp)
    iy = np.rint(ev["y"]).astype(np.intp)
    ok = (ix >= 0) & (ix < wd) & (iy >= 0) & (iy < h)
    np.maximum.at(state.last_t, (iy[ok], ix[ok]), ev["t"][ok])
    with np.errstate(invalid="ignore", over="ignore"):
        vals = np.exp(-(w.t_end - state.last_t) / state.tau)
    vals[~np.isfinite(state.last_t)] = 0.0
    return ImageGrid(vals, t=w.t_end)
