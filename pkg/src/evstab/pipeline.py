"""End-to-end pipelines: events or frames to velocity estimates and feature tracks.

Stabilized runs warp everything into the current reference orientation, solve
with ERL-V and rotate the estimate back into the camera frame at the middle
of the flow interval. Non-stabilized runs only undistort and solve for both
translation and rotation.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .attitude import AttitudeTrack, attitude_at, attitude_at_array
from .core import CameraModel, Quat, quat_to_rot, quats_to_rots
from .egomotion import SolverOptions, angle_deg, erl_full_solve, erlv_solve
from .errors import DegenerateWindow, EvstabError, NoTexture
from .flow import FlowSet, SourceKind, detect_corners, lk_flow
from .ingest import ImageGrid
from .representation import (
    DEFAULT_ALPHA,
    DEFAULT_CAP,
    DEFAULT_CMAX_TILES,
    DEFAULT_SIGMA,
    TAU0_ECD,
    TimeSurfaceState,
    maximize_contrast,
    render_iwe,
    render_time_surface,
)
from .stabilize import (
    StabilizerState,
    UndistortLut,
    build_undistort_lut,
    in_bounds,
    maybe_saccade,
    relative_quats,
    rotate_pixels,
    stabilize_frame,
    warp_frame,
)
from .track import FeatureTrack, TrackMetrics, compute_track_metrics, klt_track, propagate_gt_tracks
from .window import AreaCounter, EventWindow

GtFn = Callable[[float], tuple[np.ndarray, np.ndarray, float]]


@dataclass
class PipelineConfig:
    stabilize: bool = True
    representation: str = "iwe"  # iwe | ts | frame
    solver: str = ""  # erlv | erl; default follows ``stabilize``
    tile_rows: int = 26
    tile_cols: int = 34
    area_threshold: int = 200
    window_space: str = "stabilized"  # stabilized | raw
    sigma: float = DEFAULT_SIGMA
    cmax: bool = True
    cmax_tiles: tuple[int, int] = DEFAULT_CMAX_TILES
    cmax_cap: float = DEFAULT_CAP
    tau0: float = TAU0_ECD
    alpha: float = DEFAULT_ALPHA
    lk_levels: int = 3
    lk_window: int = 15
    max_corners: int = 500
    min_distance: float = 5.0
    saccade_px: float | None = None
    irls_rounds: int = 5
    min_speed: float = 0.01
    jobs: int = 1

    def __post_init__(self):
        if self.representation not in ("iwe", "ts", "frame"):
            raise ValueError(f"unknown representation {self.representation!r}")
        if self.window_space not in ("stabilized", "raw"):
            raise ValueError(f"unknown window space {self.window_space!r}")
        if self.solver not in ("", "erlv", "erl"):
            raise ValueError(f"unknown solver {self.solver!r}")

    @property
    def solver_name(self) -> str:
        return self.solver or ("erlv" if self.stabilize else "erl")


@dataclass
class VelocityRow:
    index: int
    t: float
    t0: float
    t1: float
    n_flow: int
    flow_px_median: float
    V_hat: np.ndarray
    V_gt: np.ndarray | None = None
    speed: float = math.nan
    error_deg: float = math.nan
    omega_hat: np.ndarray | None = None
    status: str = "ok"

    def as_row(self) -> dict:
        def vec(v):
            return [math.nan] * 3 if v is None else [float(x) for x in v]

        vh, vg = vec(self.V_hat), vec(self.V_gt)
        return {
            "index": self.index, "t": f"{self.t:.6f}", "t0": f"{self.t0:.6f}", "t1": f"{self.t1:.6f}",
            "n_flow": self.n_flow, "flow_px_median": f"{self.flow_px_median:.4f}",
            "vx": f"{vh[0]:.6f}", "vy": f"{vh[1]:.6f}", "vz": f"{vh[2]:.6f}",
            "gt_vx": f"{vg[0]:.6f}", "gt_vy": f"{vg[1]:.6f}", "gt_vz": f"{vg[2]:.6f}",
            "speed": f"{self.speed:.6f}", "angle_error_deg": f"{self.error_deg:.4f}", "status": self.status,
        }


VELOCITY_SCHEMA = ("index", "t", "t0", "t1", "n_flow", "flow_px_median", "vx", "vy", "vz",
                   "gt_vx", "gt_vy", "gt_vz", "speed", "angle_error_deg", "status")


@dataclass
class VelocityRun:
    rows: list[VelocityRow]
    flowsets: list[FlowSet] = field(default_factory=list)
    saccades: list[tuple[float, int]] = field(default_factory=list)
    n_windows: int = 0

    def mae(self, min_speed: float = 0.01) -> float:
        errs = [r.error_deg for r in self.rows if np.isfinite(r.error_deg) and r.speed >= min_speed]
        return float(np.mean(errs)) if errs else math.nan

    def median_flow_px(self) -> float:
        v = [r.flow_px_median for r in self.rows if np.isfinite(r.flow_px_median)]
        return float(np.median(v)) if v else math.nan


# --- windowing --------------------------------------------------------------


def stabilized_windows(
    events: np.ndarray,
    c: CameraModel,
    cfg: PipelineConfig,
    track: AttitudeTrack | None = None,
    lut: UndistortLut | None = None,
    chunk: int = 50_000,
    saccade_log: list | None = None,
) -> Iterator[EventWindow]:
    """Area-count windows over undistorted (and, if enabled, stabilized) events.

    The reference orientation can only change at window boundaries; events
    after a reset are re-stabilized against the new reference. A window
    followed by a reset carries ``saccade=True``.
    """
    n = events.shape[0]
    if n == 0:
        return
    if cfg.stabilize and track is None:
        raise ValueError("stabilization needs an attitude track")
    lut = lut or build_undistort_lut(c)
    ux, uy = lut.lookup(events["x"], events["y"])
    sx = np.empty(n)
    sy = np.empty(n)
    state = None
    if cfg.stabilize:
        q0 = attitude_at(track, float(events["t"][0]))
        state = StabilizerState.for_camera(c, q0, cfg.saccade_px)
    counter = AreaCounter(cfg.tile_rows, cfg.tile_cols, cfg.area_threshold, c)
    ready = 0  # events [0, ready) are stabilized against the current reference
    start = 0
    cursor = 0
    tiles = np.empty(n, dtype=np.int64)
    index = 0

    def fill(upto: int) -> None:
        nonlocal ready
        s = slice(ready, upto)
        if cfg.stabilize:
            R = quats_to_rots(relative_quats(state.q_ref, attitude_at_array(track, events["t"][s])))
            sx[s], sy[s] = rotate_pixels(ux[s], uy[s], R, c)
        else:
            sx[s], sy[s] = ux[s], uy[s]
        if cfg.window_space == "raw":
            tiles[s] = counter.tiles_of(ux[s], uy[s])
        else:
            tiles[s] = counter.tiles_of(sx[s], sy[s])
        ready = upto

    while start < n:
        if cursor >= ready:
            fill(min(n, ready + chunk))
        j = counter.scan(tiles[cursor:ready])
        if j < 0 and ready < n:
            cursor = ready
            continue
        end = ready if j < 0 else cursor + j + 1
        ev = events[start:end].copy()
        ev["x"], ev["y"] = sx[start:end], sy[start:end]
        w = EventWindow(ev, in_bounds(c, ev["x"], ev["y"]), float(ev["t"][0]), float(ev["t"][-1]),
                        state.q_ref if state else Quat(), cfg.tile_rows, cfg.tile_cols, partial=j < 0, index=index)
        if state is not None and end < n:
            if maybe_saccade(state, attitude_at(track, w.t_end), c) == "reset":
                w.saccade = True
                counter.reset()
                ready = end  # re-stabilize the rest against the new reference
                if saccade_log is not None:
                    saccade_log.append((w.t_end, state.saccade_count))
        yield w
        index += 1
        start = cursor = end


# --- representations --------------------------------------------------------


def _iwe_job(args):
    w, c, cfg = args
    try:
        theta = maximize_contrast(w, c, cfg.cmax_tiles, cfg.cmax_cap, cfg.sigma) if cfg.cmax else None
    except DegenerateWindow:
        return None
    return render_iwe(w, theta, cfg.sigma, c)


def window_representations(windows: Sequence[EventWindow], c: CameraModel, cfg: PipelineConfig) -> list:
    """One grid per window (None where the window is too sparse), time-stamped at t_end."""
    if cfg.representation == "ts":
        state = TimeSurfaceState.for_camera(c, cfg.tau0, cfg.alpha)
        out = []
        for w in windows:
            out.append(render_time_surface(w, state, c))
            if w.saccade:
                state.last_t[:] = -np.inf
        return out
    jobs = [(w, c, cfg) for w in windows]
    if cfg.jobs > 1:
        with ProcessPoolExecutor(cfg.jobs) as ex:
            return list(ex.map(_iwe_job, jobs, chunksize=4))
    return [_iwe_job(j) for j in jobs]


# --- flow + solve -----------------------------------------------------------


def pair_flow(a: ImageGrid, b: ImageGrid, cfg: PipelineConfig, kind: SourceKind) -> FlowSet:
    mask = None
    if a.mask is not None:
        mask = a.mask
    pts = detect_corners(a, cfg.max_corners, cfg.min_distance, mask=mask)
    return lk_flow(a, b, pts, cfg.lk_levels, cfg.lk_window, source_kind=kind, valid_mask=b.mask)


def _solve_job(args):
    i, a, b, cfg, c, kind = args
    try:
        fs = pair_flow(a, b, cfg, kind)
    except NoTexture as exc:
        return i, None, None, f"no-texture: {exc}"
    opts = SolverOptions(irls_rounds=cfg.irls_rounds)
    try:
        if cfg.solver_name == "erlv":
            est = erlv_solve(fs, c, opts)
            return i, fs, (est.V, None), "ok"
        est = erl_full_solve(fs, c, opts)
        return i, fs, (est.V, est.omega), "ok"
    except EvstabError as exc:
        return i, fs, None, f"{type(exc).__name__}: {exc}"


def _r_star(track: AttitudeTrack | None, q_ref: Quat | None, t: float) -> np.ndarray:
    if track is None or q_ref is None:
        return np.eye(3)
    q = relative_quats(q_ref, attitude_at(track, t).as_array()[None])[0]
    return quat_to_rot(Quat.from_array(q, normalize=True))


def solve_pairs(
    grids: Sequence[ImageGrid | None],
    breaks: set[int],
    refs: Sequence[Quat | None],
    c: CameraModel,
    cfg: PipelineConfig,
    kind: SourceKind,
    track: AttitudeTrack | None = None,
    gt: GtFn | None = None,
) -> tuple[list[VelocityRow], list[FlowSet]]:
    """Flow + solver on every consecutive pair; ``k in breaks`` skips pair (k, k+1)."""
    jobs = []
    for k in range(len(grids) - 1):
        a, b = grids[k], grids[k + 1]
        if a is None or b is None or k in breaks or not b.t > a.t:
            continue
        jobs.append((k, a, b, cfg, c, kind))
    if cfg.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(cfg.jobs) as ex:
            results = list(ex.map(_solve_job, jobs, chunksize=2))
    else:
        results = [_solve_job(j) for j in jobs]
    rows, flowsets = [], []
    for (k, a, b, *_), (_, fs, sol, status) in zip(jobs, results):
        t_mid = 0.5 * (a.t + b.t)
        n_flow = 0 if fs is None else len(fs)
        med = math.nan if fs is None or n_flow == 0 else float(np.median(np.linalg.norm(fs.flows, axis=1) * fs.dt))
        row = VelocityRow(k, t_mid, a.t, b.t, n_flow, med, None, status=status)
        if fs is not None:
            fs.meta.update(index=k)
            flowsets.append(fs)
        if sol is not None:
            V_ref, omega = sol
            R = _r_star(track, refs[k], t_mid) if cfg.stabilize else np.eye(3)
            row.V_hat = R.T @ V_ref
            row.omega_hat = omega
        if gt is not None:
            V, _, speed = gt(t_mid)
            row.V_gt, row.speed = V, speed
            if row.V_hat is not None and speed > 0:
                row.error_deg = angle_deg(row.V_hat, V)
        rows.append(row)
    return rows, flowsets


def run_event_velocity(
    events: np.ndarray,
    c: CameraModel,
    cfg: PipelineConfig,
    track: AttitudeTrack | None = None,
    gt: GtFn | None = None,
    lut: UndistortLut | None = None,
) -> VelocityRun:
    """stabilize -> window -> IWE/TS -> LK -> ERL-V (or the non-stabilized ERL baseline)."""
    saccades: list = []
    windows = list(stabilized_windows(events, c, cfg, track, lut, saccade_log=saccades))
    reps = window_representations(windows, c, cfg)
    for w, r in zip(windows, reps):
        if r is not None:
            r.t = w.t_end
    # a trailing partial window is a stub of the stream end; it is not paired
    breaks = {k for k, w in enumerate(windows) if w.saccade or (k + 1 < len(windows) and windows[k + 1].partial)}
    refs = [w.q_ref if cfg.stabilize else None for w in windows]
    kind = SourceKind.IWE if cfg.representation == "iwe" else SourceKind.TS
    rows, flowsets = solve_pairs(reps, breaks, refs, c, cfg, kind, track, gt)
    return VelocityRun(rows, flowsets, saccades, len(windows))


def stabilized_frames(
    frames: Sequence[ImageGrid], c: CameraModel, cfg: PipelineConfig, track: AttitudeTrack | None = None
) -> tuple[list[ImageGrid], list[Quat | None], set[int]]:
    """Warp frames into the reference view (or just undistort). Returns (grids, refs, breaks)."""
    out, refs, breaks = [], [], set()
    state = None
    for k, fr in enumerate(frames):
        if cfg.stabilize:
            q = attitude_at(track, fr.t)
            if state is None:
                state = StabilizerState.for_camera(c, q, cfg.saccade_px)
            elif maybe_saccade(state, q, c) == "reset":
                breaks.add(k - 1)
            out.append(stabilize_frame(fr, q, state, c))
            refs.append(state.q_ref)
        else:
            out.append(warp_frame(fr, np.eye(3), c) if c.has_distortion else fr)
            refs.append(None)
    return out, refs, breaks


def run_frame_velocity(
    frames: Sequence[ImageGrid],
    c: CameraModel,
    cfg: PipelineConfig,
    track: AttitudeTrack | None = None,
    gt: GtFn | None = None,
) -> VelocityRun:
    grids, refs, breaks = stabilized_frames(frames, c, cfg, track)
    rows, flowsets = solve_pairs(grids, breaks, refs, c, cfg, SourceKind.FRAME, track, gt)
    return VelocityRun(rows, flowsets, [], len(grids))


# --- tracking ---------------------------------------------------------------


HomographyFn = Callable[[float, float], np.ndarray]


def gt_tracks_for(
    est: Sequence[FeatureTrack],
    grids: Sequence[ImageGrid],
    rstars: Sequence[np.ndarray],
    homography: HomographyFn,
    c: CameraModel,
    breaks: set[int],
) -> list[FeatureTrack]:
    """Ground truth for each estimated track, from its birth grid to the end of its segment.

    ``homography(t_a, t_b)`` maps raw (undistorted) pixels between times; in
    stabilized mode ``rstars[k]`` is the rotation to the reference at grid k,
    and GT positions are ``S_k = H*_k H(t_b, t_k) H*_b^-1`` applied to the
    birth position.
    """
    times = [g.t for g in grids]
    seg_end = {}
    end = len(grids) - 1
    for k in range(len(grids) - 1, -1, -1):
        if k in breaks:
            end = k
        seg_end[k] = end
    by_birth: dict[int, list[FeatureTrack]] = {}
    index_of = {t: k for k, t in enumerate(times)}
    for tr in est:
        by_birth.setdefault(index_of[tr.times[0]], []).append(tr)
    K = c.K
    K_inv = c.K_inv
    gt: list[FeatureTrack] = []
    h, w = grids[0].values.shape
    for kb, group in sorted(by_birth.items()):
        ke = seg_end[kb]
        Hs_b_inv = np.linalg.inv(K @ rstars[kb] @ K_inv)
        Hs = []
        for k in range(kb, ke + 1):
            H = K @ rstars[k] @ K_inv @ homography(times[kb], times[k]) @ Hs_b_inv
            Hs.append(H / H[2, 2])
        init = np.array([tr.points[0] for tr in group])
        masks = [grids[k].mask for k in range(kb, ke + 1)]
        gt.extend(propagate_gt_tracks(Hs, init, times[kb : ke + 1], (h, w), [tr.id for tr in group], masks))
    return gt


@dataclass
class TrackingRun:
    metrics: TrackMetrics
    est: list[FeatureTrack]
    gt: list[FeatureTrack]
    restarts: int


def run_frame_tracking(
    frames: Sequence[ImageGrid],
    c: CameraModel,
    cfg: PipelineConfig,
    homography: HomographyFn,
    track: AttitudeTrack | None = None,
    tau_valid: float | None = None,
    normalization: str = "per-track",
    max_corners: int = 100,
    border: int = 4,
) -> TrackingRun:
    grids, refs, breaks = stabilized_frames(frames, c, cfg, track)
    return _track_grids(grids, refs, breaks, c, cfg, homography, track, tau_valid, normalization,
                        max_corners, border)


def run_event_tracking(
    events: np.ndarray,
    c: CameraModel,
    cfg: PipelineConfig,
    homography: HomographyFn,
    track: AttitudeTrack | None = None,
    tau_valid: float | None = None,
    normalization: str = "per-track",
    max_corners: int = 100,
    border: int = 4,
) -> TrackingRun:
    """KLT on window representations; GT evaluated at window end times."""
    windows = list(stabilized_windows(events, c, cfg, track))
    reps = window_representations(windows, c, cfg)
    grids, refs, breaks = [], [], set()
    for w, r in zip(windows, reps):
        if r is None:
            if grids:
                breaks.add(len(grids) - 1)
            continue
        r.t = w.t_end
        if w.saccade:
            breaks.add(len(grids))
        grids.append(r)
        refs.append(w.q_ref if cfg.stabilize else None)
    return _track_grids(grids, refs, breaks, c, cfg, homography, track, tau_valid, normalization,
                        max_corners, border)


def _track_grids(grids, refs, breaks, c, cfg, homography, track, tau_valid, normalization, max_corners, border):
    restarts = sorted(k + 1 for k in breaks if k + 1 < len(grids))
    est = klt_track(grids, None, restarts, max_corners=max_corners, min_distance=cfg.min_distance,
                    levels=cfg.lk_levels, window=cfg.lk_window, border=border)
    rstars = [_r_star(track, q, g.t) if cfg.stabilize else np.eye(3) for g, q in zip(grids, refs)]
    gt = gt_tracks_for(est, grids, rstars, homography, c, breaks)
    if tau_valid is None:
        tau_valid = float(np.median(np.diff([g.t for g in grids])))
    metrics = compute_track_metrics(est, gt, tau_valid, normalization)
    return TrackingRun(metrics, est, gt, len(restarts))
