"""Adaptive event windows by area event count.

The sensor is split into ``tile_rows x tile_cols`` regions; events are taken
until the count in any region exceeds ``threshold`` (strictly). The triggering
event closes the window and all counters reset. Events outside the sensor are
kept in the window but never counted.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numba
import numpy as np

from .core import CameraModel, Quat
from .stabilize import in_bounds


@dataclass
class EventWindow:
    events: np.ndarray  # structured (t, x, y, p), stabilized coordinates
    in_fov: np.ndarray  # bool mask
    t_start: float
    t_end: float
    q_ref: Quat = Quat()
    tile_rows: int = 26
    tile_cols: int = 34
    partial: bool = False
    index: int = 0
    saccade: bool = field(default=False)  # reference was reset right after this window

    def __post_init__(self):
        if self.events.shape[0] == 0:
            raise ValueError("an event window cannot be empty")

    def __len__(self) -> int:
        return self.events.shape[0]

    @property
    def duration(self) -> float:
        return self.t_end - self.t_start


@numba.njit(cache=True)
def _scan_counts(tiles, counts, threshold):
    for i in range(tiles.shape[0]):
        k = tiles[i]
        if k >= 0:
            counts[k] += 1
            if counts[k] > threshold:
                return i
    return -1


class AreaCounter:
    """Stateful per-tile counter; feed tile indices, get the closing position."""

    def __init__(self, tile_rows: int, tile_cols: int, threshold: int, c: CameraModel):
        if tile_rows < 1 or tile_cols < 1:
            raise ValueError("tile grid must be at least 1x1")
        if threshold < 1:
            raise ValueError("threshold must be >= 1")
        self.tile_rows = tile_rows
        self.tile_cols = tile_cols
        self.threshold = threshold
        self.camera = c
        self.counts = np.zeros(tile_rows * tile_cols, dtype=np.int64)

    def tiles_of(self, x, y, valid=None) -> np.ndarray:
        c = self.camera
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        ok = in_bounds(c, x, y) if valid is None else valid
        col = np.minimum((np.where(ok, x, 0.0) * self.tile_cols / c.width).astype(np.int64), self.tile_cols - 1)
        row = np.minimum((np.where(ok, y, 0.0) * self.tile_rows / c.height).astype(np.int64), self.tile_rows - 1)
        return np.where(ok, row * self.tile_cols + col, -1)

    def scan(self, tiles: np.ndarray) -> int:
        """Count ``tiles`` in order; return the index that closes the window or -1."""
        i = _scan_counts(np.ascontiguousarray(tiles, dtype=np.int64), self.counts, self.threshold)
        if i >= 0:
            self.counts[:] = 0
        return int(i)

    def reset(self) -> None:
        self.counts[:] = 0


def slice_by_area_count(
    events: np.ndarray,
    tile_rows: int,
    tile_cols: int,
    threshold: int,
    c: CameraModel,
    in_fov: np.ndarray | None = None,
    q_ref: Quat = Quat(),
) -> Iterator[EventWindow]:
    """Slice an already-stabilized event array into area-count windows.

    A trailing remainder is flushed as a window flagged ``partial``.
    """
    n = events.shape[0]
    if n == 0:
        return
    if in_fov is None:
        in_fov = in_bounds(c, events["x"], events["y"])
    counter = AreaCounter(tile_rows, tile_cols, threshold, c)
    tiles = counter.tiles_of(events["x"], events["y"], in_fov)
    start = 0
    idx = 0
    while start < n:
        j = counter.scan(tiles[start:])
        end = n if j < 0 else start + j + 1
        ev = events[start:end]
        yield EventWindow(
            ev, in_fov[start:end], float(ev["t"][0]), float(ev["t"][-1]), q_ref,
            tile_rows, tile_cols, partial=j < 0, index=idx,
        )
        idx += 1
        start = end


def slice_by_count(events: np.ndarray, n: int, c: CameraModel) -> Iterator[EventWindow]:
    """Fixed-count baseline."""
    fov = in_bounds(c, events["x"], events["y"])
    for i, s in enumerate(range(0, events.shape[0], n)):
        ev = events[s : s + n]
        yield EventWindow(ev, fov[s : s + n], float(ev["t"][0]), float(ev["t"][-1]),
                          partial=ev.shape[0] < n, index=i)


def slice_by_duration(events: np.ndarray, dt: float, c: CameraModel) -> Iterator[EventWindow]:
    """Fixed-duration baseline; empty intervals produce no window."""
    if events.shape[0] == 0:
        return
    fov = in_bounds(c, events["x"], events["y"])
    t0 = events["t"][0]
    bins = np.floor((events["t"] - t0) / dt).astype(np.int64)
    edges = np.flatnonzero(np.diff(bins)) + 1
    bounds = np.concatenate([[0], edges, [events.shape[0]]])
    for i, (s, e) in enumerate(zip(bounds[:-1], bounds[1:])):
        ev = events[s:e]
        yield EventWindow(ev, fov[s:e], float(ev["t"][0]), float(ev["t"][-1]), index=i)
