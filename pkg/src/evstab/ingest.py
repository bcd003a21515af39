"""Readers and writers for the on-disk formats.

Text layouts follow the public Event Camera Dataset so real sequences can be
used unchanged:

* ``events.txt``      ``t x y p``, polarity 0/1 on disk and -1/+1 in memory
* ``calib.txt``       ``fx fy cx cy k1 k2 p1 p2 k3`` then ``width height``
* ``groundtruth.txt`` ``t px py pz qx qy qz qw`` (scalar-last on disk!)
* ``imu.txt``         ``t ax ay az gx gy gz``
* ``images.txt``      ``t relative/path.pgm``
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .core import EVENT_DTYPE, CameraModel, Quat, make_events
from .errors import (
    InvalidCalibration,
    IoError,
    NonMonotonicTimestamps,
    NonUnitQuaternion,
    ParseError,
    TruncatedFile,
    UnsupportedFormat,
)

MONOTONIC_SLACK = 1e-6


@dataclass(frozen=True)
class ImuSample:
    t: float
    accel: np.ndarray
    gyro: np.ndarray


@dataclass(frozen=True)
class PoseSample:
    t: float
    position: np.ndarray
    orientation: Quat


@dataclass
class ImageGrid:
    """Scalar field over the pixel lattice; ``values`` has shape (height, width)."""

    values: np.ndarray
    t: float = 0.0
    mask: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise ValueError("ImageGrid values must be 2-D")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("ImageGrid values must be finite")

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]


def _fmt(*vals) -> str:
    """Shortest round-tripping text for each value."""
    return " ".join(repr(float(v)) for v in vals)


def _open_text(path):
    try:
        return open(path, "r")
    except OSError as exc:
        raise IoError(f"cannot open {path}: {exc}") from exc


def _parse_table(path, ncols: int, what: str) -> np.ndarray:
    """Parse a whitespace table with exactly ``ncols`` numeric columns.

    Uses the fast loader and falls back to a line scan only to report the
    offending line number.
    """
    with _open_text(path) as f:
        text = f.read()
    lines = text.splitlines()
    # comments are allowed (ECD files carry none, but hand-written ones may)
    if not any(ln.strip() and not ln.lstrip().startswith("#") for ln in lines):
        return np.empty((0, ncols))
    try:
        data = np.loadtxt(io.StringIO(text), ndmin=2, comments="#", dtype=float)
        if data.shape[1] != ncols or not np.all(np.isfinite(data)):
            raise ValueError
        return data
    except ValueError:
        pass
    for i, ln in enumerate(lines, start=1):
        s = ln.split("#", 1)[0].strip()
        if not s:
            continue
        parts = s.split()
        if len(parts) != ncols:
            raise ParseError(f"expected {ncols} fields for {what}, got {len(parts)}", line=i, path=path)
        try:
            vals = [float(v) for v in parts]
        except ValueError:
            raise ParseError(f"non-numeric field in {what}: {s!r}", line=i, path=path) from None
        if not all(np.isfinite(vals)):
            raise ParseError(f"non-finite value in {what}", line=i, path=path)
    raise ParseError(f"malformed {what} file", path=path)


def _data_line_numbers(path) -> list[int]:
    with _open_text(path) as f:
        return [i for i, ln in enumerate(f, start=1) if ln.split("#", 1)[0].strip()]


def _check_monotonic(t: np.ndarray, path, slack: float = MONOTONIC_SLACK) -> None:
    if t.size < 2:
        return
    bad = np.nonzero(np.diff(t) < -slack)[0]
    if bad.size:
        line = _data_line_numbers(path)[bad[0] + 1]
        raise NonMonotonicTimestamps(
            f"timestamp {t[bad[0] + 1]:.9f} precedes {t[bad[0]]:.9f}", line=line, path=path
        )


def read_events(path) -> np.ndarray:
    """Read an ECD-style event file into a structured array (file order kept)."""
    data = _parse_table(path, 4, "event")
    if data.shape[0] == 0:
        return np.empty(0, dtype=EVENT_DTYPE)
    pol = data[:, 3]
    bad = np.nonzero((pol != 0) & (pol != 1))[0]
    if bad.size:
        line = _data_line_numbers(path)[bad[0]]
        raise ParseError(f"polarity must be 0 or 1, got {pol[bad[0]]}", line=line, path=path)
    _check_monotonic(data[:, 0], path)
    return make_events(data[:, 0], data[:, 1], data[:, 2], np.where(pol > 0, 1, -1).astype(np.int8))


def iter_events(path, chunk_size: int = 100_000) -> Iterator[np.ndarray]:
    """Yield the event file in order as chunks of a structured array."""
    ev = read_events(path)
    for s in range(0, ev.shape[0], chunk_size):
        yield ev[s : s + chunk_size]


def write_events(events: np.ndarray, path, decimals: int | None = None) -> None:
    """Write events as ``t x y p``; integer coordinates are written as integers."""
    x, y = events["x"], events["y"]
    integral = decimals is None and np.all(x == np.round(x)) and np.all(y == np.round(y))
    pol = (events["p"] > 0).astype(int)
    try:
        with open(path, "w") as f:
            if integral:
                for t, xi, yi, pi in zip(events["t"], x.astype(int), y.astype(int), pol):
                    f.write(f"{t:.9f} {xi} {yi} {pi}\n")
            else:
                d = 4 if decimals is None else decimals
                for t, xi, yi, pi in zip(events["t"], x, y, pol):
                    f.write(f"{t:.9f} {xi:.{d}f} {yi:.{d}f} {pi}\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_calib(path) -> CameraModel:
    with _open_text(path) as f:
        rows = [(i, ln.split()) for i, ln in enumerate(f, start=1) if ln.strip()]
    if len(rows) < 2:
        raise ParseError("calibration needs an intrinsics line and a size line", path=path)
    (l1, intr), (l2, size) = rows[0], rows[1]
    if len(intr) != 9:
        raise ParseError(f"expected 9 intrinsic values, got {len(intr)}", line=l1, path=path)
    if len(size) != 2:
        raise ParseError(f"expected 'width height', got {len(size)} fields", line=l2, path=path)
    try:
        fx, fy, cx, cy, k1, k2, p1, p2, k3 = (float(v) for v in intr)
    except ValueError:
        raise ParseError("non-numeric intrinsics", line=l1, path=path) from None
    try:
        w, h = (int(v) for v in size)
    except ValueError:
        raise ParseError("non-integer sensor size", line=l2, path=path) from None
    if fx <= 0 or fy <= 0:
        raise InvalidCalibration(f"{path}: focal lengths must be positive")
    return CameraModel(fx, fy, cx, cy, w, h, k1, k2, p1, p2, k3)


def write_calib(c: CameraModel, path) -> None:
    try:
        with open(path, "w") as f:
            f.write(
                _fmt(c.fx, c.fy, c.cx, c.cy, c.k1, c.k2, c.p1, c.p2, c.k3) + "\n"
                f"{c.width} {c.height}\n"
            )
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_poses(path) -> list[PoseSample]:
    data = _parse_table(path, 8, "pose")
    _check_monotonic(data[:, 0], path, slack=0.0)
    lines = _data_line_numbers(path) if data.shape[0] else []
    poses = []
    for i, row in enumerate(data):
        try:
            q = Quat(row[7], row[4], row[5], row[6])
        except NonUnitQuaternion as exc:
            raise ParseError(f"non-unit quaternion: {exc}", line=lines[i], path=path) from None
        poses.append(PoseSample(float(row[0]), row[1:4].copy(), q))
    return poses


def write_poses(poses: Sequence[PoseSample], path) -> None:
    try:
        with open(path, "w") as f:
            for p in poses:
                q = p.orientation
                f.write(_fmt(p.t, *p.position, q.x, q.y, q.z, q.w) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_imu(path) -> list[ImuSample]:
    data = _parse_table(path, 7, "IMU")
    _check_monotonic(data[:, 0], path, slack=0.0)
    return [ImuSample(float(r[0]), r[1:4].copy(), r[4:7].copy()) for r in data]


def write_imu(samples: Sequence[ImuSample], path) -> None:
    try:
        with open(path, "w") as f:
            for s in samples:
                a, g = s.accel, s.gyro
                f.write(_fmt(s.t, *a, *g) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


# --- PGM --------------------------------------------------------------------


def _pgm_tokens(buf: bytes, count: int, pos: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens = []
    n = len(buf)
    while len(tokens) < count:
        while pos < n and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos : pos + 1] == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        if pos >= n:
            raise TruncatedFile("PGM header ended early")
        start = pos
        while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        tokens.append(buf[start:pos])
    return tokens, pos


def read_pgm(path, t: float = 0.0) -> ImageGrid:
    """Read a P2 (ASCII) or P5 (binary) graymap; values scaled to [0, 1]."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    magic = buf[:2]
    if magic not in (b"P2", b"P5"):
        raise UnsupportedFormat(f"{path}: unsupported magic {magic!r}")
    (w, h, maxval), pos = _pgm_tokens(buf, 3, 2)
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise UnsupportedFormat(f"{path}: malformed header") from None
    if maxval not in (255, 65535) or w <= 0 or h <= 0:
        raise UnsupportedFormat(f"{path}: maxval must be 255 or 65535, got {maxval}")
    npx = w * h
    if magic == b"P5":
        pos += 1  # single whitespace byte after maxval
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        raw = buf[pos : pos + npx * dtype.itemsize]
        if len(raw) < npx * dtype.itemsize:
            raise TruncatedFile(f"{path}: expected {npx} samples")
        vals = np.frombuffer(raw, dtype=dtype).astype(float)
    else:
        body = buf[pos:].split()
        if len(body) < npx:
            raise TruncatedFile(f"{path}: expected {npx} samples, got {len(body)}")
        vals = np.array(body[:npx], dtype=float)
    return ImageGrid(vals.reshape(h, w) / maxval, t=t)


def write_pgm(grid: ImageGrid, path, maxval: int = 255, binary: bool = True) -> None:
    """Write values (clipped to [0, 1]) quantized to ``maxval``."""
    if maxval not in (255, 65535):
        raise UnsupportedFormat("maxval must be 255 or 65535")
    q = np.round(np.clip(grid.values, 0.0, 1.0) * maxval)
    h, w = q.shape
    try:
        with open(path, "wb") as f:
            if binary:
                f.write(f"P5\n{w} {h}\n{maxval}\n".encode())
                f.write(q.astype(">u2" if maxval > 255 else "u1").tobytes())
            else:
                f.write(f"P2\n{w} {h}\n{maxval}\n".encode())
                for row in q.astype(int):
                    f.write((" ".join(map(str, row)) + "\n").encode())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_image_list(path) -> list[tuple[float, Path]]:
    """Parse ``images.txt`` into (t, absolute path) pairs."""
    base = Path(path).parent
    out = []
    with _open_text(path) as f:
        for i, ln in enumerate(f, start=1):
            s = ln.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            if len(parts) != 2:
                raise ParseError("expected 't path'", line=i, path=path)
            try:
                t = float(parts[0])
            except ValueError:
                raise ParseError("non-numeric timestamp", line=i, path=path) from None
            out.append((t, base / parts[1]))
    ts = np.array([t for t, _ in out])
    _check_monotonic(ts, path, slack=0.0)
    return out


# --- CSV reports ------------------------------------------------------------


def write_csv_report(rows, schema: Sequence[str], path) -> None:
    """Write dict-like rows with a header from ``schema`` (RFC 4180 quoting).

    Keys missing from a row are written as empty fields; extra keys are an
    error so schema drift is caught early.
    """
    try:
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(schema), lineterminator="\r\n", extrasaction="raise")
            w.writeheader()
            for r in rows:
                w.writerow(r)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_csv_report(path) -> list[dict[str, str]]:
    try:
        with open(path, newline="") as f:
            return list(csv.DictReader(f))
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc


def ensure_dir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {p}: {exc}") from exc
    if not os.access(p, os.W_OK):
        raise IoError(f"{p} is not writable")
    return p
