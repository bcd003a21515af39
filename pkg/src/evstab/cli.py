"""Command-line front end: ``evstab simulate|stabilize|velocity|track|eval``.

Option precedence, lowest to highest: built-in defaults, ``--config FILE``
(``key = value`` lines, keys are long option names), explicit flags.
Every run writes ``manifest.json`` next to its outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .attitude import from_poses, fuse_imu
from .core import CameraModel, Quat
from .egomotion import SolverOptions, erl_full_solve, erlv_solve, motion_field
from .errors import ConfigError, EvstabError, InputMismatch, IoError
from .flow import FlowSet, SourceKind
from .ingest import (
    ensure_dir,
    read_calib,
    read_csv_report,
    read_events,
    read_image_list,
    read_imu,
    read_pgm,
    read_poses,
    write_csv_report,
    write_events,
    write_pgm,
)
from .pipeline import (
    VELOCITY_SCHEMA,
    PipelineConfig,
    run_event_tracking,
    run_event_velocity,
    run_frame_tracking,
    run_frame_velocity,
    stabilized_windows,
)
from .representation import maximize_contrast, render_iwe
from .sim import (
    PRESETS,
    SCENES,
    SimConfig,
    build_scene,
    build_trajectory,
    export_sequence,
    gt_velocity,
    load_sequence_config,
    plane_homography,
    simulate,
)

TRACK_SCHEMA = ("sequence", "mode", "stabilize", "TE", "TTE", "ETE", "NFA", "TFA", "n_valid", "restarts")
EVAL_SCHEMA = ("metric", "a", "b", "delta", "improvement_pct")
SACCADE_SCHEMA = ("t", "reset_count")
EVAL_MIN_SOLVES = 50


# --- config handling --------------------------------------------------------


def read_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoError(f"cannot read config {path}: {exc}") from exc
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.lstrip("-").replace("-", "_")] = v
    return out


def _apply_config(parser: argparse.ArgumentParser, values: dict[str, str]) -> None:
    """Install config-file values as parser defaults (so flags still win)."""
    actions = {a.dest: a for a in parser._actions}
    for key, raw in values.items():
        act = actions.get(key)
        if act is None or key in ("help", "config", "command"):
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(act, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            val = raw.lower() in ("1", "true", "yes", "on")
        elif act.type is not None:
            try:
                val = act.type(raw)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key}: {raw!r}") from exc
        else:
            val = raw
        if act.choices is not None and val not in act.choices:
            raise ConfigError(f"bad value for {key}: {raw!r} (choose from {', '.join(map(str, act.choices))})")
        parser.set_defaults(**{key: val})


def _tiles(s: str) -> tuple[int, int]:
    try:
        r, c = (int(v) for v in s.lower().split("x"))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected RxC, got {s!r}") from exc
    if r < 1 or c < 1:
        raise argparse.ArgumentTypeError("tile counts must be >= 1")
    return r, c


def _on_off(s: str) -> bool:
    if s not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return s == "on"


def _quat(s: str) -> Quat:
    try:
        return Quat.from_array([float(v) for v in s.split(",")], normalize=True)
    except (ValueError, IndexError, EvstabError) as exc:
        raise argparse.ArgumentTypeError(f"expected w,x,y,z, got {s!r}") from exc


def sha256_file(path) -> str:
    h = hashlib.sha256()
    try:
        with open(path, "rb") as f:
            for block in iter(lambda: f.read(1 << 20), b""):
                h.update(block)
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    return h.hexdigest()


def write_manifest(out_dir: Path, args: argparse.Namespace, inputs: dict[str, Path], seed, extra=None) -> Path:
    def plain(v):
        if isinstance(v, Quat):
            return v.as_array().tolist()
        return list(v) if isinstance(v, tuple) else v

    config = {k: plain(v) for k, v in sorted(vars(args).items()) if k != "func"}
    manifest = {
        "tool": "evstab",
        "version": __version__,
        "command": args.command,
        "config": config,
        "seed": seed,
        "inputs": {name: {"path": str(p), "sha256": sha256_file(p)} for name, p in sorted(inputs.items())},
    }
    if extra:
        manifest.update(extra)
    path = out_dir / "manifest.json"
    try:
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    return path


# --- shared input loading ---------------------------------------------------


class Inputs:
    """Resolved input files for a run, from ``--sequence`` and/or explicit paths."""

    NAMES = ("events", "calib", "poses", "imu", "images", "sequence_json")

    def __init__(self, args: argparse.Namespace):
        seq = Path(args.sequence) if getattr(args, "sequence", None) else None
        defaults = {"events": "events.txt", "calib": "calib.txt", "poses": "groundtruth.txt", "imu": "imu.txt",
                    "images": "images.txt", "sequence_json": "sequence.json"}
        self.paths: dict[str, Path] = {}
        for name in self.NAMES:
            explicit = getattr(args, name, None)
            if explicit:
                self.paths[name] = Path(explicit)
            elif seq is not None and (seq / defaults[name]).exists():
                self.paths[name] = seq / defaults[name]

    def require(self, name: str) -> Path:
        p = self.paths.get(name)
        if p is None:
            raise IoError(f"missing input: --{name.replace('_', '-')} (or a --sequence directory containing it)")
        if not p.exists():
            raise IoError(f"{p} does not exist")
        return p

    def used(self, *names) -> dict[str, Path]:
        return {n: self.paths[n] for n in names if n in self.paths}

    def camera(self) -> CameraModel:
        return read_calib(self.require("calib"))

    def attitude(self, source: str, q_o: Quat = Quat()):
        if source == "imu":
            return fuse_imu(read_imu(self.require("imu")), q_o=q_o)
        return from_poses(read_poses(self.require("poses")), q_o)

    def frames(self):
        lst = self.require("images")
        return [read_pgm(p, t) for t, p in read_image_list(lst)]

    def sim_config(self) -> SimConfig | None:
        p = self.paths.get("sequence_json")
        return load_sequence_config(p) if p is not None and p.exists() else None


def _add_inputs(p: argparse.ArgumentParser, frames: bool = True) -> None:
    g = p.add_argument_group("inputs")
    g.add_argument("--sequence", help="directory written by `evstab simulate` (or in the same layout)")
    g.add_argument("--events", help="events file (t x y p)")
    g.add_argument("--calib", help="calibration file")
    g.add_argument("--poses", help="pose file (t px py pz qx qy qz qw)")
    g.add_argument("--imu", help="IMU file (t ax ay az gx gy gz)")
    if frames:
        g.add_argument("--images", help="image list (t path)")
    g.add_argument("--attitude", choices=("gt", "imu"), default="gt",
                   help="orientation source: ground-truth poses or IMU fusion")
    g.add_argument("--q-o", type=_quat, default=Quat(), metavar="W,X,Y,Z",
                   help="IMU-to-camera rotation (default identity)")


def _add_pipeline(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("pipeline")
    g.add_argument("--mode", choices=("events", "frames"), default="events")
    g.add_argument("--stabilize", type=_on_off, default=True, metavar="on|off")
    g.add_argument("--representation", choices=("iwe", "ts", "frame"), default="iwe")
    g.add_argument("--solver", choices=("erlv", "erl"), default=None,
                   help="default: erlv when stabilized, erl otherwise")
    g.add_argument("--irls-rounds", type=int, default=5)
    g.add_argument("--min-speed-floor", type=float, default=0.01,
                   help="samples slower than this (m/s) are left out of the MAE")
    g.add_argument("--tiles", type=_tiles, default=(26, 34), metavar="RxC")
    g.add_argument("--area-threshold", type=int, default=200)
    g.add_argument("--window-space", choices=("raw", "stabilized"), default="stabilized")
    g.add_argument("--sigma", type=float, default=1.0)
    g.add_argument("--no-cmax", action="store_true", help="render IWEs without contrast maximization")
    g.add_argument("--cmax-tiles", type=_tiles, default=(3, 4), metavar="RxC")
    g.add_argument("--cmax-cap", type=float, default=5000.0)
    g.add_argument("--tau0", type=float, default=0.035)
    g.add_argument("--alpha", type=float, default=0.3)
    g.add_argument("--lk-levels", type=int, default=3, help="pyramid reductions above full resolution")
    g.add_argument("--lk-window", type=int, default=15)
    g.add_argument("--max-corners", type=int, default=500)
    g.add_argument("--saccade-threshold", type=float, default=None,
                   help="saccade threshold in px (default: width / 6)")
    g.add_argument("--jobs", type=int, default=1)
    g.add_argument("--seed", type=int, default=0, help="recorded in the manifest when the input has no seed")


def pipeline_config(args: argparse.Namespace) -> PipelineConfig:
    rep = args.representation
    if args.mode == "frames":
        rep = "frame"
    elif rep == "frame":
        raise ConfigError("representation=frame needs --mode frames")
    return PipelineConfig(
        stabilize=args.stabilize, representation=rep, solver=args.solver or "",
        tile_rows=args.tiles[0], tile_cols=args.tiles[1], area_threshold=args.area_threshold,
        window_space=args.window_space, sigma=args.sigma, cmax=not args.no_cmax, cmax_tiles=args.cmax_tiles,
        cmax_cap=args.cmax_cap, tau0=args.tau0, alpha=args.alpha, lk_levels=args.lk_levels,
        lk_window=args.lk_window, max_corners=args.max_corners, saccade_px=args.saccade_threshold,
        irls_rounds=args.irls_rounds, min_speed=args.min_speed_floor, jobs=max(1, args.jobs),
    )


def _gt_from_table(path: Path):
    tab = np.loadtxt(path, ndmin=2)

    def gt(t: float):
        V = np.array([np.interp(t, tab[:, 0], tab[:, k]) for k in (1, 2, 3)])
        w = np.array([np.interp(t, tab[:, 0], tab[:, k]) for k in (4, 5, 6)])
        n = np.linalg.norm(V)
        return (V / n if n > 0 else V), w, float(np.interp(t, tab[:, 0], tab[:, 7]))

    return gt


def _seed_of(inputs: Inputs, args) -> int:
    cfg = inputs.sim_config()
    return cfg.seed if cfg is not None else args.seed


# --- subcommands ------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = SimConfig(args.preset, args.seed, args.duration, args.width, args.height, args.focal, args.threshold,
                    scene=args.scene or "", jitter=args.jitter, noise_rate=args.noise_rate,
                    frame_rate=args.frame_rate)
    seq = simulate(cfg, with_frames=True)
    out = export_sequence(seq, args.out)
    write_manifest(out, args, {}, cfg.seed, {"events": int(seq.events.shape[0])})
    print(f"wrote {seq.events.shape[0]} events, {len(seq.frames)} frames to {out}")
    return 0


def cmd_stabilize(args) -> int:
    inputs = Inputs(args)
    c = inputs.camera()
    events = read_events(inputs.require("events"))
    track = inputs.attitude(args.attitude, args.q_o)
    cfg = pipeline_config(args)
    cfg.stabilize = True
    out = ensure_dir(args.out)
    saccades: list = []
    windows = list(stabilized_windows(events, c, cfg, track, saccade_log=saccades))
    stab = np.concatenate([w.events for w in windows]) if windows else events[:0]
    write_events(stab, out / "events_stabilized.txt", decimals=4)
    write_csv_report(({"t": f"{t:.9f}", "reset_count": n} for t, n in saccades), SACCADE_SCHEMA,
                     out / "saccades.csv")
    if args.iwe:
        img_dir = ensure_dir(out / "iwe")
        for w in windows:
            theta = None if cfg.cmax is False else _safe_cmax(w, c, cfg)
            g = render_iwe(w, theta, cfg.sigma, c)
            peak = float(g.values.max())
            g.values = g.values / peak if peak > 0 else g.values
            write_pgm(g, img_dir / f"iwe_{w.index:05d}.pgm")
    write_manifest(out, args, inputs.used("events", "calib", "poses", "imu"), _seed_of(inputs, args),
                   {"windows": len(windows), "saccades": len(saccades)})
    print(f"{stab.shape[0]} events in {len(windows)} windows, {len(saccades)} saccades -> {out}")
    return 0


def _safe_cmax(w, c, cfg):
    try:
        return maximize_contrast(w, c, cfg.cmax_tiles, cfg.cmax_cap, cfg.sigma)
    except EvstabError:
        return None


def _velocity_run(args, inputs: Inputs):
    c = inputs.camera()
    cfg = pipeline_config(args)
    track = inputs.attitude(args.attitude, args.q_o) if cfg.stabilize else None
    sim_cfg = inputs.sim_config()
    gt = None
    if sim_cfg is not None:
        traj = build_trajectory(sim_cfg)
        gt = lambda t: gt_velocity(traj, t)  # noqa: E731
    elif getattr(args, "gt_velocity", None):
        gt = _gt_from_table(Path(args.gt_velocity))
    if args.mode == "frames":
        run = run_frame_velocity(inputs.frames(), c, cfg, track, gt)
        used = inputs.used("images", "calib", "poses", "imu", "sequence_json")
    else:
        run = run_event_velocity(read_events(inputs.require("events")), c, cfg, track, gt)
        used = inputs.used("events", "calib", "poses", "imu", "sequence_json")
    return run, cfg, used


def save_flowsets(flowsets, path: Path) -> None:
    pts = [f.points for f in flowsets] or [np.empty((0, 2))]
    flows = [f.flows for f in flowsets] or [np.empty((0, 2))]
    sizes = np.array([len(f) for f in flowsets], dtype=np.int64)
    np.savez_compressed(path, points=np.concatenate(pts), flows=np.concatenate(flows), sizes=sizes,
                        dt=np.array([f.dt for f in flowsets]), t=np.array([f.t for f in flowsets]))


def load_flowsets(path: Path) -> list[FlowSet]:
    try:
        d = np.load(path)
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    out, s = [], 0
    for n, dt, t in zip(d["sizes"], d["dt"], d["t"]):
        out.append(FlowSet(d["points"][s : s + n], d["flows"][s : s + n], np.ones(n), float(dt), t=float(t)))
        s += n
    return out


def cmd_velocity(args) -> int:
    inputs = Inputs(args)
    run, cfg, used = _velocity_run(args, inputs)
    out = ensure_dir(args.out)
    mae = run.mae(cfg.min_speed)
    rows = [r.as_row() for r in run.rows]
    rows.append({"index": "summary", "angle_error_deg": f"{mae:.4f}", "status": "MAE"})
    write_csv_report(rows, VELOCITY_SCHEMA, out / "velocity.csv")
    save_flowsets(run.flowsets, out / "flows.npz")
    failed = [r for r in run.rows if r.status != "ok"]
    for r in failed:
        print(f"window {r.index}: {r.status}", file=sys.stderr)
    write_manifest(out, args, used, _seed_of(inputs, args),
                   {"solver": cfg.solver_name, "mae_deg": mae, "pairs": len(run.rows), "failed": len(failed),
                    "median_flow_px": run.median_flow_px(), "saccades": len(run.saccades)})
    print(f"MAE {mae:.3f} deg over {len(run.rows)} pairs ({len(failed)} failed), solver {cfg.solver_name}")
    return 1 if failed else 0


def cmd_track(args) -> int:
    inputs = Inputs(args)
    sim_cfg = inputs.sim_config()
    if sim_cfg is None:
        raise IoError("track needs sequence.json to regenerate ground truth (use --sequence)")
    c = inputs.camera()
    cfg = pipeline_config(args)
    track = inputs.attitude(args.attitude, args.q_o) if cfg.stabilize else None
    scene, traj = build_scene(sim_cfg), build_trajectory(sim_cfg)
    if len(scene.planes) > 1:
        print("warning: ground truth follows the background plane; use a single-plane scene for exact GT",
              file=sys.stderr)
    plane = scene.planes[-1]

    def homography(ta, tb):
        return plane_homography(plane, traj, c, ta, tb)

    kw = dict(tau_valid=args.tau_valid, normalization=args.metric_normalization, max_corners=args.track_corners)
    if args.mode == "frames":
        run = run_frame_tracking(inputs.frames(), c, cfg, homography, track, **kw)
        used = inputs.used("images", "calib", "poses", "imu", "sequence_json")
    else:
        run = run_event_tracking(read_events(inputs.require("events")), c, cfg, homography, track, **kw)
        used = inputs.used("events", "calib", "poses", "imu", "sequence_json")
    out = ensure_dir(args.out)
    m = run.metrics
    row = {"sequence": str(args.sequence or inputs.paths.get("events", "")), "mode": args.mode,
           "stabilize": "on" if cfg.stabilize else "off", "restarts": run.restarts,
           **{k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in m.as_row().items()}}
    write_csv_report([row], TRACK_SCHEMA, out / "tracking.csv")
    write_manifest(out, args, used, sim_cfg.seed, {"metrics": m.as_row()})
    print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in m.as_row().items()))
    return 0


def synthetic_flowsets(n_sets: int, n_samples: int, rng: np.random.Generator, c: CameraModel,
                       rotation: bool = True) -> list[FlowSet]:
    """Exact flow from random velocities and depths, for solver timing."""
    out = []
    for _ in range(n_sets):
        px = np.column_stack([rng.uniform(0, c.width - 1, n_samples), rng.uniform(0, c.height - 1, n_samples)])
        xn = (px - [c.cx, c.cy]) / [c.fx, c.fy]
        V = rng.normal(size=3)
        V /= np.linalg.norm(V)
        rho = 1.0 / rng.uniform(1.0, 5.0, n_samples)
        omega = rng.normal(scale=0.3, size=3) if rotation else None
        f = motion_field(xn, V, rho, omega) * [c.fx, c.fy]
        out.append(FlowSet(px, f, np.ones(n_samples), 0.01, SourceKind.SYNTHETIC))
    return out


def time_solver(name: str, flowsets, c: CameraModel, min_solves: int = EVAL_MIN_SOLVES,
                irls_rounds: int = 5) -> float:
    """Median wall-clock seconds per solve over at least ``min_solves`` solves."""
    if not flowsets:
        raise InputMismatch("no flow sets to time")
    solve = erlv_solve if name == "erlv" else erl_full_solve
    opts = SolverOptions(irls_rounds=irls_rounds)
    times = []
    k = 0
    while len(times) < max(min_solves, len(flowsets)):
        fs = flowsets[k % len(flowsets)]
        k += 1
        t0 = time.perf_counter()
        try:
            solve(fs, c, opts)
        except EvstabError:
            continue
        finally:
            times.append(time.perf_counter() - t0)
    return float(np.median(times))


def _pct(a: float, b: float) -> float:
    """Relative improvement of ``a`` over ``b`` (positive when ``a`` is lower)."""
    return 100.0 * (b - a) / b if b not in (0.0,) and math.isfinite(b) else math.nan


def _read_run(d: Path) -> tuple[dict, float]:
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except (OSError, ValueError) as exc:
        raise IoError(f"cannot read run manifest in {d}: {exc}") from exc
    rows = read_csv_report(d / "velocity.csv")
    mae = next((float(r["angle_error_deg"]) for r in rows if r["index"] == "summary"), math.nan)
    return manifest, mae


def cmd_eval(args) -> int:
    out = ensure_dir(args.out)
    rows = []
    if args.synthetic_flows:
        rng = np.random.default_rng(args.seed)
        c = CameraModel(199.0, 199.0, 119.5, 89.5, 240, 180)
        flowsets = synthetic_flowsets(args.sets, args.synthetic_flows, rng, c)
        ta = time_solver(args.solver_a, flowsets, c, args.min_solves)
        tb = time_solver(args.solver_b, flowsets, c, args.min_solves)
        rows.append({"metric": "solve_time_s", "a": f"{ta:.6f}", "b": f"{tb:.6f}", "delta": f"{ta - tb:.6f}",
                     "improvement_pct": f"{_pct(ta, tb):.2f}"})
        rows.append({"metric": "runtime_ratio", "a": f"{ta / tb:.4f}", "b": "1", "delta": "", "improvement_pct": ""})
        write_csv_report(rows, EVAL_SCHEMA, out / "eval.csv")
        write_manifest(out, args, {}, args.seed, {"runtime_ratio": ta / tb})
        print(f"{args.solver_a} {ta * 1e3:.2f} ms vs {args.solver_b} {tb * 1e3:.2f} ms per solve, "
              f"ratio {ta / tb:.3f}")
        return 0
    if not (args.run_a and args.run_b):
        raise ConfigError("eval needs --run-a and --run-b, or --synthetic-flows N")
    da, db = Path(args.run_a), Path(args.run_b)
    ma, mae_a = _read_run(da)
    mb, mae_b = _read_run(db)
    if ma.get("seed") != mb.get("seed"):
        raise InputMismatch(f"runs use different seeds ({ma.get('seed')} vs {mb.get('seed')})")
    ha = {v["sha256"] for v in ma.get("inputs", {}).values()}
    hb = {v["sha256"] for v in mb.get("inputs", {}).values()}
    if not (ha & hb):
        raise InputMismatch("runs share no input files")
    calib = next((Path(v["path"]) for k, v in ma["inputs"].items() if k == "calib"), None)
    c = read_calib(calib) if calib is not None else CameraModel(199.0, 199.0, 119.5, 89.5, 240, 180)
    flowsets = load_flowsets(da / "flows.npz")
    sa, sb = ma.get("solver", "erlv"), mb.get("solver", "erl")
    ta = time_solver(sa, flowsets, c, args.min_solves)
    tb = time_solver(sb, flowsets, c, args.min_solves)
    rows.append({"metric": "mae_deg", "a": f"{mae_a:.4f}", "b": f"{mae_b:.4f}", "delta": f"{mae_a - mae_b:.4f}",
                 "improvement_pct": f"{_pct(mae_a, mae_b):.2f}"})
    rows.append({"metric": "solve_time_s", "a": f"{ta:.6f}", "b": f"{tb:.6f}", "delta": f"{ta - tb:.6f}",
                 "improvement_pct": f"{_pct(ta, tb):.2f}"})
    rows.append({"metric": "runtime_ratio", "a": f"{ta / tb:.4f}", "b": "1", "delta": "", "improvement_pct": ""})
    write_csv_report(rows, EVAL_SCHEMA, out / "eval.csv")
    write_manifest(out, args, {"run_a": da / "manifest.json", "run_b": db / "manifest.json"}, ma.get("seed"),
                   {"mae_a": mae_a, "mae_b": mae_b, "runtime_ratio": ta / tb})
    print(f"MAE {mae_a:.3f} vs {mae_b:.3f} deg ({_pct(mae_a, mae_b):+.1f}%), "
          f"solve {ta * 1e3:.2f} vs {tb * 1e3:.2f} ms (ratio {ta / tb:.3f})")
    return 0


# --- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evstab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--config", help="key = value file; explicit flags override it")
        p.set_defaults(func=func)
        return p

    p = add("simulate", cmd_simulate, "generate a synthetic sequence")
    p.add_argument("--preset", choices=PRESETS, default="rot-dominant")
    p.add_argument("--scene", choices=SCENES, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--duration", type=float, default=2.0)
    p.add_argument("--threshold", type=float, default=0.3, help="contrast threshold (log intensity)")
    p.add_argument("--width", type=int, default=240)
    p.add_argument("--height", type=int, default=180)
    p.add_argument("--focal", type=float, default=199.0)
    p.add_argument("--frame-rate", type=float, default=25.0)
    p.add_argument("--jitter", type=float, default=0.0, help="timestamp jitter sigma (s)")
    p.add_argument("--noise-rate", type=float, default=0.0, help="noise events per pixel per second")

    p = add("stabilize", cmd_stabilize, "write stabilized events and the saccade log")
    _add_inputs(p, frames=False)
    _add_pipeline(p)
    p.add_argument("--iwe", action="store_true", help="also write one IWE per window as PGM")
    p.add_argument("--out", required=True)

    p = add("velocity", cmd_velocity, "estimate the translation direction per window or frame pair")
    _add_inputs(p)
    _add_pipeline(p)
    p.add_argument("--gt-velocity", help="GT table (t vx vy vz wx wy wz speed) when no sequence.json")
    p.add_argument("--out", required=True)

    p = add("track", cmd_track, "track features and score them against ground truth")
    _add_inputs(p)
    _add_pipeline(p)
    p.add_argument("--tau-valid", type=float, default=None, help="minimum track age (s); default one grid step")
    p.add_argument("--metric-normalization", choices=("per-track", "global"), default="per-track")
    p.add_argument("--track-corners", type=int, default=100)
    p.add_argument("--out", required=True)

    p = add("eval", cmd_eval, "compare two velocity runs or time two solvers")
    p.add_argument("--run-a")
    p.add_argument("--run-b")
    p.add_argument("--synthetic-flows", type=int, default=0, help="time solvers on N-sample exact flow sets")
    p.add_argument("--sets", type=int, default=10)
    p.add_argument("--solver-a", choices=("erlv", "erl"), default="erlv")
    p.add_argument("--solver-b", choices=("erlv", "erl"), default="erl")
    p.add_argument("--min-solves", type=int, default=EVAL_MIN_SOLVES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config and argv and not argv[0].startswith("-"):
        sub = parser._subparsers._group_actions[0].choices.get(argv[0])
        if sub is not None:
            _apply_config(sub, read_config_file(known.config))
    args = parser.parse_args(argv)
    if getattr(args, "min_solves", EVAL_MIN_SOLVES) < EVAL_MIN_SOLVES:
        raise ConfigError(f"--min-solves must be at least {EVAL_MIN_SOLVES}")
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
        return args.func(args)
    except (EvstabError, ValueError) as exc:
        print(f"evstab: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
