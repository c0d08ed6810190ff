"""Command-line entry points: synth, segment, solve, eval, sweep, height."""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from flightcap.config import DofMode, SolveConfig, Weights
from flightcap.errors import FlightCapError

MODES = [m.value for m in DofMode]


def _weights(text):
    try:
        return Weights.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _solve_args(p):
    p.add_argument("--mode", choices=MODES, default="9dof", help="unknown set of the trajectory model")
    p.add_argument("--weights", type=_weights, default=Weights(), help="'default' or k=v,... (p,b,c,m,s,co,bl)")
    p.add_argument("--max-iters", type=int, default=200)
    p.add_argument("--tol", type=float, default=1e-8, help="gradient tolerance")
    p.add_argument("--f-init", type=float, default=None, help="starting focal length in px (7/10 DoF)")
    p.add_argument("--seed", type=int, default=0)


def _config(args) -> SolveConfig:
    if args.max_iters < 1:
        raise argparse.ArgumentTypeError("--max-iters must be >= 1")
    if args.tol <= 0:
        raise argparse.ArgumentTypeError("--tol must be positive")
    return SolveConfig(mode=DofMode.parse(args.mode), weights=args.weights, max_iterations=args.max_iters,
                       gradient_tolerance=args.tol, f_init=args.f_init, seed=args.seed)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flightcap", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--persons", type=int, default=1, choices=[1, 2])
    p.add_argument("--episodes", type=int, default=1)
    p.add_argument("--flight-frames", type=int, default=30)
    p.add_argument("--hold-frames", type=int, default=8)
    p.add_argument("--f", type=float, default=1000.0, help="focal length in px")
    p.add_argument("--frame-rate", type=float, default=30.0)
    p.add_argument("--pitch", type=float, default=15.0, help="camera pitch in degrees")
    p.add_argument("--sigma-pose", type=float, default=0.0, help="3D joint noise, mm")
    p.add_argument("--sigma-root", type=float, default=0.0, help="per-frame rigid pose jitter, mm")
    p.add_argument("--sigma-track", type=float, default=0.0, help="2D object noise, px")
    p.add_argument("--sigma-2d", type=float, default=0.0, help="2D joint noise, px")
    p.add_argument("--prior-scale", type=float, default=1.0)
    p.add_argument("--no-episodes", action="store_true", help="leave flight windows to detection")

    p = sub.add_parser("segment", help="detect flight windows in a scene's object track")
    p.add_argument("scene")
    p.add_argument("--window", type=int, default=5)
    p.add_argument("--threshold", type=float, default=10.0, help="velocity change, px/frame")
    p.add_argument("--out")

    p = sub.add_parser("solve", help="joint reconstruction of a scene")
    p.add_argument("scene")
    _solve_args(p)
    p.add_argument("--out", required=True, help="solution file")
    p.add_argument("--report", help="also write the solve report as JSON")
    p.add_argument("--plot-csv", help="per-frame 2D/3D trajectories for plotting")

    p = sub.add_parser("eval", help="metrics of a solution against the scene's ground truth")
    p.add_argument("solution")
    p.add_argument("scene")
    p.add_argument("--out", help="metrics CSV")

    p = sub.add_parser("sweep", help="root error under increasing input noise")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--modes", default="6dof,7dof,10dof")
    p.add_argument("--sigmas-pose", type=_floats, default=[10.0, 30.0, 50.0, 100.0])
    p.add_argument("--sigmas-track", type=_floats, default=[10.0, 30.0, 50.0, 100.0])
    p.add_argument("--include-zero", action="store_true")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)

    p = sub.add_parser("height", help="subject heights from a solution")
    p.add_argument("solution")
    p.add_argument("scene")
    p.add_argument("--correction", type=float, default=None, help="head/foot keypoint factor (default 1.17)")
    return parser


def _cmd_synth(args):
    from flightcap.io import save_scene
    from flightcap.synth import SceneSpec, generate

    spec = SceneSpec(f=args.f, frame_rate=args.frame_rate, camera_pitch_deg=args.pitch, n_persons=args.persons,
                     n_episodes=args.episodes, flight_frames=args.flight_frames, hold_frames=args.hold_frames,
                     sigma_pose_mm=args.sigma_pose, sigma_root_mm=args.sigma_root,
                     sigma_track_px=args.sigma_track, sigma_2d_px=args.sigma_2d, prior_scale=args.prior_scale,
                     annotate_episodes=not args.no_episodes, seed=args.seed)
    _, scene = generate(spec)
    save_scene(scene, args.out)
    print(f"wrote {args.out}: {scene.n_frames} frames, {len(scene.persons)} person(s), "
          f"{len(spec.flight_lengths())} flight(s)")


def _cmd_segment(args):
    from flightcap.episodes import build_multi_episode, detect_switches
    from flightcap.io import atomic_write_text, load_scene

    scene = load_scene(args.scene)
    switches = detect_switches(scene.object_track, args.window, args.threshold, valid=scene.object_valid)
    seg = build_multi_episode(scene.object_track, switches, scene.contacts, valid=scene.object_valid)
    print("switch frames:", " ".join(map(str, switches)) or "-")
    for e in seg.episodes():
        print(f"episode {e.start:5d} .. {e.end:5d}  multi-episode {e.multi_episode}")
    if args.out:
        doc = {"switch_frames": switches,
               "episodes": [{"start_frame": e.start, "end_frame": e.end, "multi_episode": e.multi_episode}
                            for e in seg.episodes()]}
        atomic_write_text(args.out, json.dumps(doc, indent=1) + "\n")


def _cmd_solve(args):
    from flightcap.io import finite_or_null, atomic_write_text, load_scene, save_solution, write_plot_csv
    from flightcap.solver import solve_scene

    config = _config(args)
    scene = load_scene(args.scene)
    sol, report = solve_scene(scene, config)
    save_solution(sol, args.out, report)
    if args.report:
        atomic_write_text(args.report, json.dumps(finite_or_null(report.to_dict()), indent=1, allow_nan=False) + "\n")
    if args.plot_csv:
        write_plot_csv(args.plot_csv, scene, sol)
    print(f"status {report.status} after {report.iterations} iterations, objective {report.objective:.6g}, "
          f"{report.wall_time:.2f} s")
    for k, v in report.weighted_energies.items():
        print(f"  E_{k:<3s} {v:.6g}")
    print(f"f = {sol.f:.2f} px, g = {np.array2string(sol.g, precision=4)}")
    if report.f_z_ambiguous:
        print("warning: focal length and depth are nearly interchangeable for this scene", file=sys.stderr)


def _cmd_eval(args):
    from flightcap.io import METRIC_COLUMNS, load_scene, load_solution, write_metrics_csv
    from flightcap.metrics import compute_metrics

    scene = load_scene(args.scene)
    sol = load_solution(args.solution)
    m = compute_metrics(sol, scene)
    d = m.as_dict()
    for c in METRIC_COLUMNS:
        print(f"{c:<16s} {d[c]:.6g}")
    if args.out:
        write_metrics_csv(args.out, m)


def _cmd_sweep(args):
    from flightcap.io import write_sweep_csv
    from flightcap.synth import SceneSpec, noise_sweep

    try:
        modes = [DofMode.parse(m) for m in args.modes.split(",") if m.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    if args.seeds < 1:
        raise argparse.ArgumentTypeError("--seeds must be >= 1")
    rows = noise_sweep(SceneSpec(), args.sigmas_pose, args.sigmas_track, modes,
                       seeds=range(args.seed, args.seed + args.seeds), workers=args.workers,
                       include_zero=args.include_zero)
    write_sweep_csv(args.out, rows)
    for r in rows:
        unit = "mm" if r.family == "pose" else "px"
        print(f"{r.family:<6s} {r.mode:<5s} sigma {r.sigma:6.1f} {unit}  root MPE {r.root_mpe_mm:9.2f} mm")


def _cmd_height(args):
    from flightcap.io import load_scene, load_solution
    from flightcap.skeleton import HEIGHT_CORRECTION, sequence_height

    scene = load_scene(args.scene)
    sol = load_solution(args.solution)
    corr = HEIGHT_CORRECTION if args.correction is None else args.correction
    for pi, p in enumerate(scene.persons):
        h = sequence_height(p.p2d, sol.t_corr[pi][:, 2], sol.f, corr, valid=p.p2d_valid)
        print(f"person {pi}: {h:.3f} m")


COMMANDS = {"synth": _cmd_synth, "segment": _cmd_segment, "solve": _cmd_solve, "eval": _cmd_eval,
            "sweep": _cmd_sweep, "height": _cmd_height}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except argparse.ArgumentTypeError as exc:
        parser.print_usage(sys.stderr)
        print(f"flightcap {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (FlightCapError, OSError, ValueError) as exc:
        print(f"flightcap {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
