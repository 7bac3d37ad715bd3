"""Command-line entry point: ``dynba run | mask | eval | gen``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import DynbaError

EXIT_OK, EXIT_ERROR, EXIT_MAX_ITER = 0, 1, 2


def _parser():
    p = argparse.ArgumentParser(prog="dynba", description="Dynamic bundle adjustment for monocular video.")
    p.add_argument("-v", "--verbose", action="store_true", help="log stage progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run all stages on a bundle directory")
    run.add_argument("dir", type=Path)
    run.add_argument("--config", type=Path, help="key = value file overriding the manifest config")
    run.add_argument("--seed", type=int)
    run.add_argument("--no-epimask", action="store_true", help="semantic masks only")
    run.add_argument("--no-flow-refine", action="store_true", help="skip the flow refinement stage")
    run.add_argument("--out", type=Path, help="output directory (default <dir>/out)")
    run.add_argument("--no-figures", action="store_true")

    mask = sub.add_parser("mask", help="run the masking stage only")
    mask.add_argument("dir", type=Path)
    mask.add_argument("--config", type=Path)

    ev = sub.add_parser("eval", help="compare an output directory with ground truth")
    ev.add_argument("--est", type=Path, required=True)
    ev.add_argument("--gt", type=Path, required=True)
    ev.add_argument("--delta", type=int, default=1)
    ev.add_argument("--alignment", choices=("scale_shift", "scale"), default="scale_shift")
    ev.add_argument("--figures", type=Path, help="write a trajectory comparison plot here")

    gen = sub.add_parser("gen", help="write a synthetic bundle and its ground truth")
    gen.add_argument("dir", type=Path)
    gen.add_argument("--preset", choices=("arc", "dolly", "orbit"), default="arc")
    gen.add_argument("--seed", type=int, default=42)
    gen.add_argument("--noise-tracks", type=float, default=0.0, metavar="SIGMA")
    gen.add_argument("--noise-depth", type=float, default=0.0, metavar="SIGMA")
    gen.add_argument("--noise-flow", type=float, default=0.0, metavar="SIGMA")
    gen.add_argument("--unlabeled", type=int, default=0, help="tracks on a mover absent from the semantic masks")
    gen.add_argument("--focal-error", type=float, default=0.0, help="relative error of the initial focal length")
    return p


def _cmd_run(args):
    from .pipeline import load_config, run_pipeline

    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.no_epimask:
        overrides["enable_epimask"] = False
    if args.no_flow_refine:
        overrides["enable_flow_refine"] = False
    config = load_config(args.dir, args.config, overrides)
    report = run_pipeline(args.dir, config, args.out, figures=not args.no_figures)
    print(f"termination = {report.termination}")
    return report.exit_code


def _cmd_mask(args):
    from .pipeline import load_config, run_masking

    record = run_masking(args.dir, load_config(args.dir, args.config))
    for k, v in record.counts.items():
        print(f"{k} = {v}")
    return EXIT_OK


def _cmd_eval(args):
    from .evaluation import align_trajectory, evaluate_directories, format_report

    metrics = evaluate_directories(args.est, args.gt, args.delta, args.alignment)
    sys.stdout.write(format_report(metrics))
    if args.figures:
        from .geometry import CameraPose, Trajectory
        from .plotting import plot_trajectory
        from .scene import read_tum

        est, gt = read_tum(args.est / "trajectory.tum"), read_tum(args.gt / "trajectory.tum")
        S = align_trajectory(est, gt)
        # move the estimate into the ground-truth frame for plotting
        moved = Trajectory(tuple(CameraPose.from_matrix(p.R @ S.rotation.T,
                                                        S.scale * p.translation - p.R @ S.rotation.T @ S.translation)
                                 for p in est.poses), est.timestamps)
        plot_trajectory(args.figures / "trajectory_vs_gt.png", moved, reference=gt)
    return EXIT_OK


def _cmd_gen(args):
    from .scene import save_bundle
    from .synthetic import SynthConfig, generate_scene, write_ground_truth

    cfg = SynthConfig(preset=args.preset, seed=args.seed, noise_tracks=args.noise_tracks,
                      noise_depth=args.noise_depth, noise_flow=args.noise_flow,
                      n_unlabeled=args.unlabeled, focal_init_error=args.focal_error).validate()
    bundle, gt = generate_scene(cfg)
    save_bundle(bundle, args.dir)
    write_ground_truth(args.dir / "gt", bundle, gt)
    print(f"bundle = {args.dir}")
    print(f"ground_truth = {args.dir / 'gt'}")
    return EXIT_OK


_COMMANDS = {"run": _cmd_run, "mask": _cmd_mask, "eval": _cmd_eval, "gen": _cmd_gen}


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except (DynbaError, OSError, ValueError) as exc:
        print(f"dynba: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
