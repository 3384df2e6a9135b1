"""Command-line entry points.

Commands:
  simulate <config> --out DIR [--seed N]    synthesize a dataset + truth
  run <config> <dataset> --out DIR          run the estimator on a dataset
  evaluate <estimate> <reference>           APE RMSE after SE(3) alignment
  calib-report <trace> [--ref US]           line-delay convergence statistics

All commands exit 0 on success and nonzero with a message on stderr
otherwise; partial output files are never left behind silently.
"""

import argparse
import dataclasses
import os
import sys

import numpy as np

from . import dataio
from .estimator import Estimator, run_sequence
from .evaluation import compute_ape
from .simulator import generate_dataset


def cmd_simulate(args):
    cfg = dataio.parse_run_config(args.config).sim
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    out = generate_dataset(cfg)
    for w in out.warnings:
        print("warning: %s" % w, file=sys.stderr)
    dataio.write_dataset(args.out, out)
    print("dataset with %d IMU samples and %d frames written to %s"
          % (len(out.imu), len(out.frames), args.out))
    return 0


def cmd_run(args):
    rc = dataio.parse_run_config(args.config)
    est_cfg = rc.estimator
    if args.strategy is not None:
        est_cfg = dataclasses.replace(est_cfg, strategy=args.strategy)
    ds = dataio.load_dataset(args.dataset)
    est = Estimator(est_cfg, ds.intrinsics, ds.extrinsic)
    poses = run_sequence(est, ds.imu, ds.frames)

    outdir = args.out or rc.output_dir
    os.makedirs(outdir, exist_ok=True)
    dataio.write_trajectory(os.path.join(outdir, "trajectory.txt"), poses)
    dataio.write_trace(os.path.join(outdir, "calib_trace.csv"),
                       est.calibration_trace())
    times = [t for t, _ in est.trace] if est.trace else \
        [f[0] for f in ds.frames]
    dataio.write_reports(os.path.join(outdir, "reports.csv"), times,
                         est.reports)
    print("%d keyframe poses written to %s" % (len(poses), outdir))
    if est.trace:
        print("final line delay estimate: %.3f us"
              % (est.trace[-1][1] * 1e6))
    return 0


def cmd_evaluate(args):
    est = dataio.load_trajectory(args.estimate)
    ref = dataio.load_trajectory(args.reference)
    ape = compute_ape(est, ref)
    print("APE RMSE: %.6e m" % ape)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("%.17g\n" % ape)
    return 0


def cmd_calib_report(args):
    trace = dataio.load_trace(args.trace)
    if not trace:
        raise ValueError("empty calibration trace")
    t_end = trace[-1][0]
    tail = [tr for t, tr in trace if t >= t_end - 5.0]
    mean_us = float(np.mean(tail)) * 1e6
    std_us = float(np.std(tail)) * 1e6
    print("line delay over the last 5 s: mean %.3f us, std %.3f us"
          % (mean_us, std_us))
    if args.ref is not None:
        print("error vs reference %.3f us: %.3f us"
              % (args.ref, abs(mean_us - args.ref)))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ctvio",
        description="Continuous-time visual-inertial odometry for "
                    "rolling-shutter cameras")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="synthesize a dataset")
    p.add_argument("config")
    p.add_argument("--out", default="dataset")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("run", help="run the estimator on a dataset")
    p.add_argument("config")
    p.add_argument("dataset")
    p.add_argument("--strategy", type=int, choices=(1, 2), default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("evaluate", help="APE of an estimate vs a reference")
    p.add_argument("estimate")
    p.add_argument("reference")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("calib-report",
                       help="line-delay convergence statistics")
    p.add_argument("trace")
    p.add_argument("--ref", type=float, default=None,
                   help="reference line delay in microseconds")
    p.set_defaults(func=cmd_calib_report)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
