"""Command-line entry points.

Exit codes: 0 success, 2 validation failure (invalid LCP solution, failed
gradient audit, or failed experiment check), 3 scene/problem parse error.
"""
from __future__ import annotations

import argparse
import sys

import numpy as np

from . import dantzig, experiments, lcp
from .scenes import SceneError, load_scene

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_PARSE = 3


def _cmd_simulate(args):
    cfg = load_scene(args.scene)
    metrics = experiments.run_simulate(
        cfg, out_dir=args.out, ccd=not args.no_ccd, legacy_max_step=args.legacy_maxstep
    )
    print(f"scene {cfg.name}: {len(metrics.rows) - 1} steps, "
          f"{metrics.collisions} collisions, max penetration {metrics.max_penetration:.3e} m")
    print(f"LCP audit: {metrics.lcp_failures}/{metrics.lcp_checks} failures")
    if metrics.lcp_failures:
        return EXIT_INVALID
    return EXIT_OK


def _cmd_optimize(args):
    cfg = load_scene(args.scene)
    if args.kind != "two-ball":
        print(f"unknown optimization {args.kind!r}", file=sys.stderr)
        return EXIT_PARSE
    metrics = experiments.run_two_ball_optimize(cfg, out_dir=args.out)
    x = metrics.extra
    print(f"scene {cfg.name}: {x['epochs_run']} epochs, "
          f"final position {x['final_position_m']}, error {x['position_error_m']:.5f} m")
    print(f"optimized initial velocity {x['optimized_velocity_mps']} "
          f"(restitution assumed {x['restitution_assumed']})")
    return EXIT_OK


def _cmd_experiment(args):
    cfg = load_scene(args.scene)
    if args.kind == "slide":
        metrics = experiments.run_slide_experiment(cfg, out_dir=args.out,
                                                   legacy_max_step=args.legacy_maxstep)
        x = metrics.extra
        print(f"scene {cfg.name}: slope {x['slope_per_step']:.6f} per step "
              f"(expected {x['expected_slope_per_step']:.6f}, "
              f"rel err {x['slope_rel_error']:.4%})")
    elif args.kind == "push":
        metrics = experiments.run_push_experiment(cfg, out_dir=args.out,
                                                  legacy_max_step=args.legacy_maxstep)
        x = metrics.extra
        print(f"scene {cfg.name}: impact at step {x['impact_step']}, "
              f"pre-impact decel {x['pre_impact_decel_mps2']:.4f} m/s^2 "
              f"(expected {x['expected_decel_mps2']:.4f})")
        print(f"impact momentum error {x['impact_momentum_error']:.3e}, "
              f"final speeds {x['final_speeds']}")
    else:
        print(f"unknown experiment {args.kind!r}", file=sys.stderr)
        return EXIT_PARSE
    print(f"LCP audit: {metrics.lcp_failures}/{metrics.lcp_checks} failures")
    if metrics.lcp_failures:
        return EXIT_INVALID
    return EXIT_OK


def _cmd_gradcheck(args):
    cfg = load_scene(args.scene)
    report = experiments.run_gradcheck(cfg, out_dir=args.out, ccd=not args.no_ccd)
    status = "flagged (near gradient discontinuity)" if report.boundary_flag else "clean"
    print(f"scene {cfg.name}: {len(report.entries)} parameters, "
          f"max rel error {report.max_rel_error:.3e}, {status}")
    for e in report.entries:
        if e.rel_error > 1e-4:
            print(f"  {e.name}: analytic {e.analytic:.6e} numeric {e.numeric:.6e} "
                  f"rel {e.rel_error:.3e}")
    if report.max_rel_error > 1e-4 and not report.boundary_flag:
        return EXIT_INVALID
    return EXIT_OK


def _cmd_lcp_solve(args):
    try:
        problem = lcp.read_problem(args.file)
    except (ValueError, lcp.LcpError) as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    legacy = args.legacy_maxstep or args.frictionless_maxstep_bug
    try:
        solution, trace = dantzig.solve(problem, legacy_max_step=legacy)
    except lcp.NoValidAssignment as exc:
        print(f"no valid assignment: {exc}", file=sys.stderr)
        return EXIT_INVALID
    np.set_printoptions(precision=12, suppress=False)
    print("f =", solution.f.tolist())
    print("a =", solution.a.tolist())
    print("classes =", " ".join(solution.classes))
    print(f"pivots = {trace.pivot_count}, loop_detected = {trace.loop_detected}, "
          f"ergodic_resolutions = {trace.ergodic_resolutions}")
    report = lcp.validate_solution(problem, solution, 1e-8)
    print(f"valid = {report.valid} (worst violation {report.worst_violation:.3e})")
    return EXIT_OK if report.valid else EXIT_INVALID


def build_parser():
    parser = argparse.ArgumentParser(prog="lcpsim",
                                     description="Planar differentiable rigid-body simulation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run a scene and write trajectory/metrics")
    p.add_argument("scene")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--no-ccd", action="store_true", help="discrete stepping control mode")
    p.add_argument("--legacy-maxstep", action="store_true",
                   help="frozen-bound pivot step (regression option)")
    p.set_defaults(fn=_cmd_simulate)

    p = sub.add_parser("optimize", help="run an optimization experiment")
    p.add_argument("kind", choices=["two-ball"])
    p.add_argument("scene")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_optimize)

    p = sub.add_parser("experiment", help="run a benchmark experiment")
    p.add_argument("kind", choices=["slide", "push"])
    p.add_argument("scene")
    p.add_argument("--out", default=None)
    p.add_argument("--legacy-maxstep", action="store_true")
    p.set_defaults(fn=_cmd_experiment)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("scene")
    p.add_argument("--out", default=None)
    p.add_argument("--no-ccd", action="store_true")
    p.set_defaults(fn=_cmd_gradcheck)

    p = sub.add_parser("lcp", help="LCP utilities")
    lcp_sub = p.add_subparsers(dest="lcp_command", required=True)
    ps = lcp_sub.add_parser("solve", help="solve a problem file and print the solution")
    ps.add_argument("file")
    ps.add_argument("--legacy-maxstep", action="store_true")
    ps.add_argument("--frictionless-maxstep-bug", action="store_true",
                    help=argparse.SUPPRESS)  # alias kept for compatibility
    ps.set_defaults(fn=_cmd_lcp_solve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except SceneError as exc:
        print(f"scene error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except FileNotFoundError as exc:
        print(f"file not found: {exc}", file=sys.stderr)
        return EXIT_PARSE


if __name__ == "__main__":
    sys.exit(main())
