"""Command line: ``mbmoser check|solve|verify|oracle1d <scenario-file>``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .errors import MBError
from .scenario import load_scenario
from .verify import exit_code, run


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mbmoser",
                                description="Equalize two degenerate volume forms on a flat torus.")
    sub = p.add_subparsers(dest="mode", required=True)

    def common(sp):
        sp.add_argument("scenario", type=Path, help="scenario file")
        sp.add_argument("--resolution", type=int, help="grid resolution per axis")
        sp.add_argument("--flow-steps", type=int, help="RK4 steps for each flow")
        sp.add_argument("--quad-nodes", type=int, help="Gauss-Legendre nodes")
        sp.add_argument("--tube-radius-frac", type=float,
                        help="chart radius as a fraction of half the zero-set separation")
        sp.add_argument("--format", choices=("bin", "csv"), default="bin", help="dump format")
        sp.add_argument("--report", type=Path, help="also write the report here")
        return sp

    common(sub.add_parser("check", help="classify the zero set and test volumes"))
    s = common(sub.add_parser("solve", help="construct the map and dump all stages"))
    s.add_argument("-o", "--output", type=Path, required=True, help="output directory")
    v = common(sub.add_parser("verify", help="recompute residuals from a dumped map"))
    v.add_argument("--map", type=Path, required=True, help="directory written by solve")
    o = common(sub.add_parser("oracle1d", help="exact 1D transport map"))
    o.add_argument("-o", "--output", type=Path, help="output directory")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        scenario = load_scenario(args.scenario).with_overrides(
            resolution=args.resolution, flow_steps=args.flow_steps,
            quad_nodes=args.quad_nodes, tube_radius_frac=args.tube_radius_frac)
    except MBError as exc:
        print(f"error = {exc.tag}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error = {exc}", file=sys.stderr)
        return 2
    out = getattr(args, "output", None)
    report = run(scenario, args.mode, out_dir=out, map_dir=getattr(args, "map", None),
                 fmt=args.format)
    sys.stdout.write(report.text())
    if args.report is not None:
        report.write(args.report)
    return exit_code(report)


if __name__ == "__main__":
    sys.exit(main())
