"""CLI: ``plots <kind> --in <dir> --out <file>``.

Kinds: trajectories, xu_scatter, avg_cost, histogram, slack.  Exit code 0 on
success, 2 on schema/argument errors.
"""

from __future__ import annotations

import argparse
import sys

from .render import KINDS, FigureSpec, SchemaError, render


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="plots", description=__doc__)
    parser.add_argument("kind", choices=KINDS)
    parser.add_argument("--in", dest="in_dir", required=True,
                        help="campaign output directory (metrics.csv etc.)")
    parser.add_argument("--out", required=True, help="image file to write")
    parser.add_argument("--max-runs", type=int, default=10,
                        help="cap on the number of runs drawn in line plots")
    parser.add_argument("--coord", type=int, default=0,
                        help="0-based state coordinate for scatter/trajectory plots")
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        spec = FigureSpec(kind=args.kind, in_dir=args.in_dir,
                          max_runs=args.max_runs, coord=args.coord)
        path = render(spec, args.out)
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
