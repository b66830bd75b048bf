"""plotviz <kind> --in DIR --out FILE.png"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from plotviz.figures import FigureJob, FigureKind, render
from plotviz.io import SchemaMismatchError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="plotviz", description="render figures from a simulator run directory"
    )
    parser.add_argument("kind", choices=[k.value for k in FigureKind])
    parser.add_argument("--in", dest="run_dir", required=True,
                        help="run directory with trajectories.csv and summary.json")
    parser.add_argument("--out", required=True, help="output image path")
    parser.add_argument("--checkpoint", type=int, default=-1,
                        help="equivariance checkpoint index (histogram only)")
    parser.add_argument("--band-sigmas", type=float, default=3.0,
                        help="branch band half width in pointer sigmas")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    job = FigureJob(
        run_dir=Path(args.run_dir),
        kind=FigureKind(args.kind),
        out_path=Path(args.out),
        checkpoint=args.checkpoint,
        band_sigmas=args.band_sigmas,
    )
    try:
        result = render(job)
    except (SchemaMismatchError, FileNotFoundError, ValueError, KeyError, IndexError) as exc:
        print(f"plotviz: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {result.out_path}")
    return 0


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
