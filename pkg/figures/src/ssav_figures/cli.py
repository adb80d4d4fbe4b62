"""figures <kind> --in CSV [CSV ...] --out IMAGE

Renders benchmark CSV outputs into publication-style figures.  Exit codes:
0 written, 1 schema mismatch or bad input, 2 unexpected error.
"""

from __future__ import annotations

import argparse
import sys

from .render import KINDS, FigureSpec, render
from .schema import SchemaError


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="figures", description=__doc__)
    parser.add_argument("kind", choices=KINDS)
    parser.add_argument("--in", dest="inputs", nargs="+", required=True,
                        help="input CSV file(s)")
    parser.add_argument("--out", required=True, help="output image path")
    parser.add_argument("--title", default="")
    parser.add_argument("--xlabel", default="")
    parser.add_argument("--ylabel", default="")
    parser.add_argument("--label", dest="labels", action="append", default=[],
                        help="series label (repeatable, one per input)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        spec = FigureSpec(
            inputs=tuple(args.inputs),
            kind=args.kind,
            output=args.out,
            title=args.title,
            xlabel=args.xlabel,
            ylabel=args.ylabel,
            labels=tuple(args.labels),
        )
        out = render(spec)
    except (SchemaError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
