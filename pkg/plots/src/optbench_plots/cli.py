"""Command line: optbench-plot <kind> --in CSV --out IMG [--title STR].

Writes PNG or SVG depending on the output extension; with no extension it
writes both. Nothing is written when the input is empty or malformed.
"""

from __future__ import annotations

import argparse
import sys

from .render import RENDERERS, SchemaError


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="optbench-plot",
        description="Render box, trend, or violin figures from optbench analysis CSVs.",
    )
    parser.add_argument("kind", choices=sorted(RENDERERS), help="figure kind")
    parser.add_argument("--in", dest="input", required=True, help="tidy CSV from `optbench analyze`")
    parser.add_argument("--out", required=True, help="output image path (.png or .svg; no extension writes both)")
    parser.add_argument("--title", default=None, help="extra title text")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    try:
        summary = RENDERERS[args.kind](args.input, args.out, title=args.title)
    except (OSError, SchemaError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {', '.join(summary.out_paths)} ({summary.cells} cells, {summary.panels} panel(s))")
    return 0


if __name__ == "__main__":
    sys.exit(main())
