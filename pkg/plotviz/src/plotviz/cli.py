"""plotviz <kind> --in <csv...> --out <img>  (PNG or SVG by extension)."""

from __future__ import annotations

import argparse
import sys

from .charts import KINDS, ChartSpec, SchemaError, plot_chart


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="plotviz", description="render diagnostics CSVs as line charts"
    )
    parser.add_argument("kind", choices=KINDS)
    parser.add_argument("--in", dest="inputs", nargs="+", required=True,
                        help="input CSV file(s)")
    parser.add_argument("--out", required=True, help="output image (.png/.svg)")
    parser.add_argument("--label", action="append", default=None,
                        help="series label per input (repeatable)")
    parser.add_argument("--selector", action="append", default=None,
                        help="conflict charts: plot only these matrix kinds")
    parser.add_argument("--title", default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        spec = ChartSpec(
            kind=args.kind,
            inputs=args.inputs,
            out=args.out,
            labels=args.label,
            selectors=args.selector,
            title=args.title,
        )
        series = plot_chart(spec)
    except SchemaError as e:
        print(f"schema error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return 3
    print(f"{args.kind}: {len(series)} series -> {args.out}")
    return 0


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
