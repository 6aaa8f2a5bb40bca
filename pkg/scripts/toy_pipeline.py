"""Run every CLI step on the bundled toy corpus (or another corpus directory)."""
import argparse

from deskrank.pipeline import run_pipeline


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("work", help="output directory")
    ap.add_argument("--data", help="corpus directory; defaults to the bundled toy corpus")
    ap.add_argument("--kind", default="LastInt")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args()
    timings = run_pipeline(args.work, args.data, overrides=args.set, kind=args.kind)
    for step, secs in timings.items():
        print(f"{step:<18} {secs:7.1f}s")
    print(f"outputs in {args.work}")


if __name__ == "__main__":
    main()
