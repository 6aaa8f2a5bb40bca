"""Regenerate the synthetic toy corpus files (config.json is maintained by hand)."""
import argparse

from deskrank.synthetic import write_toy_corpus


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    for name, path in write_toy_corpus(args.out, seed=args.seed).items():
        print(name, path)


if __name__ == "__main__":
    main()
