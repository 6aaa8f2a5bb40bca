"""Fine-tune every ranker kind on the synthetic corpus and compare held-out MRR@10.

All encoder-based kinds start from the same pretrained encoder; K-NRM and
Conv-KNRM train from scratch on the same triples.
"""
import argparse

from deskrank.experiments import LearnabilityConfig, run_learnability
from deskrank.rankers import RankerKind


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    r = run_learnability(LearnabilityConfig(seed=args.seed, kinds=tuple(k.value for k in RankerKind)))
    for kind, mrr in sorted(r.mrr.items(), key=lambda x: -x[1]):
        print(f"{kind:<10} MRR@10 {mrr:.3f}  best step {r.train[kind].best_step}")


if __name__ == "__main__":
    main()
