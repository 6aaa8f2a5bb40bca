"""Synthetic learnability run: Last-Int versus Rep after shared pretraining."""
import argparse
import json

from deskrank.experiments import LearnabilityConfig, key_term_first_rate, run_learnability
from deskrank.training import write_log


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--kinds", default="LastInt,Rep", help="comma-separated ranker kinds")
    ap.add_argument("--log", help="write the pretraining loss curve to this CSV")
    args = ap.parse_args()
    cfg = LearnabilityConfig(seed=args.seed, kinds=tuple(args.kinds.split(",")))
    r = run_learnability(cfg)
    summary = {
        "seed": args.seed,
        "mrr@10": r.mrr,
        "best_step": {k: t.best_step for k, t in r.train.items()},
        "pretrain_steps": len(r.pretrain_log),
        "seconds": round(r.seconds, 1),
    }
    if "LastInt" in r.rankers:
        summary["key_term_first_rate"] = key_term_first_rate(r.rankers["LastInt"], r.corpus)
    if args.log:
        write_log(r.pretrain_log, args.log)
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
