"""``deskrank`` command-line entry point.

Every command writes its outputs atomically and a ``<output>.manifest.json``
beside its primary output. ``deskrank replay MANIFEST`` re-executes a command
from the resolved configuration stored in the manifest.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (AttentionShareReport, attention_group_shares, classify_tokens, emit_scatter,
                       load_stopwords, most_influential_terms, term_influence, write_influential_terms)
from .atomic import atomic_write_text
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import (encoder_config, load_config, parse_override, pretrain_config, ranker_config, resolve,
                     train_config)
from .encoder import encoder_forward, init_params
from .evaluation import RankedList, evaluate_run, parse_metric, permutation_test, write_significance
from .rankers import Ranker, RankerKind
from .tensor import no_grad
from .text import (BM25Index, ConfigError, ParseError, QrelSet, RunEntry, Vocabulary, bm25_rank, build_vocab,
                   encode_pair, load_candidates, load_corpus, load_qrels, load_queries, load_run, load_triples,
                   tokenize, write_candidates, write_run)
from .training import LabeledPair, TrainingError, pretrain, train, write_log

logger = logging.getLogger("deskrank")


class CLIError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config_path: str | None
    config: dict
    seed: int
    args: dict
    inputs: dict[str, str]
    outputs: dict[str, str]
    artifact_version: str = __version__
    extra: dict = field(default_factory=dict)

    def write(self, path) -> None:
        atomic_write_text(path, json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path) -> RunManifest:
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


def manifest_path(output) -> Path:
    return Path(str(output) + ".manifest.json")


# ---------------------------------------------------------------- helpers

def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CLIError(f"{what} not found: {p}")
    return p


def _ranker_from_checkpoint(path, kind: str | None = None, cfg: dict | None = None) -> Ranker:
    params, header = load_checkpoint(_require(path, "checkpoint"))
    stored = header.get("ranker_kind")
    if stored is None:
        raise CLIError(f"{path} holds a pretrained encoder only; fine-tune it with 'train' first")
    if kind is not None and RankerKind(kind) != RankerKind(stored):
        raise CLIError(f"checkpoint {path} holds a {stored} ranker, not {kind}")
    ccfg = header["config"]
    vocab = Vocabulary(header["vocab"])
    enc = encoder_config(ccfg, len(vocab))
    return Ranker(ranker_config(ccfg, stored), enc, vocab, params)


def _save_ranker(path, ranker: Ranker, cfg: dict) -> None:
    save_checkpoint(path, ranker.params, config=cfg, ranker_kind=ranker.kind.value, vocab=ranker.vocab.tokens)


def _validation_pairs(sets, qrels: QrelSet) -> list[LabeledPair]:
    return [LabeledPair(cs.query_id, tokenize(cs.query), tokenize(c.text),
                        1 if qrels.grades.get((cs.query_id, c.doc_id), 0) > 0 else 0)
            for cs in sets for c in cs.docs]


def _run_entries(ranked: dict[str, RankedList], tag: str) -> list[RunEntry]:
    return [RunEntry(qid, d, r, float(s), tag)
            for qid in sorted(ranked) for r, (d, s) in enumerate(zip(ranked[qid].doc_ids, ranked[qid].scores), 1)]


# ---------------------------------------------------------------- commands
# each returns (inputs, outputs, extra) for the manifest

def cmd_build_vocab(args, cfg):
    texts = [t for _, t in load_corpus(_require(args.corpus, "corpus"))]
    inputs = {"corpus": args.corpus}
    for i, q in enumerate(args.queries or []):
        texts += [t for _, t in load_queries(_require(q, "queries"))]
        inputs[f"queries{i}"] = q
    vocab = build_vocab(texts, min_count=args.min_count, max_size=args.max_size)
    vocab.save(args.out)
    return inputs, {"vocab": args.out}, {"size": len(vocab)}


def cmd_pretrain(args, cfg):
    vocab = Vocabulary.load(_require(args.vocab, "vocabulary"))
    passages = [t for _, t in load_corpus(_require(args.corpus, "corpus"))]
    enc = encoder_config(cfg, len(vocab))
    params = init_params(enc, cfg["seed"])
    log = pretrain(params, enc, vocab, passages, pretrain_config(cfg))
    save_checkpoint(args.out, params, config=cfg, vocab=vocab.tokens)
    log_path = str(args.out) + ".log.csv"
    write_log(log, log_path)
    return {"vocab": args.vocab, "corpus": args.corpus}, {"checkpoint": args.out, "log": log_path}, {
        "final_loss": log[-1][2] if log else None}


def cmd_train(args, cfg):
    kind = cfg["ranker_kind"]
    triples = list(load_triples(_require(args.triples, "triples")))
    sets = list(load_candidates(_require(args.dev_candidates, "dev candidates"), depth=10**9))
    qrels = load_qrels(_require(args.dev_qrels, "dev qrels"))
    inputs = {"triples": args.triples, "dev_candidates": args.dev_candidates, "dev_qrels": args.dev_qrels}
    if args.checkpoint:
        params, header = load_checkpoint(_require(args.checkpoint, "checkpoint"))
        inputs["checkpoint"] = args.checkpoint
        stored = header.get("ranker_kind")
        if stored is not None and RankerKind(stored) != RankerKind(kind):
            raise CLIError(f"checkpoint {args.checkpoint} holds a {stored} ranker, not {kind}")
        vocab = Vocabulary(header["vocab"])
        # architecture comes from the checkpoint; training keys from this run
        arch = {k: header["config"][k] for k in ("layers", "hidden", "heads", "ff_dim", "max_positions",
                                                 "ln_eps", "init_std") if k in header["config"]}
        cfg.update(arch)
        enc = encoder_config(cfg, len(vocab))
        if stored is None:
            encoder_params = {k: v for k, v in params.items() if k.startswith("encoder/")}
            ranker = Ranker.create(ranker_config(cfg), enc, vocab, cfg["seed"], encoder_params=encoder_params)
        else:
            ranker = Ranker(ranker_config(cfg), enc, vocab, params)
    else:
        if not args.vocab:
            raise CLIError("train needs --vocab when no --checkpoint is given")
        vocab = Vocabulary.load(_require(args.vocab, "vocabulary"))
        inputs["vocab"] = args.vocab
        ranker = Ranker.create(ranker_config(cfg), encoder_config(cfg, len(vocab)), vocab, cfg["seed"])
    result = train(ranker, triples, _validation_pairs(sets, qrels), train_config(cfg))
    _save_ranker(args.out, ranker, cfg)
    log_path = str(args.out) + ".log.csv"
    write_log(result.log, log_path)
    return inputs, {"checkpoint": args.out, "log": log_path}, {
        "best_step": result.best_step, "best_val_loss": result.best_val_loss, "stopped_step": result.stopped_step}


def cmd_bm25(args, cfg):
    index = BM25Index(load_corpus(_require(args.corpus, "corpus")))
    sets = [bm25_rank(tokenize(text), index, k=args.depth, k1=args.k1, b=args.b, query_id=qid, query_text=text)
            for qid, text in load_queries(_require(args.queries, "queries"))]
    write_candidates(sets, args.out)
    return {"corpus": args.corpus, "queries": args.queries}, {"candidates": args.out}, {
        "queries": len(sets), "empty": sum(not s.docs for s in sets)}


def cmd_rerank(args, cfg):
    ranker = _ranker_from_checkpoint(args.checkpoint, args.kind)
    ranked = {}
    for cs in load_candidates(_require(args.candidates, "candidates"), depth=args.depth):
        scores = ranker.score(tokenize(cs.query), [tokenize(c.text) for c in cs.docs], markers=args.markers)
        ranked[cs.query_id] = RankedList.from_scores(cs.query_id, zip([c.doc_id for c in cs.docs], scores))
    write_run(_run_entries(ranked, args.tag or ranker.kind.value), args.out)
    return {"checkpoint": args.checkpoint, "candidates": args.candidates}, {"run": args.out}, {}


def _metric_path(out, metric: str) -> Path:
    p = Path(out)
    return p.with_name(f"{p.stem}.{metric}{p.suffix or '.csv'}")


def cmd_eval(args, cfg):
    run = load_run(_require(args.run, "run"))
    qrels = load_qrels(_require(args.qrels, "qrels"))
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    for m in metrics:
        parse_metric(m)
    outputs, means = {}, {}
    for m in metrics:
        report = evaluate_run(run, qrels, m)
        path = _metric_path(args.out, m)
        report.write_csv(path)
        outputs[m] = str(path)
        means[m] = report.mean
    summary = "".join(f"{m},{means[m]!r}\n" for m in metrics)
    atomic_write_text(args.out, "metric,mean\n" + summary)
    outputs["summary"] = args.out
    return {"run": args.run, "qrels": args.qrels}, outputs, {"means": means}


def cmd_significance(args, cfg):
    qrels = load_qrels(_require(args.qrels, "qrels"))
    a = evaluate_run(load_run(_require(args.run_a, "run A")), qrels, args.metric)
    b = evaluate_run(load_run(_require(args.run_b, "run B")), qrels, args.metric)
    qids = sorted(set(a.per_query) | set(b.per_query))
    va = [a.per_query.get(q, 0.0) for q in qids]
    vb = [b.per_query.get(q, 0.0) for q in qids]
    p = permutation_test(va, vb, n_perm=args.n_perm, seed=cfg["seed"])
    write_significance(args.out, args.metric, float(np.mean(va)), float(np.mean(vb)), p)
    return {"run_a": args.run_a, "run_b": args.run_b, "qrels": args.qrels}, {"report": args.out}, {"p_value": p}


def _stopwords(path):
    if path is None:
        return load_stopwords()
    return frozenset(w.strip().lower() for w in _require(path, "stopword list").read_text(encoding="utf-8").split())


def cmd_analyze_attention(args, cfg):
    ranker = _ranker_from_checkpoint(args.checkpoint)
    if not ranker.kind.uses_encoder:
        raise CLIError(f"{ranker.kind.value} has no encoder to analyze")
    stopwords = _stopwords(args.stopwords)
    report: AttentionShareReport | None = None
    with no_grad():
        for cs in load_candidates(_require(args.candidates, "candidates"), depth=args.depth):
            for c in cs.docs:
                seq = encode_pair(tokenize(cs.query), tokenize(c.text), ranker.vocab, ranker.config.max_len)
                out = encoder_forward(seq, ranker.params, ranker.encoder_config)
                part = attention_group_shares(out, classify_tokens(seq, ranker.vocab, stopwords))
                report = part if report is None else report.merge(part)
    if report is None:
        raise CLIError(f"{args.candidates} holds no candidates")
    report.write_csv(args.out)
    inputs = {"checkpoint": args.checkpoint, "candidates": args.candidates}
    if args.stopwords:
        inputs["stopwords"] = args.stopwords
    return inputs, {"report": args.out}, {"metadata": report.metadata}


def cmd_analyze_influence(args, cfg):
    ranker = _ranker_from_checkpoint(args.checkpoint)
    stopwords = _stopwords(args.stopwords)
    records, terms = [], []
    for cs in load_candidates(_require(args.candidates, "candidates"), depth=args.depth):
        q = tokenize(cs.query)
        for c in cs.docs:
            recs = term_influence(q, tokenize(c.text), ranker, seed=cfg["seed"], mode=args.mode,
                                  stopwords=stopwords, query_id=cs.query_id, doc_id=c.doc_id)
            records += recs
            top = most_influential_terms(q, tokenize(c.text), ranker, top_n=args.top_n, records=recs)
            terms += [(cs.query_id, c.doc_id, r, t, d) for r, (t, d) in enumerate(top, 1)]
    if not records:
        raise CLIError("no influence records: every document lacks regular tokens")
    emit_scatter(records, args.out)
    terms_path = str(Path(args.out).with_suffix("")) + ".terms.csv"
    write_influential_terms(terms, terms_path)
    return {"checkpoint": args.checkpoint, "candidates": args.candidates}, {
        "scatter": args.out, "terms": terms_path}, {"records": len(records)}


COMMANDS = {
    "build-vocab": cmd_build_vocab,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "bm25": cmd_bm25,
    "rerank": cmd_rerank,
    "eval": cmd_eval,
    "significance": cmd_significance,
    "analyze-attention": cmd_analyze_attention,
    "analyze-influence": cmd_analyze_influence,
}


# ---------------------------------------------------------------- argument parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deskrank", description="Desk-scale neural ranking experiments.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat JSON config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--seed", type=int, help="shorthand for --set seed=N")
        return p

    p = command("build-vocab", "build a vocabulary from a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--queries", action="append", help="extra 'qid<TAB>text' files to include")
    p.add_argument("--min-count", type=int, default=1)
    p.add_argument("--max-size", type=int)
    p.add_argument("--out", required=True)

    p = command("pretrain", "Mask-LM and next-sequence pretraining of the encoder")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)

    p = command("train", "fine-tune a ranker")
    p.add_argument("--triples", required=True)
    p.add_argument("--dev-candidates", required=True)
    p.add_argument("--dev-qrels", required=True)
    p.add_argument("--checkpoint", help="pretrained encoder or ranker checkpoint to start from")
    p.add_argument("--vocab", help="vocabulary, needed when no checkpoint is given")
    p.add_argument("--kind", help="ranker kind (shorthand for --set ranker_kind=...)")
    p.add_argument("--out", required=True)

    p = command("bm25", "BM25 candidate generation")
    p.add_argument("--corpus", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--depth", type=int, default=100)
    p.add_argument("--k1", type=float, default=0.9)
    p.add_argument("--b", type=float, default=0.4)
    p.add_argument("--out", required=True)

    p = command("rerank", "score candidates with a trained ranker")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--candidates", required=True)
    p.add_argument("--kind", required=True)
    p.add_argument("--depth", type=int, default=100)
    p.add_argument("--markers", choices=("all", "cls", "none"), default="all")
    p.add_argument("--tag")
    p.add_argument("--out", required=True)

    p = command("eval", "evaluate a run against qrels")
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--metrics", default="mrr@10,ndcg@20,err@20")
    p.add_argument("--out", required=True, help="summary CSV; per-query reports go to <stem>.<metric>.csv")

    p = command("significance", "paired permutation test between two runs")
    p.add_argument("--run-a", required=True)
    p.add_argument("--run-b", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--metric", default="mrr@10")
    p.add_argument("--n-perm", type=int, default=100_000)
    p.add_argument("--out", required=True)

    p = command("analyze-attention", "per-layer attention shares by token group")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--candidates", required=True)
    p.add_argument("--stopwords")
    p.add_argument("--depth", type=int, default=100)
    p.add_argument("--out", required=True)

    p = command("analyze-influence", "term-removal influence analysis")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--candidates", required=True)
    p.add_argument("--mode", choices=("random-one", "exhaustive"), default="random-one")
    p.add_argument("--stopwords")
    p.add_argument("--depth", type=int, default=100)
    p.add_argument("--top-n", type=int, default=5)
    p.add_argument("--out", required=True)

    p = sub.add_parser("replay", help="re-run a command from its manifest")
    p.add_argument("manifest")
    p.add_argument("--redirect", metavar="DIR", help="write outputs into DIR instead of their recorded paths")
    return parser


def _resolve_config(args) -> dict:
    file_values = load_config(_require(args.config, "config")) if args.config else {}
    overrides = dict(parse_override(s) for s in args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "kind", None) and args.command == "train":
        overrides["ranker_kind"] = args.kind
    return resolve(file_values, overrides)


_RUN_KEYS = ("config", "set", "seed", "verbose", "command")
_PATH_ARGS = ("corpus", "queries", "vocab", "out", "triples", "dev_candidates", "dev_qrels", "checkpoint", "run",
              "qrels", "run_a", "run_b", "candidates", "stopwords")


def _absolute_paths(args: argparse.Namespace) -> None:
    """Manifests record absolute paths so a replay works from any directory."""
    for key in _PATH_ARGS:
        value = getattr(args, key, None)
        if isinstance(value, list):
            setattr(args, key, [str(Path(v).resolve()) for v in value])
        elif value is not None:
            setattr(args, key, str(Path(value).resolve()))


def execute(command: str, args: argparse.Namespace, cfg: dict, config_path: str | None) -> RunManifest:
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    cfg = dict(cfg)
    inputs, outputs, extra = COMMANDS[command](args, cfg)
    recorded = {k: v for k, v in vars(args).items() if k not in _RUN_KEYS}
    manifest = RunManifest(command, config_path, cfg, cfg["seed"], recorded, inputs,
                           {k: str(v) for k, v in outputs.items()}, extra=extra)
    manifest.write(manifest_path(args.out))
    return manifest


def replay(path, redirect: str | None = None) -> RunManifest:
    m = RunManifest.read(_require(path, "manifest"))
    if m.command not in COMMANDS:
        raise CLIError(f"{path}: unknown command {m.command!r}")
    args = dict(m.args)
    if redirect:
        Path(redirect).mkdir(parents=True, exist_ok=True)
        args["out"] = str(Path(redirect) / Path(args["out"]).name)
    return execute(m.command, argparse.Namespace(**args), resolve(m.config), m.config_path)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "replay":
            replay(args.manifest, args.redirect)
        else:
            _absolute_paths(args)
            config_path = str(Path(args.config).resolve()) if args.config else None
            execute(args.command, args, _resolve_config(args), config_path)
    except (CLIError, ConfigError, ParseError, CheckpointError, TrainingError, OSError, ValueError) as exc:
        print(f"deskrank {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
