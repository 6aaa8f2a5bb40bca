"""Learnability experiment on the synthetic single-signal corpus.

The encoder is first pretrained with next-sequence prediction on chain
passages, using a short-to-long curriculum, then each ranker kind is
fine-tuned on the same 500 triples and scored on held-out candidate sets.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field


from .analysis import load_stopwords, most_influential_terms, rank_candidates
from .encoder import EncoderConfig, init_params
from .evaluation import evaluate_run
from .rankers import Ranker, RankerConfig
from .synthetic import SyntheticCorpus, chain_passages, make_corpus
from .tensor import Tensor
from .text import Vocabulary, build_vocab
from .training import PretrainConfig, TrainConfig, TrainResult, pretrain, train


@dataclass
class LearnabilityConfig:
    seed: int = 0
    hidden: int = 32
    heads: int = 4
    layers: int = 2
    max_len: int = 24
    init_std: float = 0.1
    # (extra random words per passage, max steps, target loss) per curriculum stage; a stage ends
    # early once a chunk's mean loss reaches its target, None runs the full budget
    curriculum: tuple[tuple[int, int, float | None], ...] = ((0, 12000, 0.15), (2, 2000, None), (5, 2000, None))
    chunk_steps: int = 500
    chain_size: int = 20000
    pretrain_batch: int = 16
    pretrain_lr: float = 1e-3
    finetune_lr: float = 3e-4
    max_steps: int = 2000
    validation_interval: int = 100
    patience: int = 5
    kinds: tuple[str, ...] = ("LastInt", "Rep")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LearnabilityResult:
    mrr: dict[str, float]
    train: dict[str, TrainResult]
    rankers: dict[str, Ranker]
    corpus: SyntheticCorpus
    vocab: Vocabulary
    pretrain_log: list = field(default_factory=list)
    seconds: float = 0.0


def corpus_vocab(sc: SyntheticCorpus) -> Vocabulary:
    texts = [f"{t.query} {t.positive} {t.negative}" for t in sc.triples]
    return build_vocab(texts + [t for _, t in sc.passages] + [cs.query for cs in sc.heldout + sc.validation_sets])


def pretrain_encoder(cfg: LearnabilityConfig, enc: EncoderConfig, vocab: Vocabulary, words: list[str]):
    params = init_params(enc, cfg.seed)
    heads: dict = {}
    log: list = []
    chunk = 0
    for stage, (n_random, max_steps, target) in enumerate(cfg.curriculum):
        passages = chain_passages(words, cfg.chain_size, n_random, seed=cfg.seed * 100 + stage)
        done = 0
        while done < max_steps:
            steps = min(cfg.chunk_steps, max_steps - done)
            pcfg = PretrainConfig(steps=steps, batch_size=cfg.pretrain_batch, learning_rate=cfg.pretrain_lr,
                                  mask_rate=0.0, max_len=cfg.max_len, seed=cfg.seed * 10_000 + chunk)
            part = pretrain(params, enc, vocab, passages, pcfg, heads=heads)
            log += [(len(log) + i + 1, f"stage{stage}", loss) for i, (_, _, loss) in enumerate(part)]
            done += steps
            chunk += 1
            if target is not None and sum(x[2] for x in part) / len(part) <= target:
                break
    return params, log


def run_learnability(cfg: LearnabilityConfig | None = None) -> LearnabilityResult:
    cfg = cfg or LearnabilityConfig()
    start = time.perf_counter()
    sc = make_corpus(cfg.seed)
    vocab = corpus_vocab(sc)
    enc = EncoderConfig(layers=cfg.layers, hidden=cfg.hidden, heads=cfg.heads, ff_dim=2 * cfg.hidden,
                        max_positions=cfg.max_len, vocab_size=len(vocab), init_std=cfg.init_std)
    params, plog = pretrain_encoder(cfg, enc, vocab, sc.words)
    mrr, results, rankers = {}, {}, {}
    for kind in cfg.kinds:
        # every kind starts from its own copy of the same pretrained encoder
        own = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in params.items()}
        ranker = Ranker.create(RankerConfig(kind=kind, max_len=cfg.max_len), enc, vocab, seed=cfg.seed,
                               encoder_params=own)
        tcfg = TrainConfig(learning_rate=cfg.finetune_lr, max_steps=cfg.max_steps,
                           validation_interval=cfg.validation_interval, patience=cfg.patience, seed=cfg.seed)
        results[kind] = train(ranker, sc.triples, sc.validation, tcfg)
        mrr[kind] = evaluate_run(rank_candidates(ranker, sc.heldout), sc.qrels, "mrr@10").mean
        rankers[kind] = ranker
    return LearnabilityResult(mrr, results, rankers, sc, vocab, plog, time.perf_counter() - start)


def key_term_first_rate(ranker: Ranker, sc: SyntheticCorpus) -> float:
    """Fraction of held-out (query, relevant passage) pairs whose top influence term is the key."""
    stopwords = load_stopwords()
    hits = total = 0
    for cs in sc.heldout:
        key = sc.key_terms[cs.query_id]
        for c in cs.docs:
            if sc.qrels.grades.get((cs.query_id, c.doc_id), 0) <= 0:
                continue
            top = most_influential_terms(cs.query.split(), c.text.split(), ranker, top_n=1, stopwords=stopwords)
            hits += bool(top) and top[0][0] == key
            total += 1
    return hits / total if total else 0.0
