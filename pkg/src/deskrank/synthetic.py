"""Synthetic single-signal ranking data.

A passage is relevant to a query iff it contains the query's key term, so a
scorer has to compare the two sequences to rank well.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .text import Candidate, CandidateSet, QrelSet, TripleRecord, write_candidates, write_qrels
from .training import LabeledPair

QUERY_STOPWORDS = ("what", "is", "the", "a", "of", "how", "does", "where")
FILLER_STOPWORDS = ("the", "a", "of", "and", "in", "to", "is", "for", "on", "with", "as", "by")


@dataclass
class SyntheticCorpus:
    words: list[str]
    triples: list[TripleRecord]
    validation: list[LabeledPair]
    validation_sets: list[CandidateSet]
    validation_qrels: QrelSet
    heldout: list[CandidateSet]
    qrels: QrelSet
    passages: list[tuple[str, str]]  # (doc id, text) for every passage generated
    key_terms: dict[str, str]  # held-out query id -> key term


def _content_words(vocab_size: int) -> list[str]:
    n = vocab_size - len(set(QUERY_STOPWORDS) | set(FILLER_STOPWORDS))
    return [f"w{i:03d}" for i in range(n)]


def _passage(rng, words, length, include=None, exclude=None):
    pool = [w for w in words if w != exclude]
    toks = list(rng.choice(pool, size=length, replace=True))
    if include is not None:
        toks[int(rng.integers(length))] = include
    for _ in range(int(rng.integers(1, 3))):
        toks.insert(int(rng.integers(len(toks) + 1)), str(rng.choice(FILLER_STOPWORDS)))
    return " ".join(toks)


def _query(rng, key):
    lead = list(rng.choice(QUERY_STOPWORDS, size=2, replace=False))
    return " ".join(lead + [key])


def make_corpus(seed: int = 0, vocab_size: int = 200, n_train: int = 500, n_val_queries: int = 20,
                n_heldout: int = 50, n_candidates: int = 10, passage_len: tuple[int, int] = (5, 8),
                n_key_terms: int = 20) -> SyntheticCorpus:
    """Key terms come from the first ``n_key_terms`` content words; the rest are filler."""
    rng = np.random.default_rng(seed)
    words = _content_words(vocab_size)
    key_pool = words[:n_key_terms]
    passages: list[tuple[str, str]] = []

    def length():
        return int(rng.integers(passage_len[0], passage_len[1] + 1))

    # every negative is some other triple's positive, so passage identity alone carries no label signal
    keys = [str(k) for k in rng.choice(key_pool, size=n_train)]
    positives = [_passage(rng, words, length(), include=k) for k in keys]
    triples = []
    for i, key in enumerate(keys):
        while True:
            j = int(rng.integers(n_train))
            if j != i and key not in positives[j].split():
                break
        triples.append(TripleRecord(_query(rng, key), positives[i], positives[j]))

    def candidate_sets(n_queries, prefix):
        sets, grades, keys = [], {}, {}
        for qi in range(n_queries):
            qid = f"{prefix}{qi}"
            key = str(rng.choice(key_pool))
            keys[qid] = key
            rel = int(rng.integers(n_candidates))
            docs = []
            for c in range(n_candidates):
                did = f"{qid}_d{c}"
                text = _passage(rng, words, length(), include=key if c == rel else None,
                                exclude=None if c == rel else key)
                docs.append(Candidate(did, text))
                passages.append((did, text))
                grades[(qid, did)] = 1 if c == rel else 0
            sets.append(CandidateSet(qid, _query(rng, key), docs))
        return sets, grades, keys

    val_sets, val_grades, _ = candidate_sets(n_val_queries, "v")
    validation = [LabeledPair(cs.query_id, cs.query.split(), c.text.split(), val_grades[(cs.query_id, c.doc_id)])
                  for cs in val_sets for c in cs.docs]
    heldout, grades, keys = candidate_sets(n_heldout, "q")
    return SyntheticCorpus(words, triples, validation, val_sets, QrelSet(val_grades, gmax=1), heldout,
                           QrelSet(grades, gmax=1), passages, keys)


def write_toy_corpus(out_dir, seed: int = 0, **kwargs) -> dict[str, Path]:
    """Write corpus, queries, triples, qrels and dev candidates in the interchange formats."""
    sc = make_corpus(seed, **kwargs)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / fname for name, fname in (
        ("corpus", "corpus.tsv"), ("queries", "queries.tsv"), ("triples", "triples.tsv"),
        ("qrels", "qrels.txt"), ("dev_candidates", "dev_candidates.tsv"))}
    paths["corpus"].write_text("".join(f"{d}\t{t}\n" for d, t in sc.passages), encoding="utf-8")
    paths["queries"].write_text("".join(f"{cs.query_id}\t{cs.query}\n" for cs in sc.heldout), encoding="utf-8")
    paths["triples"].write_text("".join(f"{t.query}\t{t.positive}\t{t.negative}\n" for t in sc.triples),
                                encoding="utf-8")
    write_qrels(QrelSet({**sc.validation_qrels.grades, **sc.qrels.grades}, gmax=1), paths["qrels"])
    write_candidates(sc.validation_sets, paths["dev_candidates"])
    return paths


def chain_passages(words: list[str], n_passages: int, n_random: int, seed: int = 0) -> list[str]:
    """Passages where neighbours i and i+1 share exactly one planted word.

    Next-sequence pretraining on these rewards detecting a term shared across
    the two segments; ``n_random`` extra words per passage set the difficulty.
    """
    rng = np.random.default_rng(seed)
    chain = [str(w) for w in rng.choice(words, size=n_passages + 1)]
    out = []
    for i in range(n_passages):
        toks = [str(w) for w in rng.choice(words, size=n_random)]
        toks.insert(int(rng.integers(n_random + 1)), chain[i])
        toks.insert(int(rng.integers(n_random + 2)), chain[i + 1])
        out.append(" ".join(toks))
    return out
