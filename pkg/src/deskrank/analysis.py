"""Attention allocation by token group, term-removal influence, marker ablation."""
from __future__ import annotations

import csv
import enum
import logging
import zlib
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable, Iterable, Sequence

import numpy as np

from .atomic import atomic_open
from .encoder import EncoderOutput
from .evaluation import MetricReport, RankedList, evaluate_run, permutation_test
from .text import CLS, PAD, SEP, CandidateSet, QrelSet, TokenSequence, Vocabulary, tokenize

logger = logging.getLogger(__name__)

ATTENTION_METADATA = {"direction": "sender", "head_aggregation": "mean",
                      "above_average_threshold": "group_size / real_length", "majority_threshold": 0.5}


# masses summed in floating point can exceed an exactly-met threshold by rounding
SHARE_TOL = 1e-12


class TokenGroup(str, enum.Enum):
    MARKER = "Marker"
    STOPWORD = "Stopword"
    REGULAR = "Regular"


def load_stopwords() -> frozenset[str]:
    text = resources.files("deskrank").joinpath("data/stopwords.txt").read_text(encoding="utf-8")
    return frozenset(w.strip() for w in text.splitlines() if w.strip())


def classify_tokens(seq: TokenSequence, vocab: Vocabulary, stopwords: Iterable[str]) -> list[TokenGroup | None]:
    """Group per position; padding positions get ``None``."""
    stop = stopwords if isinstance(stopwords, (set, frozenset)) else set(stopwords)
    out: list[TokenGroup | None] = []
    for tid, real in zip(seq.ids, seq.mask):
        if not real or tid == PAD:
            out.append(None)
        elif tid in (CLS, SEP):
            out.append(TokenGroup.MARKER)
        elif vocab.tokens[tid] in stop:
            out.append(TokenGroup.STOPWORD)
        else:
            out.append(TokenGroup.REGULAR)
    return out


@dataclass
class AttentionShareReport:
    # layer -> group -> [count above average, count majority]
    counts: dict[int, dict[TokenGroup, list[int]]] = field(default_factory=dict)
    group_totals: dict[TokenGroup, int] = field(default_factory=lambda: {g: 0 for g in TokenGroup})
    n_tokens: int = 0
    metadata: dict = field(default_factory=lambda: dict(ATTENTION_METADATA))

    def merge(self, other: AttentionShareReport) -> AttentionShareReport:
        for layer, by_group in other.counts.items():
            mine = self.counts.setdefault(layer, {g: [0, 0] for g in TokenGroup})
            for g, (above, major) in by_group.items():
                mine[g][0] += above
                mine[g][1] += major
        for g, n in other.group_totals.items():
            self.group_totals[g] += n
        self.n_tokens += other.n_tokens
        return self

    def rows(self) -> list[tuple[int, str, int, int, int]]:
        return [(layer, g.value, c[0], c[1], self.group_totals[g])
                for layer in sorted(self.counts) for g, c in self.counts[layer].items()]

    def write_csv(self, path) -> None:
        with atomic_open(path, newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["layer", "group", "count_above_average", "count_majority", "group_size_total"])
            w.writerows(self.rows())


def group_masses(attn: np.ndarray, groups: Sequence[TokenGroup | None]) -> dict[TokenGroup, np.ndarray]:
    """Head-averaged outgoing attention mass from each real sender into each group."""
    mean_attn = attn.mean(axis=0) if attn.ndim == 3 else attn
    real = np.array([g is not None for g in groups])
    out = {}
    for g in TokenGroup:
        cols = np.array([x is g for x in groups])
        out[g] = mean_attn[real][:, cols].sum(axis=1)
    return out


def attention_group_shares(output: EncoderOutput, groups: Sequence[TokenGroup | None]) -> AttentionShareReport:
    """Count senders whose attention to a group beats the uniform share or a majority.

    Layers are numbered from 1; ``output.attention[k - 1]`` is ``[heads, T, T]``.
    """
    n_real = sum(g is not None for g in groups)
    report = AttentionShareReport(n_tokens=n_real)
    for g in groups:
        if g is not None:
            report.group_totals[g] += 1
    sizes = {g: sum(x is g for x in groups) for g in TokenGroup}
    for k, attn in enumerate(output.attention, 1):
        masses = group_masses(np.asarray(attn), groups)
        report.counts[k] = {
            g: [int(np.count_nonzero(masses[g] > sizes[g] / n_real + SHARE_TOL)),
                int(np.count_nonzero(masses[g] > 0.5 + SHARE_TOL))]
            for g in TokenGroup
        }
    return report


# ---------------------------------------------------------------- term influence

Scorer = Callable[[list[str], list[list[str]]], np.ndarray]


def _as_scorer(scorer) -> Scorer:
    return scorer.score if hasattr(scorer, "score") else scorer


@dataclass
class InfluenceRecord:
    query_id: str
    doc_id: str
    term: str
    position: int
    original_score: float
    removed_score: float

    @property
    def delta(self) -> float:
        return self.original_score - self.removed_score


def regular_positions(d_tokens: Sequence[str], stopwords: Iterable[str]) -> list[int]:
    stop = set(stopwords)
    return [i for i, t in enumerate(d_tokens) if t not in stop]


def pair_rng(seed: int, query_id: str, doc_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(f"{query_id}\t{doc_id}".encode("utf-8"))])


def term_influence(q_tokens: list[str], d_tokens: list[str], scorer, seed: int = 0, mode: str = "random-one",
                   stopwords: Iterable[str] | None = None, query_id: str = "", doc_id: str = "") -> list[InfluenceRecord]:
    """Re-score the document with single Regular-token occurrences removed."""
    stopwords = load_stopwords() if stopwords is None else stopwords
    positions = regular_positions(d_tokens, stopwords)
    if not positions:
        logger.warning("document %s has no regular tokens; no influence records", doc_id)
        return []
    if mode == "random-one":
        positions = [positions[int(pair_rng(seed, query_id, doc_id).integers(len(positions)))]]
    elif mode != "exhaustive":
        raise ValueError(f"unknown influence mode {mode!r}")
    variants = [list(d_tokens)] + [d_tokens[:i] + d_tokens[i + 1:] for i in positions]
    scores = np.asarray(_as_scorer(scorer)(list(q_tokens), variants), dtype=float)
    return [InfluenceRecord(query_id, doc_id, d_tokens[i], i, float(scores[0]), float(s))
            for i, s in zip(positions, scores[1:])]


def most_influential_terms(q_tokens: list[str], d_tokens: list[str], scorer, top_n: int = 5,
                           stopwords: Iterable[str] | None = None, records: list[InfluenceRecord] | None = None
                           ) -> list[tuple[str, float]]:
    if records is None:
        records = term_influence(q_tokens, d_tokens, scorer, mode="exhaustive", stopwords=stopwords)
    ranked = sorted(((r.term, abs(r.delta)) for r in records), key=lambda x: (-x[1], x[0]))
    return ranked[:top_n]


def emit_scatter(records: Sequence[InfluenceRecord], path) -> None:
    if not records:
        raise ValueError("no influence records to write")
    with atomic_open(path, newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["qid", "docid", "term", "original_score", "removed_score"])
        for r in records:
            w.writerow([r.query_id, r.doc_id, r.term, repr(r.original_score), repr(r.removed_score)])


def read_scatter(path) -> list[InfluenceRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [InfluenceRecord(row["qid"], row["docid"], row["term"], -1,
                                float(row["original_score"]), float(row["removed_score"]))
                for row in csv.DictReader(fh)]


def write_influential_terms(rows: Iterable[tuple[str, str, int, str, float]], path) -> None:
    with atomic_open(path, newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["qid", "docid", "rank", "term", "abs_delta"])
        for qid, did, rank, term, delta in rows:
            w.writerow([qid, did, rank, term, repr(float(delta))])


# ---------------------------------------------------------------- marker ablation

@dataclass
class AblationReport:
    with_markers: MetricReport
    without_markers: MetricReport
    p_value: float
    mode: str


def rank_candidates(ranker, sets: Iterable[CandidateSet], markers: str = "all") -> dict[str, RankedList]:
    out = {}
    for cs in sets:
        q = tokenize(cs.query)
        scores = ranker.score(q, [tokenize(c.text) for c in cs.docs], markers=markers)
        out[cs.query_id] = RankedList.from_scores(cs.query_id, [(c.doc_id, float(s)) for c, s in zip(cs.docs, scores)])
    return out


def marker_ablation(sets: Sequence[CandidateSet], qrels: QrelSet, ranker, metric: str = "mrr@10",
                    mode: str = "cls", n_perm: int = 100_000, seed: int = 0) -> AblationReport:
    """Compare a metric with all markers against ``mode`` = ``"cls"`` (SEP dropped) or ``"none"``."""
    if mode not in ("cls", "none"):
        raise ValueError("marker ablation mode must be 'cls' or 'none'")
    base = evaluate_run(rank_candidates(ranker, sets, "all"), qrels, metric)
    ablated = evaluate_run(rank_candidates(ranker, sets, mode), qrels, metric)
    qids = sorted(base.per_query)
    p = permutation_test([base.per_query[q] for q in qids], [ablated.per_query[q] for q in qids], n_perm, seed)
    return AblationReport(base, ablated, p, mode)
