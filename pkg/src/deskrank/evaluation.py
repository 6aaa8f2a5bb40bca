"""Ranking metrics, run evaluation and paired permutation tests."""
from __future__ import annotations

import csv
import itertools
import logging
import math
import re
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .atomic import atomic_open
from .text import QrelSet, RunEntry

logger = logging.getLogger(__name__)


@dataclass
class RankedList:
    query_id: str
    doc_ids: list[str]
    scores: list[float]

    @classmethod
    def from_scores(cls, query_id: str, scored: Iterable[tuple[str, float]]) -> RankedList:
        """Order by descending score, ties by doc id; duplicate doc ids are rejected."""
        items = sorted(scored, key=lambda x: (-x[1], x[0]))
        ids = [d for d, _ in items]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate doc ids in ranking for query {query_id}")
        return cls(query_id, ids, [s for _, s in items])


@dataclass
class MetricReport:
    metric: str
    per_query: dict[str, float]

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.per_query.values()))) if self.per_query else 0.0

    def values(self) -> list[float]:
        return [self.per_query[q] for q in sorted(self.per_query)]

    def write_csv(self, path) -> None:
        with atomic_open(path, newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["qid", "value"])
            for q in sorted(self.per_query):
                w.writerow([q, repr(self.per_query[q])])
            w.writerow(["all", repr(self.mean)])


def _judgments(ranked: RankedList, qrels: QrelSet) -> dict[str, int] | None:
    judged = qrels.for_query(ranked.query_id)
    if not judged:
        logger.warning("query %s has no relevance judgments; scoring 0", ranked.query_id)
        return None
    return judged


def mrr_at_k(ranked: RankedList, qrels: QrelSet, k: int = 10) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    judged = _judgments(ranked, qrels)
    if judged is None:
        return 0.0
    for rank, doc in enumerate(ranked.doc_ids[:k], 1):
        if judged.get(doc, 0) > 0:
            return 1.0 / rank
    return 0.0


def dcg(grades: Sequence[int]) -> float:
    return sum((2.0 ** g - 1.0) / math.log2(r + 1) for r, g in enumerate(grades, 1))


def ndcg_at_k(ranked: RankedList, qrels: QrelSet, k: int = 20) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    judged = _judgments(ranked, qrels)
    if judged is None:
        return 0.0
    ideal = dcg(sorted((g for g in judged.values() if g > 0), reverse=True)[:k])
    if ideal == 0.0:
        return 0.0
    return dcg([judged.get(d, 0) for d in ranked.doc_ids[:k]]) / ideal


def err_at_k(ranked: RankedList, qrels: QrelSet, k: int = 20, gmax: int | None = None) -> float:
    """Cascade expected reciprocal rank with stop probability ``(2^g - 1) / 2^gmax``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    judged = _judgments(ranked, qrels)
    if judged is None:
        return 0.0
    gmax = qrels.gmax if gmax is None else gmax
    scale = 2.0 ** gmax
    total, reach = 0.0, 1.0
    for rank, doc in enumerate(ranked.doc_ids[:k], 1):
        g = judged.get(doc, 0)
        if g > gmax:
            raise ValueError(f"grade {g} exceeds gmax {gmax}")
        stop = (2.0 ** g - 1.0) / scale
        total += reach * stop / rank
        reach *= 1.0 - stop
    return total


METRICS = {"mrr": mrr_at_k, "ndcg": ndcg_at_k, "err": err_at_k}
_SPEC = re.compile(r"^(mrr|ndcg|err)@(\d+)$")


def parse_metric(spec: str) -> tuple[str, int]:
    m = _SPEC.match(spec.strip().lower())
    if not m:
        raise ValueError(f"unknown metric {spec!r}; expected mrr@k, ndcg@k or err@k")
    return m.group(1), int(m.group(2))


def run_to_lists(run: Iterable[RunEntry]) -> dict[str, RankedList]:
    grouped: dict[str, list[tuple[str, float]]] = defaultdict(list)
    for e in run:
        grouped[e.query_id].append((e.doc_id, e.score))
    return {q: RankedList.from_scores(q, items) for q, items in grouped.items()}


def evaluate_run(run: Iterable[RunEntry] | dict[str, RankedList], qrels: QrelSet, metric: str) -> MetricReport:
    """Per-query metric values; judged queries missing from the run score 0."""
    name, k = parse_metric(metric)
    lists = run if isinstance(run, dict) else run_to_lists(run)
    fn = METRICS[name]
    per_query = {q: fn(lst, qrels, k) for q, lst in lists.items()}
    for q in qrels.query_ids():
        per_query.setdefault(q, 0.0)
    return MetricReport(f"{name}@{k}", per_query)


# ---------------------------------------------------------------- significance

EXACT_MAX_QUERIES = 12


def permutation_test(a: Sequence[float], b: Sequence[float], n_perm: int = 100_000, seed: int = 0,
                     exact: bool | None = None) -> float:
    """Two-sided paired sign-flip randomization test on the mean difference.

    With ``exact`` unset, all ``2^n`` sign patterns are enumerated when
    ``n <= 12``; otherwise ``n_perm`` random patterns are drawn and the
    p-value is add-one smoothed.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired vectors must have equal length, got {a.shape} and {b.shape}")
    if n_perm < 1:
        raise ValueError("n_perm must be >= 1")
    n = len(a)
    if n == 0:
        return 1.0
    diff = a - b
    observed = abs(diff.mean())
    tol = 1e-12 * max(1.0, float(np.abs(diff).max()))
    if exact is None:
        exact = n <= EXACT_MAX_QUERIES
    if exact:
        signs = np.array(list(itertools.product((1.0, -1.0), repeat=n)))
        means = np.abs(signs @ diff) / n
        return float(np.count_nonzero(means >= observed - tol)) / len(signs)
    rng = np.random.default_rng(seed)
    hits, done = 0, 0
    while done < n_perm:
        chunk = min(20_000, n_perm - done)
        signs = rng.integers(0, 2, size=(chunk, n)) * 2.0 - 1.0
        hits += int(np.count_nonzero(np.abs(signs @ diff) / n >= observed - tol))
        done += chunk
    return (1.0 + hits) / (1.0 + n_perm)


def write_significance(path, metric: str, mean_a: float, mean_b: float, p_value: float) -> None:
    with atomic_open(path, newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "mean_a", "mean_b", "p_value"])
        w.writerow([metric, repr(mean_a), repr(mean_b), repr(p_value)])
