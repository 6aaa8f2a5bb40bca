"""Word tokenization, vocabulary, sequence encoding, file formats and BM25."""
from __future__ import annotations

import logging
import math
import string
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .atomic import atomic_open, atomic_write_text

logger = logging.getLogger(__name__)

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
RESERVED = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
MARKER_IDS = frozenset({CLS, SEP})

_PUNCT = string.punctuation


class ParseError(ValueError):
    """Malformed input file; the message names the file and line."""


class ConfigError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, strip ASCII punctuation at token edges."""
    out = []
    for raw in text.lower().split():
        tok = raw.strip(_PUNCT)
        if tok:
            out.append(tok)
    return out


@dataclass
class Vocabulary:
    tokens: list[str]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[: len(RESERVED)]) != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate vocabulary entries")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self.index.get(token, UNK)

    def ids(self, tokens: Iterable[str]) -> list[int]:
        return [self.index.get(t, UNK) for t in tokens]

    def save(self, path) -> None:
        atomic_write_text(path, "".join(t + "\n" for t in self.tokens[len(RESERVED):]))

    @classmethod
    def load(cls, path) -> Vocabulary:
        words = [line.rstrip("\n") for line in Path(path).read_text(encoding="utf-8").splitlines()]
        return cls(list(RESERVED) + [w for w in words if w])


def build_vocab(corpus: Iterable[str], min_count: int = 1, max_size: int | None = None) -> Vocabulary:
    """Keep tokens seen at least ``min_count`` times, most frequent first.

    Ties are broken lexicographically. ``max_size`` counts the reserved ids.
    """
    counts: Counter[str] = Counter()
    n_docs = 0
    for text in corpus:
        n_docs += 1
        counts.update(tokenize(text))
    if n_docs == 0:
        raise ParseError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_count and t not in RESERVED),
                  key=lambda t: (-counts[t], t))
    if max_size is not None:
        kept = kept[: max(0, max_size - len(RESERVED))]
    return Vocabulary(list(RESERVED) + kept)


@dataclass
class TokenSequence:
    ids: list[int]
    segments: list[int]
    mask: list[int]
    # position -> index of the source word within its side (query or document)
    origin_spans: dict[int, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n_real(self) -> int:
        return sum(self.mask)


def _pad(ids, segments, origin, max_len) -> TokenSequence:
    n = len(ids)
    return TokenSequence(ids + [PAD] * (max_len - n), segments + [0] * (max_len - n),
                         [1] * n + [0] * (max_len - n), origin)


def encode_pair(q_tokens: list[str], d_tokens: list[str], vocab: Vocabulary, max_len: int = 128,
                markers: str = "all") -> TokenSequence:
    """``[CLS] q [SEP] d [SEP]`` padded to ``max_len``.

    Overlong input drops document tail first, then query tail. ``markers``
    selects ablations: ``"all"`` (default), ``"cls"`` (no SEP), ``"none"``.
    """
    if max_len < 4:
        raise ConfigError(f"max_len must be >= 4, got {max_len}")
    if markers not in ("all", "cls", "none"):
        raise ConfigError(f"unknown marker mode {markers!r}")
    use_cls = markers != "none"
    n_sep = 2 if markers == "all" else 0
    budget = max_len - n_sep - int(use_cls)
    q = list(q_tokens)[:budget]
    d = list(d_tokens)[: max(0, budget - len(q))]
    ids, segs, origin = [], [], {}
    if use_cls:
        ids.append(CLS)
        segs.append(0)
    for i, t in enumerate(q):
        origin[len(ids)] = i
        ids.append(vocab.id(t))
        segs.append(0)
    if n_sep:
        ids.append(SEP)
        segs.append(0)
    for j, t in enumerate(d):
        origin[len(ids)] = j
        ids.append(vocab.id(t))
        segs.append(1)
    if n_sep:
        ids.append(SEP)
        segs.append(1)
    return _pad(ids, segs, origin, max_len)


def encode_single(tokens: list[str], vocab: Vocabulary, max_len: int = 128) -> TokenSequence:
    if max_len < 4:
        raise ConfigError(f"max_len must be >= 4, got {max_len}")
    body = list(tokens)[: max_len - 2]
    ids = [CLS] + vocab.ids(body) + [SEP]
    origin = {i + 1: i for i in range(len(body))}
    return _pad(ids, [0] * len(ids), origin, max_len)


# ---------------------------------------------------------------- file formats

@dataclass
class TripleRecord:
    query: str
    positive: str
    negative: str


@dataclass
class Candidate:
    doc_id: str
    text: str
    score: float = 0.0


@dataclass
class CandidateSet:
    query_id: str
    query: str
    docs: list[Candidate]


@dataclass
class QrelSet:
    grades: dict[tuple[str, str], int]
    gmax: int | None = None

    def __post_init__(self):
        if self.gmax is None:
            self.gmax = max([1, *self.grades.values()])
        bad = [g for g in self.grades.values() if g < 0 or g > self.gmax]
        if bad:
            raise ValueError(f"grade {bad[0]} outside [0, {self.gmax}]")

    def for_query(self, qid: str) -> dict[str, int]:
        return self.by_query().get(qid, {})

    def by_query(self) -> dict[str, dict[str, int]]:
        out: dict[str, dict[str, int]] = defaultdict(dict)
        for (q, d), g in self.grades.items():
            out[q][d] = g
        return dict(out)

    def query_ids(self) -> list[str]:
        return sorted({q for q, _ in self.grades})


def _lines(path) -> Iterator[tuple[int, str]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if line.strip():
                yield lineno, line


def load_triples(path) -> Iterator[TripleRecord]:
    for lineno, line in _lines(path):
        parts = line.split("\t")
        if len(parts) != 3 or not all(p.strip() for p in parts):
            raise ParseError(f"{path}:{lineno}: expected 3 non-empty tab-separated fields")
        yield TripleRecord(*parts)


def load_candidates(path, depth: int = 100) -> Iterator[CandidateSet]:
    """Group consecutive ``qid, docid, query, doc[, score]`` lines by qid."""
    current: CandidateSet | None = None
    seen: set[str] = set()
    for lineno, line in _lines(path):
        parts = line.split("\t")
        if len(parts) not in (4, 5):
            raise ParseError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
        qid, did, qtext, dtext = parts[:4]
        score = float(parts[4]) if len(parts) == 5 else 0.0
        if current is None or current.query_id != qid:
            if current is not None:
                yield current
            current = CandidateSet(qid, qtext, [])
            seen = set()
        if did in seen:
            raise ParseError(f"{path}:{lineno}: duplicate doc id {did} for query {qid}")
        seen.add(did)
        if len(current.docs) < depth:
            current.docs.append(Candidate(did, dtext, score))
    if current is not None:
        yield current


def write_candidates(sets: Iterable[CandidateSet], path) -> None:
    with atomic_open(path) as fh:
        for cs in sets:
            for c in cs.docs:
                fh.write(f"{cs.query_id}\t{c.doc_id}\t{cs.query}\t{c.text}\n")


def load_qrels(path, gmax: int | None = None) -> QrelSet:
    grades: dict[tuple[str, str], int] = {}
    for lineno, line in _lines(path):
        parts = line.split()
        if len(parts) != 4:
            raise ParseError(f"{path}:{lineno}: expected 'qid 0 docid grade'")
        try:
            grade = int(parts[3])
        except ValueError:
            raise ParseError(f"{path}:{lineno}: grade {parts[3]!r} is not an integer") from None
        key = (parts[0], parts[2])
        if key in grades:
            logger.warning("%s:%d: duplicate judgment for %s/%s, keeping the last", path, lineno, *key)
        grades[key] = grade
    return QrelSet(grades, gmax)


def write_qrels(qrels: QrelSet, path) -> None:
    with atomic_open(path) as fh:
        for (q, d), g in qrels.grades.items():
            fh.write(f"{q} 0 {d} {g}\n")


@dataclass
class RunEntry:
    query_id: str
    doc_id: str
    rank: int
    score: float
    tag: str


def load_run(path) -> list[RunEntry]:
    out = []
    for lineno, line in _lines(path):
        parts = line.split()
        if len(parts) != 6:
            raise ParseError(f"{path}:{lineno}: expected 'qid Q0 docid rank score runtag'")
        try:
            out.append(RunEntry(parts[0], parts[2], int(parts[3]), float(parts[4]), parts[5]))
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from None
    return out


def format_run_line(e: RunEntry) -> str:
    return f"{e.query_id} Q0 {e.doc_id} {e.rank} {e.score!r} {e.tag}\n"


def write_run(entries: Iterable[RunEntry], path) -> None:
    with atomic_open(path) as fh:
        for e in entries:
            fh.write(format_run_line(e))


def load_corpus(path) -> Iterator[tuple[str, str]]:
    for lineno, line in _lines(path):
        parts = line.split("\t", 1)
        if len(parts) != 2:
            raise ParseError(f"{path}:{lineno}: expected 'docid<TAB>text'")
        yield parts[0], parts[1]


load_queries = load_corpus


# ---------------------------------------------------------------- BM25

class BM25Index:
    """In-memory inverted index over a ``(doc_id, text)`` collection."""

    def __init__(self, docs: Iterable[tuple[str, str]]):
        self.doc_ids: list[str] = []
        self.texts: dict[str, str] = {}
        self.lengths: list[int] = []
        self.postings: dict[str, list[tuple[int, int]]] = defaultdict(list)
        for doc_id, text in docs:
            toks = tokenize(text)
            ix = len(self.doc_ids)
            self.doc_ids.append(doc_id)
            self.texts[doc_id] = text
            self.lengths.append(len(toks))
            for term, tf in sorted(Counter(toks).items()):
                self.postings[term].append((ix, tf))
        self.n_docs = len(self.doc_ids)
        self.avgdl = (sum(self.lengths) / self.n_docs) if self.n_docs else 0.0

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        return math.log((self.n_docs - df + 0.5) / (df + 0.5) + 1.0)

    def scores(self, q_tokens: list[str], k1: float = 0.9, b: float = 0.4) -> dict[int, float]:
        acc: dict[int, float] = defaultdict(float)
        for term in q_tokens:
            plist = self.postings.get(term)
            if not plist:
                continue
            idf = self.idf(term)
            for ix, tf in plist:
                norm = k1 * (1.0 - b + b * self.lengths[ix] / self.avgdl)
                acc[ix] += idf * tf * (k1 + 1.0) / (tf + norm)
        return acc


def bm25_rank(q_tokens: list[str], index: BM25Index, k: int = 100, k1: float = 0.9, b: float = 0.4,
              query_id: str = "", query_text: str | None = None) -> CandidateSet:
    """Top-``k`` documents by BM25, ties broken by doc id."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    scored = index.scores(q_tokens, k1, b)
    order = sorted(scored.items(), key=lambda kv: (-kv[1], index.doc_ids[kv[0]]))[:k]
    docs = [Candidate(index.doc_ids[ix], index.texts[index.doc_ids[ix]], s) for ix, s in order]
    return CandidateSet(query_id, " ".join(q_tokens) if query_text is None else query_text, docs)


def ids_array(seqs: list[TokenSequence]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack sequences of equal length into ``(ids, segments, mask)`` int arrays."""
    return (np.array([s.ids for s in seqs], dtype=np.int64),
            np.array([s.segments for s in seqs], dtype=np.int64),
            np.array([s.mask for s in seqs], dtype=np.int64))
