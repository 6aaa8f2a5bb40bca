"""Scoring heads: four encoder-based rankers plus K-NRM and Conv-KNRM.

The batched ``*_parts`` functions operate on padded arrays and return
differentiable tensors; :class:`Ranker` wires tokenization, encoding and a
head together and is what training, reranking and analysis consume.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .encoder import EncoderConfig, EncoderOutput, Params, encode_arrays, init_params, truncated_normal
from .tensor import Tensor
from .text import (CLS, PAD, SEP, ConfigError, TokenSequence, Vocabulary, encode_pair, encode_single,
                   ids_array)

logger = logging.getLogger(__name__)

DEFAULT_MUS = (1.0, 0.9, 0.7, 0.5, 0.3, 0.1, -0.1, -0.3, -0.5, -0.7, -0.9)
DEFAULT_SIGMAS = (1e-3,) + (0.1,) * 10


class RankerKind(str, enum.Enum):
    REP = "Rep"
    LAST_INT = "LastInt"
    MULT_INT = "MultInt"
    TERM_TRANS = "TermTrans"
    KNRM = "KNRM"
    CONV_KNRM = "ConvKNRM"

    @property
    def uses_encoder(self) -> bool:
        return self not in (RankerKind.KNRM, RankerKind.CONV_KNRM)


@dataclass
class ScoreBreakdown:
    score: float
    layer_parts: dict[int, float] = field(default_factory=dict)
    layer_similarity: dict[int, float] = field(default_factory=dict)
    kernel_features: np.ndarray | None = None


@dataclass
class RankerConfig:
    kind: RankerKind = RankerKind.LAST_INT
    max_len: int = 128
    layer_range: tuple[int, int] | None = None  # inclusive; None means 1..L
    proj_dim: int | None = None  # Term-Trans projection width, None means hidden size
    term_trans_encoding: str = "concat"  # or "separate"
    kernel_mus: tuple[float, ...] = DEFAULT_MUS
    kernel_sigmas: tuple[float, ...] = DEFAULT_SIGMAS
    kernel_eps: float = 1e-10
    emb_dim: int = 64
    conv_filters: int = 128
    max_ngram: int = 2

    def __post_init__(self):
        self.kind = RankerKind(self.kind)
        if self.layer_range is not None:
            self.layer_range = tuple(self.layer_range)
        self.kernel_mus = tuple(self.kernel_mus)
        self.kernel_sigmas = tuple(self.kernel_sigmas)
        if len(self.kernel_mus) != len(self.kernel_sigmas) or min(self.kernel_sigmas) <= 0:
            raise ConfigError("kernel bank needs matching mus/sigmas with sigma > 0")
        if self.term_trans_encoding not in ("concat", "separate"):
            raise ConfigError(f"term_trans_encoding must be concat or separate, not {self.term_trans_encoding!r}")
        if self.max_ngram < 1:
            raise ConfigError("max_ngram must be >= 1")

    def layers(self, n_layers: int) -> list[int]:
        lo, hi = self.layer_range or (1, n_layers)
        if lo > hi:
            raise ConfigError(f"empty layer range {self.layer_range}")
        if lo < 1 or hi > n_layers:
            raise ConfigError(f"layer range {self.layer_range} outside 1..{n_layers}")
        return list(range(lo, hi + 1))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        return d


# ---------------------------------------------------------------- encoder heads

def _cls(out: EncoderOutput, k: int) -> Tensor:
    return out.hidden[k][:, 0, :]


def rep_parts(q_out: EncoderOutput, d_out: EncoderOutput) -> Tensor:
    last = q_out.n_layers
    return T.cosine(_cls(q_out, last), _cls(d_out, last))


def last_int_parts(out: EncoderOutput, w: Tensor) -> Tensor:
    return _cls(out, out.n_layers) @ w


def mult_int_parts(out: EncoderOutput, head: Params, layers: list[int]) -> dict[int, Tensor]:
    return {k: _cls(out, k) @ head[f"head/w_mult/{k}"] for k in layers}


def content_masks(ids: np.ndarray, segments: np.ndarray, mask: np.ndarray):
    """Query-side and document-side real, non-marker positions."""
    content = (mask > 0) & (ids != CLS) & (ids != SEP)
    return content & (segments == 0), content & (segments == 1)


def layer_similarity(q_states: Tensor, d_states: Tensor, q_mask: np.ndarray, d_mask: np.ndarray,
                     proj: Tensor) -> Tensor:
    """Mean all-pairs cosine of relu-projected query/document states, one value per batch row."""
    qp = T.l2_normalize(T.relu(q_states @ proj))
    dp = T.l2_normalize(T.relu(d_states @ proj))
    sims = qp @ T.swapaxes(dp, -1, -2)
    pair_mask = q_mask[:, :, None].astype(float) * d_mask[:, None, :]
    n_pairs = pair_mask.sum(axis=(1, 2))
    total = (sims * pair_mask).sum(axis=(1, 2))
    return total * (1.0 / np.where(n_pairs > 0, n_pairs, 1.0))


def term_trans_parts(q_out: EncoderOutput, d_out: EncoderOutput, q_mask: np.ndarray, d_mask: np.ndarray,
                     head: Params, layers: list[int]) -> dict[int, Tensor]:
    if not (q_mask.any(axis=1) & d_mask.any(axis=1)).all():
        logger.warning("Term-Trans input with an empty query or document side scores 0")
    return {k: layer_similarity(q_out.hidden[k], d_out.hidden[k], q_mask, d_mask, head[f"head/P/{k}"])
            for k in layers}


# ---------------------------------------------------------------- kernel pooling

def kernel_pool(sim: Tensor, q_mask: np.ndarray, d_mask: np.ndarray, mus, sigmas, eps: float = 1e-10) -> Tensor:
    """Soft-match features ``[B, K]`` from a similarity tensor ``[B, m, n]``."""
    B = sim.shape[0]
    n_k = len(mus)
    if sim.shape[1] == 0 or sim.shape[2] == 0:
        return Tensor(np.zeros((B, n_k)))
    mus = np.asarray(mus, dtype=float)[None, :, None, None]
    inv2s2 = 1.0 / (2.0 * np.asarray(sigmas, dtype=float) ** 2)[None, :, None, None]
    diff = T.reshape(sim, (B, 1) + sim.shape[1:]) - mus
    kern = T.exp(diff * diff * (-inv2s2)) * d_mask[:, None, None, :].astype(float)
    soft_tf = kern.sum(axis=3)
    logs = T.log(T.clamp_min(soft_tf, eps)) * q_mask[:, None, :].astype(float)
    valid = (q_mask.any(axis=1) & d_mask.any(axis=1)).astype(float)[:, None]
    return logs.sum(axis=2) * valid


def pad_ids(seqs: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    width = max([1, *(len(s) for s in seqs)])
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


def knrm_parts(q_ids: np.ndarray, q_mask: np.ndarray, d_ids: np.ndarray, d_mask: np.ndarray, head: Params,
               mus, sigmas, eps: float = 1e-10) -> tuple[Tensor, Tensor]:
    emb = head["head/embedding"]
    sim = T.cosine_matrix(T.embedding(emb, q_ids), T.embedding(emb, d_ids))
    phi = kernel_pool(sim, q_mask, d_mask, mus, sigmas, eps)
    return T.tanh(phi @ head["head/out_w"] + head["head/out_b"]), phi


def ngram_states(emb: Tensor, mask: np.ndarray, head: Params, n: int) -> tuple[Tensor, np.ndarray]:
    windows = T.unfold(emb, n)
    if windows.shape[1] == 0:
        return windows, np.zeros((emb.shape[0], 0), dtype=bool)
    states = T.relu(windows @ head[f"head/conv{n}_w"] + head[f"head/conv{n}_b"])
    return states, mask[:, n - 1:]


def conv_knrm_parts(q_ids, q_mask, d_ids, d_mask, head: Params, mus, sigmas, max_ngram: int,
                    eps: float = 1e-10) -> tuple[Tensor, Tensor]:
    table = head["head/embedding"]
    q_emb, d_emb = T.embedding(table, q_ids), T.embedding(table, d_ids)
    qs = [ngram_states(q_emb, q_mask, head, n) for n in range(1, max_ngram + 1)]
    ds = [ngram_states(d_emb, d_mask, head, n) for n in range(1, max_ngram + 1)]
    feats = []
    for q_states, qm in qs:
        for d_states, dm in ds:
            if q_states.shape[1] == 0 or d_states.shape[1] == 0:
                feats.append(Tensor(np.zeros((q_ids.shape[0], len(mus)))))
                continue
            feats.append(kernel_pool(T.cosine_matrix(q_states, d_states), qm, dm, mus, sigmas, eps))
    phi = T.concat(feats, axis=1)
    return T.tanh(phi @ head["head/out_w"] + head["head/out_b"]), phi


# ---------------------------------------------------------------- head parameters

def init_head(kind: RankerKind, rcfg: RankerConfig, enc: EncoderConfig, vocab_size: int, seed: int) -> Params:
    rng = np.random.default_rng(seed + 7919)
    kind = RankerKind(kind)

    def w(*shape):
        return Tensor(truncated_normal(rng, shape), requires_grad=True)

    head: Params = {}
    if kind is RankerKind.LAST_INT:
        head["head/w"] = w(enc.hidden)
    elif kind is RankerKind.MULT_INT:
        for k in rcfg.layers(enc.layers):
            head[f"head/w_mult/{k}"] = w(enc.hidden)
    elif kind is RankerKind.TERM_TRANS:
        width = rcfg.proj_dim or enc.hidden
        for k in rcfg.layers(enc.layers):
            head[f"head/P/{k}"] = Tensor(rng.standard_normal((enc.hidden, width)) / np.sqrt(enc.hidden),
                                         requires_grad=True)
            head[f"head/w_trans/{k}"] = Tensor(np.array(1.0), requires_grad=True)
    elif kind in (RankerKind.KNRM, RankerKind.CONV_KNRM):
        n_k = len(rcfg.kernel_mus)
        head["head/embedding"] = Tensor(rng.standard_normal((vocab_size, rcfg.emb_dim)) * 0.1, requires_grad=True)
        n_feat = n_k
        if kind is RankerKind.CONV_KNRM:
            for n in range(1, rcfg.max_ngram + 1):
                fan_in = n * rcfg.emb_dim
                head[f"head/conv{n}_w"] = Tensor(rng.standard_normal((fan_in, rcfg.conv_filters)) / np.sqrt(fan_in),
                                                 requires_grad=True)
                head[f"head/conv{n}_b"] = Tensor(np.zeros(rcfg.conv_filters), requires_grad=True)
            n_feat = n_k * rcfg.max_ngram ** 2
        head["head/out_w"] = Tensor(rng.standard_normal(n_feat) * 0.01, requires_grad=True)
        head["head/out_b"] = Tensor(np.array(0.0), requires_grad=True)
    return head


# ---------------------------------------------------------------- ranker

@dataclass
class Ranker:
    """A scorer bundle: vocabulary, encoder configuration, and all parameters."""

    config: RankerConfig
    encoder_config: EncoderConfig
    vocab: Vocabulary
    params: Params

    @classmethod
    def create(cls, config: RankerConfig, encoder_config: EncoderConfig, vocab: Vocabulary, seed: int = 0,
               encoder_params: Params | None = None) -> Ranker:
        params: Params = {}
        if config.kind.uses_encoder:
            params.update(encoder_params if encoder_params is not None else init_params(encoder_config, seed))
        params.update(init_head(config.kind, config, encoder_config, len(vocab), seed))
        return cls(config, encoder_config, vocab, params)

    @property
    def kind(self) -> RankerKind:
        return self.config.kind

    def projection_names(self) -> set[str]:
        return {n for n in self.params if n.startswith("head/P/")}

    # -- batched, differentiable

    def _encode(self, seqs: list[TokenSequence], rng=None):
        ids, segs, mask = ids_array(seqs)
        return ids, segs, mask, encode_arrays(ids, segs, mask, self.params, self.encoder_config, rng)

    def forward(self, pairs: list[tuple[list[str], list[str]]], rng=None,
                markers: str = "all") -> tuple[Tensor, dict]:
        """Scores ``[B]`` for ``(query tokens, doc tokens)`` pairs plus named parts."""
        kind, cfg = self.kind, self.config
        if kind is RankerKind.REP or (kind is RankerKind.TERM_TRANS and cfg.term_trans_encoding == "separate"):
            q_ids, q_segs, q_mask, q_out = self._encode([encode_single(q, self.vocab, cfg.max_len) for q, _ in pairs], rng)
            d_ids, d_segs, d_mask, d_out = self._encode([encode_single(d, self.vocab, cfg.max_len) for _, d in pairs], rng)
            if kind is RankerKind.REP:
                return rep_parts(q_out, d_out), {}
            layers = cfg.layers(self.encoder_config.layers)
            qm = content_masks(q_ids, q_segs, q_mask)[0]
            dm = content_masks(d_ids, d_segs, d_mask)[0]
            sims = term_trans_parts(q_out, d_out, qm, dm, self.params, layers)
            return self._combine_trans(sims), {"layer_similarity": sims}
        if kind.uses_encoder:
            seqs = [encode_pair(q, d, self.vocab, cfg.max_len, markers) for q, d in pairs]
            ids, segs, mask, out = self._encode(seqs, rng)
            if kind is RankerKind.LAST_INT:
                return last_int_parts(out, self.params["head/w"]), {}
            layers = cfg.layers(self.encoder_config.layers)
            if kind is RankerKind.MULT_INT:
                parts = mult_int_parts(out, self.params, layers)
                return _sum(parts.values()), {"layer_parts": parts}
            qm, dm = content_masks(ids, segs, mask)
            sims = term_trans_parts(out, out, qm, dm, self.params, layers)
            return self._combine_trans(sims), {"layer_similarity": sims}
        q_ids, q_mask = pad_ids([self.vocab.ids(q) for q, _ in pairs])
        d_ids, d_mask = pad_ids([self.vocab.ids(d) for _, d in pairs])
        if kind is RankerKind.KNRM:
            score, phi = knrm_parts(q_ids, q_mask, d_ids, d_mask, self.params, cfg.kernel_mus,
                                    cfg.kernel_sigmas, cfg.kernel_eps)
        else:
            score, phi = conv_knrm_parts(q_ids, q_mask, d_ids, d_mask, self.params, cfg.kernel_mus,
                                         cfg.kernel_sigmas, cfg.max_ngram, cfg.kernel_eps)
        return score, {"kernel_features": phi}

    def _combine_trans(self, sims: dict[int, Tensor]) -> Tensor:
        return _sum(self.params[f"head/w_trans/{k}"] * s for k, s in sims.items())

    # -- inference helpers

    def score(self, query: list[str], docs: list[list[str]], batch_size: int = 64, markers: str = "all") -> np.ndarray:
        out = []
        with T.no_grad():
            for start in range(0, len(docs), batch_size):
                chunk = [(query, d) for d in docs[start:start + batch_size]]
                out.append(self.forward(chunk, markers=markers)[0].data)
        return np.concatenate(out) if out else np.zeros(0)

    def score_pairs(self, pairs: list[tuple[list[str], list[str]]], batch_size: int = 64) -> np.ndarray:
        out = []
        with T.no_grad():
            for start in range(0, len(pairs), batch_size):
                out.append(self.forward(pairs[start:start + batch_size])[0].data)
        return np.concatenate(out) if out else np.zeros(0)

    def breakdown(self, query: list[str], doc: list[str]) -> ScoreBreakdown:
        with T.no_grad():
            score, parts = self.forward([(query, doc)])
        return ScoreBreakdown(
            float(score.data[0]),
            {k: float(v.data[0]) for k, v in parts.get("layer_parts", {}).items()},
            {k: float(v.data[0]) for k, v in parts.get("layer_similarity", {}).items()},
            parts["kernel_features"].data[0].copy() if "kernel_features" in parts else None,
        )


def _sum(tensors) -> Tensor:
    total = None
    for t in tensors:
        total = t if total is None else total + t
    return total


# ---------------------------------------------------------------- single-pair operations

def _single(seq: TokenSequence):
    ids, segs, mask = ids_array([seq])
    return ids, segs, mask


def score_rep(q: TokenSequence, d: TokenSequence, params: Params, config: EncoderConfig) -> ScoreBreakdown:
    outs = [encode_arrays(*_single(s), params, config) for s in (q, d)]
    return ScoreBreakdown(float(rep_parts(*outs).data[0]))


def score_last_int(qd: TokenSequence, params: Params, config: EncoderConfig) -> ScoreBreakdown:
    out = encode_arrays(*_single(qd), params, config)
    return ScoreBreakdown(float(last_int_parts(out, params["head/w"]).data[0]))


def score_mult_int(qd: TokenSequence, params: Params, config: EncoderConfig,
                   layer_range: tuple[int, int] | None = None) -> ScoreBreakdown:
    layers = RankerConfig(layer_range=layer_range).layers(config.layers)
    out = encode_arrays(*_single(qd), params, config)
    parts = {k: float(v.data[0]) for k, v in mult_int_parts(out, params, layers).items()}
    return ScoreBreakdown(float(sum(parts.values())), layer_parts=parts)


def score_term_trans(qd: TokenSequence, params: Params, config: EncoderConfig,
                     layer_range: tuple[int, int] | None = None) -> ScoreBreakdown:
    layers = RankerConfig(layer_range=layer_range).layers(config.layers)
    ids, segs, mask = _single(qd)
    out = encode_arrays(ids, segs, mask, params, config)
    qm, dm = content_masks(ids, segs, mask)
    sims = {k: float(v.data[0]) for k, v in term_trans_parts(out, out, qm, dm, params, layers).items()}
    parts = {k: float(params[f"head/w_trans/{k}"].data) * s for k, s in sims.items()}
    return ScoreBreakdown(float(sum(parts.values())), layer_parts=parts, layer_similarity=sims)


def knrm_score(q_ids: list[int], d_ids: list[int], head: Params, mus=DEFAULT_MUS, sigmas=DEFAULT_SIGMAS,
               eps: float = 1e-10) -> ScoreBreakdown:
    qi, qm = pad_ids([q_ids])
    di, dm = pad_ids([d_ids])
    score, phi = knrm_parts(qi, qm, di, dm, head, mus, sigmas, eps)
    return ScoreBreakdown(float(score.data[0]), kernel_features=phi.data[0].copy())


def conv_knrm_score(q_ids: list[int], d_ids: list[int], head: Params, max_ngram: int = 2, mus=DEFAULT_MUS,
                    sigmas=DEFAULT_SIGMAS, eps: float = 1e-10) -> ScoreBreakdown:
    if max_ngram < 1:
        raise ConfigError("max_ngram must be >= 1")
    qi, qm = pad_ids([q_ids])
    di, dm = pad_ids([d_ids])
    score, phi = conv_knrm_parts(qi, qm, di, dm, head, mus, sigmas, max_ngram, eps)
    return ScoreBreakdown(float(score.data[0]), kernel_features=phi.data[0].copy())
