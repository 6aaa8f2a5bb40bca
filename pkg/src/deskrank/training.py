"""Losses, Adam, Mask-LM / next-sequence pretraining, and ranker fine-tuning."""
from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .atomic import atomic_open
from .encoder import EncoderConfig, Params, encode_arrays
from .rankers import Ranker
from .tensor import Tensor
from .text import (CLS, MASK, PAD, RESERVED, SEP, ConfigError, TokenSequence, TripleRecord, Vocabulary,
                   encode_pair, ids_array, tokenize)

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------- losses

def classification_loss(score, label, link: str = "sigmoid") -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(score)`` against 0/1 labels.

    ``link="softmax2"`` scores the two classes with logits ``(0, score)``;
    for a single-logit head this is the same function, computed differently.
    """
    s = T.as_tensor(score)
    y = np.asarray(label, dtype=float)
    if link == "sigmoid":
        per = T.softplus(s) - s * y
    elif link == "softmax2":
        logits = T.stack([s * 0.0, s], axis=-1)
        logp = T.log_softmax(logits, axis=-1)
        per = -(logp[..., 1] * y + logp[..., 0] * (1.0 - y))
    else:
        raise ConfigError(f"unknown classification link {link!r}")
    return per.mean()


def pairwise_loss(score_pos, score_neg, margin: float = 1.0) -> Tensor:
    """Mean hinge ``max(0, margin - (s+ - s-))``."""
    if margin < 0:
        raise ConfigError("margin must be >= 0")
    return T.relu(margin - (T.as_tensor(score_pos) - T.as_tensor(score_neg))).mean()


# ---------------------------------------------------------------- pretraining batches

@dataclass
class PretrainBatch:
    ids: np.ndarray
    segments: np.ndarray
    mask: np.ndarray
    positions: np.ndarray  # (row, col) pairs of masked positions, shape [n, 2]
    targets: np.ndarray  # original ids at those positions
    labels: np.ndarray | None = None  # next-sequence labels, one per row


def mask_lm_batch(seqs: Sequence[TokenSequence], vocab: Vocabulary, rate: float = 0.15, seed: int = 0,
                  rng: np.random.Generator | None = None) -> PretrainBatch:
    """Select real non-marker positions with probability ``rate``; 80/10/10 MASK/random/keep."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError("mask rate must lie in [0, 1)")
    rng = rng or np.random.default_rng(seed)
    ids, segs, mask = ids_array(list(seqs))
    eligible = (mask > 0) & (ids != CLS) & (ids != SEP) & (ids != PAD)
    chosen = eligible & (rng.random(ids.shape) < rate)
    rows, cols = np.nonzero(chosen)
    targets = ids[rows, cols].copy()
    masked = ids.copy()
    roll = rng.random(len(rows))
    random_ids = rng.integers(len(RESERVED), max(len(vocab), len(RESERVED) + 1), size=len(rows))
    masked[rows[roll < 0.8], cols[roll < 0.8]] = MASK
    swap = (roll >= 0.8) & (roll < 0.9)
    masked[rows[swap], cols[swap]] = random_ids[swap]
    return PretrainBatch(masked, segs, mask, np.stack([rows, cols], axis=1), targets)


def next_seq_pairs(passages: Sequence[list[str]], n: int, rng: np.random.Generator):
    if len(passages) < 2:
        raise ConfigError("next-sequence sampling needs at least 2 passages")
    n_pass = len(passages)
    out = []
    for _ in range(n):
        if rng.random() < 0.5:
            i = int(rng.integers(0, n_pass - 1))
            out.append((passages[i], passages[i + 1], 1))
        else:
            # any ordered pair except a passage with itself or with its true successor
            while True:
                i, j = int(rng.integers(n_pass)), int(rng.integers(n_pass))
                if j != i and j != i + 1:
                    break
            out.append((passages[i], passages[j], 0))
    return out


def next_seq_batch(passages: Sequence[list[str]], vocab: Vocabulary, n: int = 8, seed: int = 0,
                   max_len: int = 128, mask_rate: float = 0.15,
                   rng: np.random.Generator | None = None) -> PretrainBatch:
    """Adjacent (label 1) or random (label 0) passage pairs, Mask-LM applied on top."""
    rng = rng or np.random.default_rng(seed)
    pairs = next_seq_pairs(passages, n, rng)
    seqs = [encode_pair(a, b, vocab, max_len) for a, b, _ in pairs]
    batch = mask_lm_batch(seqs, vocab, mask_rate, rng=rng)
    batch.labels = np.array([lab for _, _, lab in pairs], dtype=float)
    return batch


def init_pretrain_heads(config: EncoderConfig, seed: int = 0) -> Params:
    # a zero next-sequence weight would leave the encoder without gradient at step one
    rng = np.random.default_rng(seed)
    return {
        "pretrain/mlm_bias": Tensor(np.zeros(config.vocab_size), requires_grad=True),
        "pretrain/nsp_w": Tensor(rng.standard_normal(config.hidden) / math.sqrt(config.hidden), requires_grad=True),
        "pretrain/nsp_b": Tensor(np.array(0.0), requires_grad=True),
    }


def pretrain_loss(batch: PretrainBatch, params: Params, config: EncoderConfig, rng=None) -> Tensor:
    out = encode_arrays(batch.ids, batch.segments, batch.mask, params, config, rng)
    last = out.hidden[-1]
    loss = Tensor(0.0)
    if len(batch.targets):
        states = last[batch.positions[:, 0], batch.positions[:, 1]]
        logits = states @ T.swapaxes(params["encoder/emb/token"], 0, 1) + params["pretrain/mlm_bias"]
        logp = T.log_softmax(logits, axis=-1)
        loss = loss - logp[np.arange(len(batch.targets)), batch.targets].mean()
    if batch.labels is not None:
        nsp = last[:, 0, :] @ params["pretrain/nsp_w"] + params["pretrain/nsp_b"]
        loss = loss + classification_loss(nsp, batch.labels)
    return loss


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    lr: float = 1e-3
    projection_lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    projection_names: set[str] = field(default_factory=set)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Params, grads: dict[str, np.ndarray | None], state: AdamState) -> Params:
    """One bias-corrected Adam update, in place on ``params``."""
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        lr = state.projection_lr if name in state.projection_names else state.lr
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def _step(params: Params, loss: Tensor, state: AdamState) -> None:
    for p in params.values():
        p.grad = None
    T.backward(loss)
    adam_step(params, {n: p.grad for n, p in params.items()}, state)


# ---------------------------------------------------------------- pretraining loop

@dataclass
class PretrainConfig:
    steps: int = 500
    batch_size: int = 8
    learning_rate: float = 1e-3
    mask_rate: float = 0.15
    max_len: int = 128
    seed: int = 0

    def __post_init__(self):
        if min(self.steps, self.batch_size, self.max_len) < 1 or self.learning_rate <= 0:
            raise ConfigError("pretraining steps, batch_size, max_len and learning_rate must be positive")
        if not 0.0 <= self.mask_rate < 1.0:
            raise ConfigError("mask rate must lie in [0, 1)")


def pretrain(params: Params, config: EncoderConfig, vocab: Vocabulary, passages: Sequence[str],
             pcfg: PretrainConfig, heads: Params | None = None) -> list[tuple[int, str, float]]:
    """Mask-LM + next-sequence training of the encoder parameters (in place).

    Pass ``heads`` to keep the pretraining heads; they are updated in place too.
    """
    tokens = [tokenize(p) for p in passages]
    rng = np.random.default_rng(pcfg.seed)
    if heads is None:
        heads = {}
    if not heads:
        heads.update(init_pretrain_heads(config, pcfg.seed))
    all_params = {**params, **heads}
    state = AdamState(lr=pcfg.learning_rate)
    log = []
    for step in range(1, pcfg.steps + 1):
        batch = next_seq_batch(tokens, vocab, pcfg.batch_size, max_len=pcfg.max_len, mask_rate=pcfg.mask_rate, rng=rng)
        loss = pretrain_loss(batch, all_params, config, rng if config.dropout > 0 else None)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(f"non-finite pretraining loss at step {step}")
        _step(all_params, loss, state)
        log.append((step, "pretrain", value))
    return log


# ---------------------------------------------------------------- fine-tuning

@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    projection_learning_rate: float = 2e-3
    batch_size: int = 8
    max_steps: int = 2000
    validation_interval: int = 100
    patience: int = 5
    seed: int = 0
    loss: str = "classification"  # or "pairwise"
    classification_link: str = "sigmoid"
    margin: float = 1.0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.projection_learning_rate <= 0:
            raise ConfigError("learning rates must be > 0")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if min(self.batch_size, self.max_steps, self.validation_interval) < 1:
            raise ConfigError("batch_size, max_steps and validation_interval must be >= 1")
        if self.classification_link not in ("sigmoid", "softmax2"):
            raise ConfigError(f"unknown classification link {self.classification_link!r}")
        if self.loss not in ("classification", "pairwise"):
            raise ConfigError(f"unknown loss kind {self.loss!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LabeledPair:
    query_id: str
    query: list[str]
    doc: list[str]
    label: int


@dataclass
class TrainResult:
    log: list[tuple[int, str, float]]
    best_step: int
    best_val_loss: float
    stopped_step: int


def batch_loss(ranker: Ranker, triples: Sequence[tuple[list[str], list[str], list[str]]], cfg: TrainConfig,
               rng=None) -> Tensor:
    if cfg.loss == "classification":
        pairs = [(q, p) for q, p, _ in triples] + [(q, n) for q, _, n in triples]
        labels = [1] * len(triples) + [0] * len(triples)
        scores, _ = ranker.forward(pairs, rng)
        return classification_loss(scores, labels, cfg.classification_link)
    pairs = [(q, p) for q, p, _ in triples] + [(q, n) for q, _, n in triples]
    scores, _ = ranker.forward(pairs, rng)
    n = len(triples)
    return pairwise_loss(scores[:n], scores[n:], cfg.margin)


def validation_loss(ranker: Ranker, val: Sequence[LabeledPair], cfg: TrainConfig) -> float:
    scores = ranker.score_pairs([(v.query, v.doc) for v in val])
    if cfg.loss == "classification":
        with T.no_grad():
            return classification_loss(scores, [v.label for v in val], cfg.classification_link).item()
    by_q: dict[str, tuple[list[float], list[float]]] = defaultdict(lambda: ([], []))
    for v, s in zip(val, scores):
        by_q[v.query_id][0 if v.label > 0 else 1].append(s)
    gaps = [cfg.margin - (p - n) for pos, neg in by_q.values() for p in pos for n in neg]
    return float(np.mean(np.maximum(gaps, 0.0))) if gaps else 0.0


def train(ranker: Ranker, triples: Sequence[TripleRecord | tuple], val: Sequence[LabeledPair],
          cfg: TrainConfig) -> TrainResult:
    """Fine-tune ``ranker`` in place; on return it holds the best-validation parameters."""
    data = [(tokenize(t.query), tokenize(t.positive), tokenize(t.negative)) if isinstance(t, TripleRecord)
            else tuple(t) for t in triples]
    if not data:
        raise ConfigError("no training triples")
    rng = np.random.default_rng(cfg.seed)
    dropout_rng = rng if ranker.encoder_config.dropout > 0 else None
    state = AdamState(lr=cfg.learning_rate, projection_lr=cfg.projection_learning_rate,
                      projection_names=ranker.projection_names())
    log: list[tuple[int, str, float]] = []
    best_val, best_step, bad = math.inf, 0, 0
    best_params = {n: p.data.copy() for n, p in ranker.params.items()}
    order, cursor, running = rng.permutation(len(data)), 0, []
    step = 0
    for step in range(1, cfg.max_steps + 1):
        if cursor + cfg.batch_size > len(order):
            order, cursor = rng.permutation(len(data)), 0
        batch = [data[i] for i in order[cursor:cursor + cfg.batch_size]]
        cursor += cfg.batch_size
        loss = batch_loss(ranker, batch, cfg, dropout_rng)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(f"loss became {value} at step {step}")
        _step(ranker.params, loss, state)
        running.append(value)
        if step % cfg.validation_interval == 0:
            log.append((step, "train", float(np.mean(running))))
            running = []
            vloss = validation_loss(ranker, val, cfg) if val else float(log[-1][2])
            if not math.isfinite(vloss):
                raise TrainingError(f"validation loss became {vloss} at step {step}")
            log.append((step, "val", vloss))
            if vloss < best_val:
                best_val, best_step, bad = vloss, step, 0
                best_params = {n: p.data.copy() for n, p in ranker.params.items()}
            else:
                bad += 1
                if bad >= cfg.patience:
                    break
    if best_step:
        for n, arr in best_params.items():
            ranker.params[n].data = arr
    return TrainResult(log, best_step, best_val, step)


def write_log(log: Sequence[tuple[int, str, float]], path) -> None:
    with atomic_open(path, newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "split", "loss"])
        for step, split, loss in log:
            w.writerow([step, split, repr(float(loss))])
