"""Post-norm Transformer encoder that records every attention matrix."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import truncnorm

from . import tensor as T
from .tensor import Tensor
from .text import TokenSequence, ids_array

Params = dict[str, Tensor]

INIT_STD = 0.02
# std of a standard normal truncated to [-2, 2]; divided out so sampled weights keep INIT_STD
_TRUNC_STD = float(truncnorm(-2.0, 2.0).std())


@dataclass
class EncoderConfig:
    layers: int = 4
    hidden: int = 64
    heads: int = 4
    ff_dim: int = 256
    max_positions: int = 128
    vocab_size: int = 1000
    dropout: float = 0.0
    ln_eps: float = 1e-12
    init_std: float = INIT_STD

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.hidden % self.heads:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EncoderOutput:
    """``hidden[k]`` for k = 0 (embeddings) .. L; ``attention[k-1]`` is layer k's ``[A, T, T]``.

    Batched outputs carry a leading batch axis on every entry.
    """

    hidden: list[Tensor]
    attention: list[np.ndarray]
    mask: np.ndarray
    segments: np.ndarray = field(repr=False, default=None)

    @property
    def n_layers(self) -> int:
        return len(self.attention)


def truncated_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    z = rng.standard_normal(shape)
    bad = np.abs(z) > 2.0
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > 2.0
    return z * (std / _TRUNC_STD)


def init_params(config: EncoderConfig, seed: int = 0, prefix: str = "encoder/") -> Params:
    rng = np.random.default_rng(seed)
    H, F = config.hidden, config.ff_dim

    def w(*shape):
        return Tensor(truncated_normal(rng, shape, config.init_std), requires_grad=True)

    def const(value, n):
        return Tensor(np.full(n, value, dtype=np.float64), requires_grad=True)

    p: Params = {
        "emb/token": w(config.vocab_size, H),
        "emb/position": w(config.max_positions, H),
        "emb/segment": w(2, H),
        "emb/ln_gain": const(1.0, H),
        "emb/ln_bias": const(0.0, H),
    }
    for k in range(config.layers):
        pre = f"layer{k}/"
        for name in ("q", "k", "v", "o"):
            p[pre + f"attn_{name}_w"] = w(H, H)
            p[pre + f"attn_{name}_b"] = const(0.0, H)
        p[pre + "ln1_gain"] = const(1.0, H)
        p[pre + "ln1_bias"] = const(0.0, H)
        p[pre + "ff1_w"] = w(H, F)
        p[pre + "ff1_b"] = const(0.0, F)
        p[pre + "ff2_w"] = w(F, H)
        p[pre + "ff2_b"] = const(0.0, H)
        p[pre + "ln2_gain"] = const(1.0, H)
        p[pre + "ln2_bias"] = const(0.0, H)
    return {prefix + k: v for k, v in p.items()}


def _arrays(seqs):
    if isinstance(seqs, TokenSequence):
        seqs = [seqs]
    return ids_array(list(seqs))


def embed_batch(ids: np.ndarray, segments: np.ndarray, params: Params, eps: float = 1e-12,
                prefix: str = "encoder/") -> Tensor:
    vocab_size = params[prefix + "emb/token"].shape[0]
    n_pos = params[prefix + "emb/position"].shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        raise IndexError(f"token id outside vocabulary of size {vocab_size}")
    if ids.shape[-1] > n_pos:
        raise IndexError(f"sequence length {ids.shape[-1]} exceeds max positions {n_pos}")
    x = (T.embedding(params[prefix + "emb/token"], ids)
         + T.embedding(params[prefix + "emb/position"], np.arange(ids.shape[-1]))
         + T.embedding(params[prefix + "emb/segment"], segments))
    return T.layer_norm(x, params[prefix + "emb/ln_gain"], params[prefix + "emb/ln_bias"], eps)


def embed(seq: TokenSequence, params: Params, eps: float = 1e-12) -> Tensor:
    ids, segs, _ = _arrays(seq)
    return embed_batch(ids, segs, params, eps)[0]


def _layer(x: Tensor, key_mask: np.ndarray, params: Params, pre: str, config: EncoderConfig,
           rng: np.random.Generator | None) -> tuple[Tensor, np.ndarray]:
    B, L, H = x.shape
    A, dh = config.heads, config.head_dim

    def heads(name):
        y = x @ params[pre + f"attn_{name}_w"] + params[pre + f"attn_{name}_b"]
        return T.transpose(y.reshape(B, L, A, dh), (0, 2, 1, 3))

    q, k, v = heads("q"), heads("k"), heads("v")
    logits = (q @ T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
    attn = T.softmax(logits, axis=-1, mask=key_mask[:, None, None, :].astype(bool))
    ctx = T.transpose(attn @ v, (0, 2, 1, 3)).reshape(B, L, H)
    out = T.dropout(ctx @ params[pre + "attn_o_w"] + params[pre + "attn_o_b"], config.dropout, rng)
    x = T.layer_norm(x + out, params[pre + "ln1_gain"], params[pre + "ln1_bias"], config.ln_eps)
    ff = T.gelu(x @ params[pre + "ff1_w"] + params[pre + "ff1_b"]) @ params[pre + "ff2_w"] + params[pre + "ff2_b"]
    ff = T.dropout(ff, config.dropout, rng)
    x = T.layer_norm(x + ff, params[pre + "ln2_gain"], params[pre + "ln2_bias"], config.ln_eps)
    return x, attn.data


def encode_arrays(ids: np.ndarray, segments: np.ndarray, mask: np.ndarray, params: Params,
                  config: EncoderConfig, rng: np.random.Generator | None = None,
                  prefix: str = "encoder/") -> EncoderOutput:
    x = embed_batch(ids, segments, params, config.ln_eps, prefix)
    x = T.dropout(x, config.dropout, rng)
    hidden, attention = [x], []
    for k in range(config.layers):
        x, attn = _layer(x, mask, params, f"{prefix}layer{k}/", config, rng)
        hidden.append(x)
        attention.append(attn)
    return EncoderOutput(hidden, attention, mask, segments)


def encode_batch(seqs: list[TokenSequence], params: Params, config: EncoderConfig,
                 rng: np.random.Generator | None = None) -> EncoderOutput:
    ids, segs, mask = _arrays(seqs)
    return encode_arrays(ids, segs, mask, params, config, rng)


def encoder_forward(seq: TokenSequence, params: Params, config: EncoderConfig) -> EncoderOutput:
    """Single-sequence forward pass: ``hidden[k]`` is ``[T, H]``, ``attention[k]`` is ``[A, T, T]``."""
    out = encode_batch([seq], params, config)
    return EncoderOutput([h[0] for h in out.hidden], [a[0] for a in out.attention],
                         out.mask[0], out.segments[0])
