"""Flat key-value run configuration.

A config file is a single JSON object whose values are scalars or lists of
scalars. Keys mirror the fields of EncoderConfig, TrainConfig, PretrainConfig
and RankerConfig; pretraining keys carry a ``pretrain_`` prefix where they
would otherwise collide with fine-tuning keys.
"""
from __future__ import annotations

import json
from pathlib import Path

from .encoder import EncoderConfig
from .rankers import DEFAULT_MUS, DEFAULT_SIGMAS, RankerConfig
from .text import ConfigError
from .training import PretrainConfig, TrainConfig

DEFAULTS: dict[str, object] = {
    "seed": 0,
    # encoder
    "layers": 4,
    "hidden": 64,
    "heads": 4,
    "ff_dim": 256,
    "max_positions": 128,
    "dropout": 0.0,
    "ln_eps": 1e-12,
    "init_std": 0.02,
    # pretraining
    "pretrain_steps": 500,
    "pretrain_batch_size": 8,
    "pretrain_learning_rate": 1e-3,
    "mask_rate": 0.15,
    # fine-tuning
    "learning_rate": 1e-3,
    "projection_learning_rate": 2e-3,
    "batch_size": 8,
    "max_steps": 2000,
    "validation_interval": 100,
    "patience": 5,
    "loss": "classification",
    "classification_link": "sigmoid",
    "margin": 1.0,
    # rankers
    "ranker_kind": "LastInt",
    "max_len": 128,
    "layer_range": None,
    "proj_dim": None,
    "term_trans_encoding": "concat",
    "kernel_mus": list(DEFAULT_MUS),
    "kernel_sigmas": list(DEFAULT_SIGMAS),
    "kernel_eps": 1e-10,
    "emb_dim": 64,
    "conv_filters": 128,
    "max_ngram": 2,
}


def _check_value(key: str, value) -> None:
    if isinstance(value, dict):
        raise ConfigError(f"config key {key!r}: nested objects are not allowed")
    if isinstance(value, list) and any(isinstance(v, (dict, list)) for v in value):
        raise ConfigError(f"config key {key!r}: lists must hold scalars")


def load_config(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return raw


def parse_override(item: str) -> tuple[str, object]:
    """``key=value``; the value is read as JSON when possible, else kept as a string."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, text = item.split("=", 1)
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    return key.strip(), value


def resolve(file_values: dict | None = None, overrides: dict | None = None) -> dict:
    cfg = dict(DEFAULTS)
    for source in (file_values or {}, overrides or {}):
        for key, value in source.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            _check_value(key, value)
            cfg[key] = value
    return cfg


def encoder_config(cfg: dict, vocab_size: int) -> EncoderConfig:
    try:
        return EncoderConfig(layers=cfg["layers"], hidden=cfg["hidden"], heads=cfg["heads"], ff_dim=cfg["ff_dim"],
                             max_positions=cfg["max_positions"], vocab_size=vocab_size, dropout=cfg["dropout"],
                             ln_eps=cfg["ln_eps"], init_std=cfg["init_std"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def pretrain_config(cfg: dict) -> PretrainConfig:
    return PretrainConfig(steps=cfg["pretrain_steps"], batch_size=cfg["pretrain_batch_size"],
                          learning_rate=cfg["pretrain_learning_rate"], mask_rate=cfg["mask_rate"],
                          max_len=cfg["max_len"], seed=cfg["seed"])


def train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig(learning_rate=cfg["learning_rate"], projection_learning_rate=cfg["projection_learning_rate"],
                           batch_size=cfg["batch_size"], max_steps=cfg["max_steps"],
                           validation_interval=cfg["validation_interval"], patience=cfg["patience"],
                           seed=cfg["seed"], loss=cfg["loss"], classification_link=cfg["classification_link"],
                           margin=cfg["margin"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def ranker_config(cfg: dict, kind: str | None = None) -> RankerConfig:
    layer_range = cfg["layer_range"]
    try:
        return RankerConfig(kind=kind or cfg["ranker_kind"], max_len=cfg["max_len"],
                            layer_range=tuple(layer_range) if layer_range is not None else None,
                            proj_dim=cfg["proj_dim"], term_trans_encoding=cfg["term_trans_encoding"],
                            kernel_mus=tuple(cfg["kernel_mus"]), kernel_sigmas=tuple(cfg["kernel_sigmas"]),
                            kernel_eps=cfg["kernel_eps"], emb_dim=cfg["emb_dim"], conv_filters=cfg["conv_filters"],
                            max_ngram=cfg["max_ngram"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
