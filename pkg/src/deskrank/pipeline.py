"""The full command-line pipeline on a corpus directory.

The directory must hold ``corpus.tsv``, ``queries.tsv``, ``triples.tsv``,
``qrels.txt``, ``dev_candidates.tsv`` and ``config.json`` in the layout of the
bundled toy corpus.
"""
from __future__ import annotations

import time
from importlib import resources
from pathlib import Path
from typing import Sequence

from .cli import main, manifest_path

STEPS = ("build-vocab", "pretrain", "train", "bm25", "rerank", "eval", "analyze-attention", "analyze-influence")


class PipelineError(RuntimeError):
    pass


def toy_corpus_dir() -> Path:
    return Path(str(resources.files("deskrank").joinpath("data/toy")))


def pipeline_commands(data: Path, work: Path, overrides: Sequence[str] = (), kind: str = "LastInt",
                      depth: int = 20) -> list[tuple[str, list[str]]]:
    cfg = ["--config", str(data / "config.json")]
    for o in overrides:
        cfg += ["--set", o]
    w = lambda name: str(work / name)  # noqa: E731
    return [
        ("build-vocab", ["build-vocab", "--corpus", str(data / "corpus.tsv"), "--queries", str(data / "queries.tsv"),
                         "--out", w("vocab.txt")]),
        ("pretrain", ["pretrain", *cfg, "--corpus", str(data / "corpus.tsv"), "--vocab", w("vocab.txt"),
                      "--out", w("encoder.ckpt")]),
        ("train", ["train", *cfg, "--triples", str(data / "triples.tsv"),
                   "--dev-candidates", str(data / "dev_candidates.tsv"), "--dev-qrels", str(data / "qrels.txt"),
                   "--checkpoint", w("encoder.ckpt"), "--kind", kind, "--out", w("ranker.ckpt")]),
        ("bm25", ["bm25", "--corpus", str(data / "corpus.tsv"), "--queries", str(data / "queries.tsv"),
                  "--depth", str(depth), "--out", w("bm25.tsv")]),
        ("rerank", ["rerank", *cfg, "--checkpoint", w("ranker.ckpt"), "--candidates", w("bm25.tsv"),
                    "--kind", kind, "--out", w("rerank.run")]),
        ("eval", ["eval", "--run", w("rerank.run"), "--qrels", str(data / "qrels.txt"), "--out", w("eval.csv")]),
        ("analyze-attention", ["analyze-attention", *cfg, "--checkpoint", w("ranker.ckpt"),
                               "--candidates", w("bm25.tsv"), "--depth", "5", "--out", w("attention.csv")]),
        ("analyze-influence", ["analyze-influence", *cfg, "--checkpoint", w("ranker.ckpt"),
                               "--candidates", w("bm25.tsv"), "--depth", "5", "--out", w("influence.csv")]),
    ]


def run_pipeline(work, data=None, overrides: Sequence[str] = (), kind: str = "LastInt",
                 depth: int = 20) -> dict[str, float]:
    """Run every step; returns seconds per step and raises on the first failing command."""
    work = Path(work)
    work.mkdir(parents=True, exist_ok=True)
    data = Path(data) if data is not None else toy_corpus_dir()
    timings = {}
    for name, argv in pipeline_commands(data, work, overrides, kind, depth):
        t0 = time.perf_counter()
        if main(argv) != 0:
            raise PipelineError(f"step {name} failed")
        timings[name] = time.perf_counter() - t0
    return timings


def pipeline_manifests(work) -> list[Path]:
    outs = ("vocab.txt", "encoder.ckpt", "ranker.ckpt", "bm25.tsv", "rerank.run", "eval.csv", "attention.csv",
            "influence.csv")
    return [manifest_path(Path(work) / o) for o in outs]
