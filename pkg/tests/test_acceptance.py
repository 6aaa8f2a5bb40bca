"""Acceptance suite.

Each criterion prints one ``PASS``/``FAIL`` line (visible in pytest output and
when the file is run directly with ``python tests/test_acceptance.py``).
"""
import csv
import hashlib
import random
import sys
import time
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest

from deskrank.checkpoint import load_checkpoint
from deskrank.cli import RunManifest, main, manifest_path
from deskrank.encoder import EncoderConfig, encoder_forward, init_params
from deskrank.evaluation import RankedList, err_at_k, mrr_at_k, ndcg_at_k, permutation_test
from deskrank.experiments import LearnabilityConfig, key_term_first_rate, run_learnability
from deskrank.pipeline import pipeline_manifests, run_pipeline, toy_corpus_dir
from deskrank.rankers import Ranker, RankerConfig, RankerKind, init_head, score_last_int, score_mult_int, score_term_trans
from deskrank.tensor import Tensor, grad_check
from deskrank.text import RESERVED, QrelSet, TokenSequence, Vocabulary, encode_pair, load_candidates, load_run

VOCAB = Vocabulary(list(RESERVED) + [f"t{i}" for i in range(20)])
DESK = EncoderConfig(layers=2, hidden=8, heads=2, ff_dim=16, max_positions=8, vocab_size=len(VOCAB), init_std=0.3)


def report(name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    capman = getattr(report, "capman", None)
    if capman is not None:
        with capman.global_and_fixture_disabled():
            print("\n" + line, flush=True)
    else:
        print(line, flush=True)


@pytest.fixture(autouse=True)
def _show_lines(request):
    report.capman = request.config.pluginmanager.getplugin("capturemanager")
    yield
    report.capman = None


def words(rng, n):
    return [f"t{int(i)}" for i in rng.integers(0, 20, n)]


def desk_ranker(kind: str, seed: int) -> Ranker:
    cfg = RankerConfig(kind=kind, max_len=8, emb_dim=6, conv_filters=5)
    params = dict(init_params(DESK, seed)) if cfg.kind.uses_encoder else {}
    params.update(init_head(cfg.kind, cfg, DESK, len(VOCAB), seed))
    if cfg.kind in (RankerKind.KNRM, RankerKind.CONV_KNRM):
        # keep the tanh output out of saturation so finite differences stay informative
        params["head/out_w"].data = params["head/out_w"].data * 0.05
    return Ranker(cfg, DESK, VOCAB, params)


# ---------------------------------------------------------------- 1

def test_gradient_fidelity():
    start, worst, per_kind = time.perf_counter(), 0.0, {}
    for kind in RankerKind:
        for seed in range(10):
            rng = np.random.default_rng(100 + seed)
            q = words(rng, int(rng.integers(1, 3)))
            d = words(rng, int(rng.integers(1, 6 - len(q))))  # CLS q SEP d SEP fits in 8
            r = desk_ranker(kind.value, seed)
            err = grad_check(lambda: r.forward([(q, d)])[0].sum(), list(r.params.values()))
            per_kind[kind.value] = max(per_kind.get(kind.value, 0.0), err)
            worst = max(worst, err)
    secs = time.perf_counter() - start
    ok = worst <= 1e-4 and secs < 300
    report("gradient fidelity", ok, f"max rel err {worst:.2e} over 6 scorers x 10 seeds in {secs:.0f}s "
           f"({', '.join(f'{k} {v:.1e}' for k, v in per_kind.items())})")
    assert ok


# ---------------------------------------------------------------- 2

def _oracle(order, grades, gmax):
    hits = [i for i, d in enumerate(order[:10]) if grades.get(d, 0) > 0]
    mrr = 1.0 / (hits[0] + 1) if hits else 0.0
    disc = lambda n: [1.0 / np.log2(i + 2) for i in range(n)]  # noqa: E731
    gains = [2.0 ** grades.get(d, 0) - 1 for d in order[:20]]
    ideal = sorted((2.0 ** g - 1 for g in grades.values()), reverse=True)[:20]
    idcg = sum(g * w for g, w in zip(ideal, disc(len(ideal))))
    ndcg = sum(g * w for g, w in zip(gains, disc(len(gains)))) / idcg if idcg > 0 else 0.0
    R = [(2.0 ** grades.get(d, 0) - 1) / 2.0 ** gmax for d in order[:20]]
    err, stay = 0.0, 1.0
    for r, x in enumerate(R):
        err += stay * x / (r + 1)
        stay *= 1 - x
    return mrr, ndcg, err


def test_metric_oracles():
    rng = random.Random(2024)
    worst = 0.0
    for i in range(200):
        n = rng.randint(1, 10)
        docs = [f"d{j}" for j in range(n)]
        rng.shuffle(docs)
        grades = {d: rng.randint(0, 4) for d in docs if rng.random() < 0.8} or {docs[0]: rng.randint(0, 4)}
        qrels = QrelSet({("q", d): g for d, g in grades.items()}, gmax=4)
        ranked = RankedList("q", docs, [float(n - j) for j in range(n)])
        got = (mrr_at_k(ranked, qrels, 10), ndcg_at_k(ranked, qrels, 20), err_at_k(ranked, qrels, 20, gmax=4))
        worst = max(worst, *(abs(a - b) for a, b in zip(got, _oracle(docs, grades, 4))))
    ok = worst <= 1e-9
    report("metric oracles", ok, f"200 lists, max |diff| {worst:.1e}")
    assert ok


# ---------------------------------------------------------------- 3

def test_mult_int_reduces_to_last_int():
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        p = dict(init_params(DESK, seed))
        w = rng.normal(size=DESK.hidden)
        p["head/w"] = Tensor(w)
        p["head/w_mult/1"] = Tensor(np.zeros(DESK.hidden))
        p["head/w_mult/2"] = Tensor(w.copy())
        q = words(rng, int(rng.integers(1, 3)))
        qd = encode_pair(q, words(rng, int(rng.integers(1, 6 - len(q)))), VOCAB, 8)
        worst = max(worst, abs(score_mult_int(qd, p, DESK).score - score_last_int(qd, p, DESK).score))
    ok = worst <= 1e-9
    report("Mult-Int reduction", ok, f"100 inputs, max |diff| {worst:.1e}")
    assert ok


# ---------------------------------------------------------------- 4

def test_term_trans_range():
    lo, hi = np.inf, -np.inf
    cfg = RankerConfig(kind="TermTrans", max_len=8)
    for seed in range(100):
        rng = np.random.default_rng(seed)
        p = dict(init_params(DESK, seed))
        p.update(init_head(cfg.kind, cfg, DESK, len(VOCAB), seed))
        q = words(rng, int(rng.integers(1, 3)))
        b = score_term_trans(encode_pair(q, words(rng, int(rng.integers(1, 6 - len(q)))), VOCAB, 8), p, DESK)
        lo, hi = min(lo, *b.layer_similarity.values()), max(hi, *b.layer_similarity.values())
    for k in (1, 2):
        p[f"head/P/{k}"] = Tensor(np.zeros_like(p[f"head/P/{k}"].data))
    zero = score_term_trans(encode_pair(["t1"], ["t2", "t3"], VOCAB, 8), p, DESK).score
    ok = 0.0 <= lo and hi <= 1.0 and zero == 0.0
    report("Term-Trans range", ok, f"s^k in [{lo:.4f}, {hi:.4f}] on 100 inputs; P=0 score {zero!r}")
    assert ok


# ---------------------------------------------------------------- 5

def test_attention_rows_and_masking():
    cfg = EncoderConfig(layers=2, hidden=8, heads=2, ff_dim=16, max_positions=16, vocab_size=len(VOCAB))
    worst_row, identical = 0.0, True
    for seed in range(50):
        rng = np.random.default_rng(seed)
        p = init_params(cfg, seed)
        n_real, n_pad = int(rng.integers(2, 10)), int(rng.integers(1, 6))
        real = [int(i) for i in rng.integers(5, len(VOCAB), n_real)]
        segs = [int(s) for s in rng.integers(0, 2, n_real)]
        a = TokenSequence(real + [0] * n_pad, segs + [0] * n_pad, [1] * n_real + [0] * n_pad)
        b = TokenSequence(real + [int(i) for i in rng.integers(0, len(VOCAB), n_pad)],
                          segs + [int(s) for s in rng.integers(0, 2, n_pad)], a.mask)
        oa, ob = encoder_forward(a, p, cfg), encoder_forward(b, p, cfg)
        for att in oa.attention:
            worst_row = max(worst_row, float(np.abs(att[..., :n_real, :].sum(-1) - 1.0).max()))
        identical &= all(np.array_equal(x.data[:n_real], y.data[:n_real]) for x, y in zip(oa.hidden, ob.hidden))
    ok = worst_row <= 1e-6 and identical
    report("attention rows and masking", ok, f"max |row sum - 1| {worst_row:.1e}; real states identical: {identical}")
    assert ok


# ---------------------------------------------------------------- 6 and 8

@lru_cache(maxsize=1)
def learnability():
    return run_learnability(LearnabilityConfig(seed=0))


def test_learnability():
    r = learnability()
    last, rep = r.mrr["LastInt"], r.mrr["Rep"]
    best = r.train["LastInt"].best_step
    ok = last >= 0.95 and rep < last and best <= 2000 and r.seconds < 900
    report("learnability", ok, f"Last-Int MRR@10 {last:.3f} (best step {best}), Rep {rep:.3f}, {r.seconds:.0f}s")
    assert ok


def test_influence_pipeline():
    r = learnability()
    rate = key_term_first_rate(r.rankers["LastInt"], r.corpus)
    ok = rate >= 0.9
    report("influence pipeline", ok, f"key term ranked first for {rate:.1%} of held-out relevant pairs")
    assert ok


# ---------------------------------------------------------------- 7

def test_permutation_exact_vs_monte_carlo():
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        a, b = rng.random(10), rng.random(10) * rng.uniform(0.5, 1.0)
        exact = permutation_test(a, b, exact=True)
        mc = permutation_test(a, b, n_perm=100_000, seed=seed, exact=False)
        worst = max(worst, abs(exact - mc))
    same = permutation_test(a, a, exact=True), permutation_test(a, a, n_perm=1000, exact=False)
    ok = worst <= 0.01 and same == (1.0, 1.0)
    report("permutation test", ok, f"max |exact - MC| {worst:.4f} over 20 ten-query cases; a==b p {same}")
    assert ok


# ---------------------------------------------------------------- 9 and 10

@lru_cache(maxsize=1)
def toy_pipeline():
    work = Path(pytest_tmp()) / "toy"
    t0 = time.perf_counter()
    timings = run_pipeline(work)
    return work, timings, time.perf_counter() - t0


def pytest_tmp():
    import tempfile

    return tempfile.mkdtemp(prefix="deskrank-acceptance-")


def _csv_header(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return next(csv.reader(fh))


def _schema_problems(work: Path) -> list[str]:
    problems = []
    vocab = (work / "vocab.txt").read_text(encoding="utf-8").splitlines()
    # reserved tokens are implicit; the file lists regular tokens only, one per line
    if not vocab or set(vocab) & set(RESERVED) or len(set(vocab)) != len(vocab) or any(not w or " " in w for w in vocab):
        problems.append("vocab")
    for ckpt, kind in (("encoder.ckpt", None), ("ranker.ckpt", "LastInt")):
        params, header = load_checkpoint(work / ckpt)
        if header["ranker_kind"] != kind or not params:
            problems.append(ckpt)
        if _csv_header(str(work / ckpt) + ".log.csv") != ["step", "split", "loss"]:
            problems.append(ckpt + ".log.csv")
    sets = list(load_candidates(work / "bm25.tsv", depth=1000))
    if not sets or any(len(cs.docs) > 20 for cs in sets):
        problems.append("bm25.tsv")
    run = list(load_run(work / "rerank.run"))
    if not run:
        problems.append("rerank.run")
    with open(work / "eval.csv", newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if rows[0] != ["metric", "mean"] or {r[0] for r in rows[1:]} != {"mrr@10", "ndcg@20", "err@20"}:
        problems.append("eval.csv")
    for metric in ("mrr@10", "ndcg@20", "err@20"):
        if not (work / f"eval.{metric}.csv").is_file():
            problems.append(f"eval.{metric}.csv")
    expected = {
        "attention.csv": ["layer", "group", "count_above_average", "count_majority", "group_size_total"],
        "influence.csv": ["qid", "docid", "term", "original_score", "removed_score"],
        "influence.terms.csv": ["qid", "docid", "rank", "term", "abs_delta"],
    }
    for name, header in expected.items():
        if _csv_header(work / name) != header:
            problems.append(name)
    return problems


def test_end_to_end_pipeline():
    work, timings, secs = toy_pipeline()
    problems = _schema_problems(work)
    steps = RunManifest.read(manifest_path(work / "encoder.ckpt")).config["pretrain_steps"]
    ok = not problems and secs < 1800 and steps == 500
    report("end-to-end pipeline", ok, f"{len(timings)} steps in {secs:.0f}s ({steps} pretraining steps); "
           f"schema problems: {problems or 'none'}")
    assert ok


def _digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def test_determinism_replay():
    work, _, _ = toy_pipeline()
    sig = work / "significance.csv"
    assert main(["significance", "--run-a", str(work / "rerank.run"), "--run-b", str(work / "rerank.run"),
                 "--qrels", str(toy_corpus_dir() / "qrels.txt"), "--out", str(sig)]) == 0
    mismatched, checked = [], 0
    for i, m in enumerate(pipeline_manifests(work) + [manifest_path(sig)]):
        manifest = RunManifest.read(m)
        target = work / f"replay{i}"
        if main(["replay", str(m), "--redirect", str(target)]) != 0:
            mismatched.append(manifest.command)
            continue
        for out in manifest.outputs.values():
            checked += 1
            if _digest(target / Path(out).name) != _digest(out):
                mismatched.append(f"{manifest.command}:{Path(out).name}")
    ok = not mismatched
    report("determinism", ok, f"{checked} outputs of 9 commands replayed; mismatches: {mismatched or 'none'}")
    assert ok


if __name__ == "__main__":
    tests = [v for k, v in sorted(globals().items()) if k.startswith("test_")]
    failed = 0
    for t in tests:
        try:
            t()
        except AssertionError:
            failed += 1
    sys.exit(1 if failed else 0)
