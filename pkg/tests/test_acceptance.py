"""Acceptance suite: one test per criterion, each recorded in the terminal summary.

The end-to-end runs are expensive (tens of minutes on one core); they share a
session fixture that drives the CLI twice in subprocesses.
"""

import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from abnblip import pipeline
from abnblip import tensor as T
from abnblip.config import Config
from abnblip.corpus_io import read_corpus
from abnblip.metrics import bleu, ce_metrics, lcs_length, read_metrics_tsv, roc_auc, rouge
from abnblip.objectives import acl_loss
from abnblip.qformer import QFormer, QFormerConfig
from abnblip.report import render_report
from abnblip.synth import DEC_ID, Vocabulary, bos_id
from abnblip.taxonomy import N_ABN
from abnblip.trainer import (
    inbatch_retrieval,
    stage2_features,
    teacher_forced_accuracy,
    train_stage1,
    train_stage2,
)
from test_metrics import auc_pair_oracle, bleu_oracle, lcs_dp_oracle, rand_seq, rouge_l_oracle
from test_objectives import acl_loop_oracle, rand_batch

V = len(Vocabulary.closed())
STAGES = ("gen-data", "train-stage1", "train-stage2", "generate", "eval")
OVERFIT_S1 = ["train.stage1_lr=3e-3"]
OVERFIT_S2 = ["train.stage2_lr=1e-3"]


def cli(*args):
    t0 = time.perf_counter()
    proc = subprocess.run(
        [sys.executable, "-m", "abnblip.cli", *args, "--threads", "1"], capture_output=True, text=True
    )
    assert proc.returncode == 0, proc.stderr
    return time.perf_counter() - t0, proc.stdout


def full_pipeline(root: Path) -> dict:
    """gen-data -> train-stage1 -> train-stage2 -> generate -> eval with defaults, seed 0."""
    d = {s: root / s for s in STAGES}
    results = {
        "gen-data": cli("gen-data", "--run-dir", str(d["gen-data"])),
        "train-stage1": cli("train-stage1", "--corpus", str(d["gen-data"]), "--run-dir", str(d["train-stage1"])),
    }
    enc = d["train-stage1"] / "encoder.abnb"
    results["train-stage2"] = cli(
        "train-stage2", "--corpus", str(d["gen-data"]), "--encoder", str(enc), "--run-dir", str(d["train-stage2"])
    )
    results["generate"] = cli(
        "generate", "--corpus", str(d["gen-data"]), "--encoder", str(enc),
        "--qformer", str(d["train-stage2"] / "qformer.abnb"), "--run-dir", str(d["generate"]),
    )
    results["eval"] = cli(
        "eval", "--corpus", str(d["gen-data"]), "--reports", str(d["generate"] / "reports"), "--run-dir", str(d["eval"])
    )
    times = {k: t for k, (t, _) in results.items()}
    stdout = {k: out for k, (_, out) in results.items()}
    return {"dirs": d, "times": times, "stdout": stdout, "encoder": enc}


@pytest.fixture(scope="session")
def runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    return full_pipeline(root / "a"), full_pipeline(root / "b")


@pytest.fixture(scope="session")
def corpus(runs):
    return read_corpus(runs[0]["dirs"]["gen-data"])


# ------------------------------------------------------------------ 1


@pytest.mark.criterion(1, "gradient correctness of the composite loss")
def test_criterion_1_gradients(criterion):
    t0 = time.perf_counter()
    reports = pipeline.run_grad_check(Config.default())
    elapsed = time.perf_counter() - t0
    bad = [r.name for r in reports if not r.passed]
    criterion.note(f"{len(reports) - len(bad)}/{len(reports)} groups, {elapsed:.0f} s")
    assert not bad, bad
    assert elapsed < 300


# ------------------------------------------------------------------ 2


@pytest.mark.criterion(2, "mask isolation over 1000 randomized trials")
def test_criterion_2_mask_isolation(criterion):
    trials, worst_causal, worst_query = 0, 0.0, 0.0
    for m in range(10):
        qf = QFormer(QFormerConfig(vocab_size=V), np.random.default_rng(100 + m))
        rng = np.random.default_rng(m)
        for _ in range(100):
            L = int(rng.integers(3, 13))
            ids = rng.integers(bos_id(N_ABN), V, size=(1, L))
            ids[0, 0] = DEC_ID
            j = int(rng.integers(1, L))
            ids2 = ids.copy()
            ids2[0, j] = (ids[0, j] - bos_id(N_ABN) + 1) % (V - bos_id(N_ABN)) + bos_id(N_ABN)
            v = rng.normal(size=(1, int(rng.integers(1, 8)), 32))
            with T.no_grad():
                h1 = qf.encode_text(ids).h.data
                q1, t1 = qf.joint_forward(ids, v)
                q2, t2 = qf.joint_forward(ids2, v)
                query = qf.query_visual(v)
                z_before = query.Z.data.copy()
                l1 = qf.decode(ids, query).data
                l2 = qf.decode(ids2, query).data
                h2 = qf.encode_text(ids).h.data
                again = qf.query_visual(v)
            worst_causal = max(worst_causal, np.abs(t1.data[:, :j] - t2.data[:, :j]).max(), np.abs(l1[:, :j] - l2[:, :j]).max())
            worst_query = max(worst_query, np.abs(q1.data - q2.data).max())
            # unimodal regimes: the query pass never sees text, the text pass never sees queries
            assert np.array_equal(query.Z.data, z_before) and np.array_equal(again.Z.data, z_before)
            assert np.array_equal(h1, h2)
            trials += 1
    criterion.note(f"{trials} trials, max text change {worst_causal:.1e}, max query change {worst_query:.1e}")
    assert trials == 1000
    assert worst_causal < 1e-9 and worst_query < 1e-9


# ------------------------------------------------------------------ 3


@pytest.mark.criterion(3, "attention and normalization invariants")
def test_criterion_3_invariants(criterion):
    worst_rows, worst_norm, worst_perm = 0.0, 0.0, 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        qf = QFormer(QFormerConfig(vocab_size=V), rng)
        v = rng.normal(size=(3, 9, 32))
        ids = rng.integers(bos_id(N_ABN), V, size=(3, 7))
        ids[:, 0] = DEC_ID
        trace = qf.start_trace()
        with T.no_grad():
            query = qf.query_visual(v)
            text = qf.encode_text(ids)
            qf.decode(ids, query)
            perm = qf.query_visual(v[:, rng.permutation(9)])
        qf.stop_trace()
        for probs in trace:
            worst_rows = max(worst_rows, np.abs(probs.sum(axis=-1) - 1.0).max())
        for emb in (query.Z_proj.data, text.h.data):
            worst_norm = max(worst_norm, np.abs(np.linalg.norm(emb, axis=-1) - 1.0).max())
        worst_perm = max(worst_perm, np.abs(perm.Z.data - query.Z.data).max())
    criterion.note(f"row sums {worst_rows:.1e}, norms {worst_norm:.1e}, permutation {worst_perm:.1e}")
    assert worst_rows < 1e-9 and worst_norm < 1e-9 and worst_perm < 1e-9


# ------------------------------------------------------------------ 4


@pytest.mark.criterion(4, "contrastive loss analytic cases and loop oracle")
def test_criterion_4_acl(criterion):
    Z, H, P = rand_batch(0, 1)
    assert acl_loss(T.Tensor(Z), T.Tensor(H), P).item() == 0.0
    same = np.repeat(Z, 2, axis=0)
    two = acl_loss(T.Tensor(same), T.Tensor(same.copy()), rand_batch(1, 2)[2]).item()
    assert abs(two - 32 * math.log(2)) < 1e-9
    worst = 0.0
    for seed in range(100):
        Z, H, P = rand_batch(seed, 2 + seed % 7)
        worst = max(worst, abs(acl_loss(T.Tensor(Z), T.Tensor(H), P).item() - acl_loop_oracle(Z, H, P, 0.07)))
    criterion.note(f"N=2 error {abs(two - 32 * math.log(2)):.1e}, oracle error {worst:.1e}")
    assert worst < 1e-9


# ------------------------------------------------------------------ 5


@pytest.mark.criterion(5, "stage-1 learning")
def test_criterion_5_stage1(criterion, runs, corpus):
    a = runs[0]
    val = np.loadtxt(a["dirs"]["train-stage1"] / "val.tsv", ndmin=2)
    best_val = float(val[:, 1].max())
    test_auc = read_metrics_tsv(a["dirs"]["eval"] / "metrics.tsv")["cls.macro.auc"]
    cfg = Config.load(overrides=OVERFIT_S1)
    losses = train_stage1(pipeline.build_encoder(cfg), corpus.subset("train")[:8], cfg.train(1), steps=500).log.losses()
    first = int(np.argmax(losses < 0.05)) if (losses < 0.05).any() else None
    criterion.note(
        f"val macro-AUC {best_val:.4f}, test macro-AUC {test_auc:.4f}, "
        f"overfit BCE {losses.min():.4f} first < 0.05 at step {first}, stage 1 {a['times']['train-stage1']:.0f} s"
    )
    assert best_val >= 0.90 and test_auc >= 0.90
    assert first is not None
    assert a["times"]["train-stage1"] < 600


# ------------------------------------------------------------------ 6


@pytest.mark.criterion(6, "stage-2 learning")
def test_criterion_6_stage2(criterion, runs, corpus):
    a = runs[0]
    cfg = Config.load(overrides=OVERFIT_S2)
    enc = pipeline.load_encoder(cfg, a["encoder"])
    digest = enc.digest()
    cases = corpus.subset("train")[:8]
    feats = stage2_features(enc, cases, corpus.vocab, cfg["qformer.max_len"])
    tok, qf = pipeline.build_stage2(cfg, len(corpus.vocab))
    tcfg = cfg.train(2)
    train_stage2(enc, tok, qf, feats, tcfg, steps=600)
    frozen = enc.digest() == digest and all(p.grad is None or not np.any(p.grad) for p in enc.parameters())
    tf_acc = teacher_forced_accuracy(tok, qf, feats, tcfg)
    retrieval = inbatch_retrieval(tok, qf, feats, tcfg)
    reports, _ = pipeline.generate_reports(cfg, enc, tok, qf, cases, corpus.vocab, feats=feats)
    exact = pipeline.evaluate(cfg, cases, {r.case_id: (render_report(r), r) for r in reports})["nlg.abn.exact_match"]
    sim = np.loadtxt(a["dirs"]["generate"] / "similarity.tsv", delimiter="\t")
    diag, off = np.trace(sim) / N_ABN, (sim.sum() - np.trace(sim)) / (N_ABN * (N_ABN - 1))
    default_retrieval = float(a["stdout"]["train-stage2"].split("train_retrieval=")[1].split()[0])
    criterion.note(
        f"frozen {frozen}, overfit retrieval {retrieval:.3f}, teacher-forced {tf_acc:.3f}, exact {exact:.3f}, "
        f"similarity diag {diag:.3f} > off {off:.3f}, default-run retrieval {default_retrieval:.3f}"
    )
    assert frozen
    assert retrieval >= 0.9 and tf_acc > 0.95 and exact >= 0.9
    assert diag > off


# ------------------------------------------------------------------ 7


@pytest.mark.criterion(7, "metric oracles")
def test_criterion_7_metrics(criterion):
    rng = np.random.default_rng(7)
    for _ in range(50):
        c, r = rand_seq(rng, 1), rand_seq(rng, 1)
        assert bleu(c, r) == bleu_oracle(c, r)
        c, r = rand_seq(rng), rand_seq(rng)
        assert lcs_length(c, r) == lcs_dp_oracle(c, r) and rouge(c, r, "L") == rouge_l_oracle(c, r)
        s = np.round(rng.random(30), 1)
        y = rng.random(30) < 0.4
        y[:2] = True, False
        assert roc_auc(s, y)[0] == auc_pair_oracle(s, y)
    Y = np.zeros((1, N_ABN), dtype=bool)
    Y[0, 0] = True
    ce = ce_metrics(["Acute pulmonary embolism is present. Moderate pleural effusion is seen."], Y)
    criterion.note(f"CE P={ce.precision} R={ce.recall} F1={ce.f1:.6f}")
    assert ce.precision == 0.5 and ce.recall == 1.0 and abs(ce.f1 - 2 / 3) < 1e-15


# ------------------------------------------------------------------ 8


def run_files(run: dict) -> dict:
    out = {}
    for stage in ("generate", "eval"):
        base = run["dirs"][stage]
        for p in sorted(base.rglob("*")):
            if p.is_file():
                out[str(p.relative_to(run["dirs"][stage].parent))] = p.read_bytes()
    return out


@pytest.mark.criterion(8, "determinism of the full CLI pipeline")
def test_criterion_8_determinism(criterion, runs):
    a, b = runs
    fa, fb = run_files(a), run_files(b)
    totals = [sum(r["times"].values()) for r in runs]
    n_reports = sum(1 for k in fa if k.endswith(".txt") and "/reports/" in k)
    criterion.note(f"{len(fa)} files, {n_reports} report files, run times {totals[0]:.0f} s and {totals[1]:.0f} s")
    assert fa.keys() == fb.keys() and n_reports > 0
    assert all(fa[k] == fb[k] for k in fa)
    assert (a["dirs"]["eval"] / "metrics.json").read_bytes() == (b["dirs"]["eval"] / "metrics.json").read_bytes()
    assert max(totals) < 15 * 60


# ------------------------------------------------------------------ 9


@pytest.mark.criterion(9, "ablation grid direction")
def test_criterion_9_ablation(criterion, runs, corpus, tmp_path):
    rows = pipeline.run_ablate(Config.default(), corpus, runs[0]["encoder"], tmp_path / "ablate")
    assert len(rows) == 4
    cells = {(r["multiscale"], r["fcls"]): r for r in rows}
    full, base = cells[(True, True)], cells[(False, False)]
    criterion.note(
        f"exact {full['exact_match']:.4f} vs {base['exact_match']:.4f}, "
        f"retrieval {full['retrieval']:.4f} vs {base['retrieval']:.4f}"
    )
    assert full["exact_match"] >= base["exact_match"]
    assert full["retrieval"] >= base["retrieval"]
