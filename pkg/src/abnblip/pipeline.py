"""End-to-end steps: corpus, both training stages, report generation,
evaluation, gradient verification and the visual-token ablation grid.

Each step reads and writes plain files under a directory, so steps compose
across processes; every output directory also receives the resolved config.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint
from . import rng as rngmod
from . import tensor as T
from .config import Config
from .corpus_io import write_corpus
from .encoder import ConvEncoder, VisualTokenizer, n_visual_tokens, patch_pool
from .gradcheck import GradReport, grad_check
from .metrics import (
    ce_metrics,
    classification_metrics,
    nlg_corpus,
    write_metrics,
)
from .objectives import bce_loss
from .qformer import QFormer
from .report import (
    Finding,
    assemble_report,
    generate_findings,
    parse_report,
    render_findings,
    render_report,
    render_sidecar,
    similarity_matrix,
)
from .synth import Corpus, Vocabulary, default_priors, finding_words, generate_case, make_corpus
from .taxonomy import N_ABN
from .trainer import (
    Stage2Features,
    TextBatch,
    inbatch_retrieval,
    load_stage2_entries,
    stack_labels,
    stack_volumes,
    stage2_features,
    stage2_loss,
    stage2_modules_entries,
    train_stage1,
    train_stage2,
)

log = logging.getLogger(__name__)

ENCODER_FILE = "encoder.abnb"
STAGE2_FILE = "qformer.abnb"
RESUME_FILE = "resume.abnb"


def _write_config(cfg: Config, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.txt").write_text(cfg.text(), encoding="utf-8")


def build_encoder(cfg: Config, **changes) -> ConvEncoder:
    return ConvEncoder(cfg.encoder(**changes), rngmod.stream(cfg["seed"], "init", 0))


def build_stage2(cfg: Config, vocab_size: int, **changes) -> tuple[VisualTokenizer, QFormer]:
    tok = VisualTokenizer(cfg.encoder(**changes), rngmod.stream(cfg["seed"], "init", 1))
    qf = QFormer(cfg.qformer(vocab_size), rngmod.stream(cfg["seed"], "init", 2))
    return tok, qf


def load_encoder(cfg: Config, path, **changes) -> ConvEncoder:
    enc = build_encoder(cfg, **changes)
    enc.load_state_dict(checkpoint.load(path))
    return enc


def load_stage2(cfg: Config, path, vocab_size: int) -> tuple[VisualTokenizer, QFormer]:
    tok, qf = build_stage2(cfg, vocab_size)
    load_stage2_entries(tok, qf, checkpoint.load(path))
    return tok, qf


# ---------------------------------------------------------------- data


def gen_data(cfg: Config, out) -> Corpus:
    out = Path(out)
    corpus = make_corpus(
        cfg["data.n"],
        cfg["seed"],
        extents=cfg["data.extents"],
        split_ratio=cfg["data.split"],
        noise=cfg["data.noise"],
    )
    write_corpus(corpus, out)
    _write_config(cfg, out)
    return corpus


# ---------------------------------------------------------------- training


@dataclass
class StageOutput:
    checkpoint: Path
    checkpoint_id: str
    log_text: str
    summary: dict


def run_stage1(cfg: Config, corpus: Corpus, out, resume=None) -> StageOutput:
    out = Path(out)
    _write_config(cfg, out)
    enc = build_encoder(cfg)
    tcfg = cfg.train(1)
    t0 = time.perf_counter()
    res = train_stage1(
        enc,
        corpus.subset("train"),
        tcfg,
        val_cases=corpus.subset("val") or None,
        resume=checkpoint.load(resume) if resume else None,
        resume_path=out / RESUME_FILE,
    )
    ckpt_id = checkpoint.save(out / ENCODER_FILE, enc.state_dict())
    text = res.log.text()
    (out / "train.log").write_text(text, encoding="utf-8")
    (out / "val.tsv").write_text(
        "".join(f"{e['step']}\t{e['val_macro_auc']!r}\n" for e in res.log.epochs), encoding="utf-8"
    )
    summary = {
        "best_val_macro_auc": res.best_auc,
        "steps": len(res.log.steps),
        "rejected_steps": len(res.log.rejected),
        "seconds": time.perf_counter() - t0,
    }
    log.info("stage 1 done: %s", summary)
    return StageOutput(out / ENCODER_FILE, ckpt_id, text, summary)


def run_stage2(cfg: Config, corpus: Corpus, encoder_path, out, resume=None) -> StageOutput:
    out = Path(out)
    _write_config(cfg, out)
    enc = load_encoder(cfg, encoder_path)
    tok, qf = build_stage2(cfg, len(corpus.vocab))
    tcfg = cfg.train(2)
    feats = stage2_features(enc, corpus.subset("train"), corpus.vocab, cfg["qformer.max_len"])
    t0 = time.perf_counter()
    res = train_stage2(
        enc,
        tok,
        qf,
        feats,
        tcfg,
        resume=checkpoint.load(resume) if resume else None,
        resume_path=out / RESUME_FILE,
    )
    ckpt_id = checkpoint.save(out / STAGE2_FILE, stage2_modules_entries(tok, qf))
    text = res.log.text()
    (out / "train.log").write_text(text, encoding="utf-8")
    summary = {
        "train_retrieval": inbatch_retrieval(tok, qf, feats, tcfg),
        "steps": len(res.log.steps),
        "rejected_steps": len(res.log.rejected),
        "seconds": time.perf_counter() - t0,
    }
    log.info("stage 2 done: %s", summary)
    return StageOutput(out / STAGE2_FILE, ckpt_id, text, summary)


# ---------------------------------------------------------------- generation


def generate_reports(
    cfg: Config,
    encoder: ConvEncoder,
    tokenizer: VisualTokenizer,
    qformer: QFormer,
    cases,
    vocab,
    checkpoint_id: str = "",
    feats: Stage2Features | None = None,
):
    """Reports for ``cases`` and the mean 32x32 similarity matrix between the
    query embeddings and the embeddings of each case's reference findings."""
    if feats is None:
        feats = stage2_features(encoder, cases, vocab, cfg["qformer.max_len"])
    tcfg = cfg.train(2)
    reports = []
    sims = []
    batch = cfg["report.batch"]
    for s in range(0, len(cases), batch):
        idx = np.arange(s, min(len(cases), s + batch))
        pooled, probs = feats.take(idx)
        with T.no_grad():
            out = stage2_loss(tokenizer, qformer, pooled, probs, feats.text, idx, tcfg)
        sims.append(similarity_matrix(out.query.Z_proj, out.h) * len(idx))
        rows = generate_findings(
            qformer,
            out.query,
            probs,
            vocab,
            threshold=cfg["report.threshold"],
            scope=cfg["report.condition_scope"],
        )
        for i, findings in zip(idx, rows):
            reports.append(assemble_report(findings, cases[i].case_id, checkpoint_id))
    sim = np.sum(sims, axis=0) / max(len(cases), 1)
    return reports, sim


def run_generate(cfg: Config, corpus: Corpus, encoder_path, stage2_path, out) -> Path:
    out = Path(out)
    _write_config(cfg, out)
    enc = load_encoder(cfg, encoder_path)
    tok, qf = load_stage2(cfg, stage2_path, len(corpus.vocab))
    ckpt_id = f"{checkpoint.content_id(encoder_path)}+{checkpoint.content_id(stage2_path)}"
    cases = corpus.subset(cfg["report.split"])
    reports, sim = generate_reports(cfg, enc, tok, qf, cases, corpus.vocab, ckpt_id)
    rdir = out / "reports"
    rdir.mkdir(parents=True, exist_ok=True)
    for r in reports:
        (rdir / f"{r.case_id}.txt").write_text(render_report(r), encoding="utf-8")
        (rdir / f"{r.case_id}.sidecar.tsv").write_text(render_sidecar(r), encoding="utf-8")
        (rdir / f"{r.case_id}.findings.txt").write_text(render_findings(r), encoding="utf-8")
    np.savetxt(out / "similarity.tsv", sim, delimiter="\t", fmt="%.12g")
    return rdir


def load_reports(rdir) -> dict:
    rdir = Path(rdir)
    out = {}
    for p in sorted(rdir.glob("*.txt")):
        if p.name.endswith(".findings.txt"):
            continue
        cid = p.stem
        side = rdir / f"{cid}.sidecar.tsv"
        text = p.read_text(encoding="utf-8")
        out[cid] = (text, parse_report(text, side.read_text(encoding="utf-8")))
    return out


# ---------------------------------------------------------------- evaluation


def reference_report_text(case) -> str:
    """The ground-truth findings laid out exactly like a generated report."""
    findings = [Finding(k, tuple(case.findings[k]), float(case.labels[k]), bool(case.labels[k])) for k in range(N_ABN)]
    return render_report(assemble_report(findings, case.case_id))


def evaluate(cfg: Config, cases, reports: dict) -> dict[str, float]:
    """All metrics over the ``cases`` that have a generated report.

    ``reports`` maps case id to ``(report text, StudyReport)``.
    """
    cases = [c for c in cases if c.case_id in reports]
    if not cases:
        raise ValueError("no generated reports for the evaluation cases")
    parsed = [reports[c.case_id][1] for c in cases]
    texts = [reports[c.case_id][0] for c in cases]
    P = np.array([[f.prob for f in r.findings] for r in parsed])
    Y = stack_labels(cases).astype(bool)
    values = classification_metrics(P, Y, cfg["report.threshold"], pooled=cfg["eval.pooled_regions"]).flat()

    abn_pairs, study_pairs, exact = [], [], []
    for c, r in zip(cases, parsed):
        cand_all, ref_all = [], []
        for f in r.findings:
            cand = finding_words(list(f.tokens))
            ref = finding_words(c.findings[f.k])
            abn_pairs.append((cand, ref))
            exact.append(list(f.tokens) == list(c.findings[f.k]))
            cand_all += cand
            ref_all += ref
        study_pairs.append((cand_all, ref_all))
    values.update({f"nlg.abn.{k}": v for k, v in nlg_corpus(abn_pairs).items()})
    values.update({f"nlg.study.{k}": v for k, v in nlg_corpus(study_pairs).items()})
    values["nlg.abn.exact_match"] = float(np.mean(exact))
    values.update(ce_metrics(texts, Y).flat())
    values["eval.n_cases"] = float(len(cases))
    return values


def run_eval(cfg: Config, corpus: Corpus, reports_dir, out) -> dict[str, float]:
    out = Path(out)
    _write_config(cfg, out)
    values = evaluate(cfg, corpus.subset(cfg["eval.split"]), load_reports(reports_dir))
    write_metrics(values, out / "metrics.tsv", out / "metrics.json")
    return values


# ---------------------------------------------------------------- verification


def composite_objective(cfg: Config, n_cases: int | None = None):
    """Toy-config models, a few synthetic cases, and ``f() = BCE + ACL + ATG``.

    The whole chain is differentiable: the encoder's P feeds the BCE and the
    F_CLS token, the patch means feed the tokenizer; only the ACL batch
    weights use a detached copy of P.
    """
    n = n_cases or cfg["check.n_cases"]
    seed = cfg["seed"]
    cases = [
        generate_case(rngmod.derive_seed(seed, "check", i), default_priors(), cfg["data.extents"], cfg["data.noise"])
        for i in range(n)
    ]
    vocab = Vocabulary.closed()
    enc = build_encoder(cfg)
    tok, qf = build_stage2(cfg, len(vocab))
    volumes = stack_volumes(cases).astype(np.float64)
    labels = stack_labels(cases)
    text = TextBatch.build(cases, vocab, cfg["qformer.max_len"])
    tcfg = cfg.train(2)
    patches = enc.cfg.stage_patches()
    idx = np.arange(n)
    with T.no_grad():
        p_const = enc(T.Tensor(volumes))[2].data

    def f():
        maps, _, probs = enc(T.Tensor(volumes))
        pooled = [patch_pool(m, p) for m, p in zip(maps, patches)]
        out = stage2_loss(tok, qf, pooled, p_const, text, idx, tcfg, probs_for_fcls=probs)
        return T.add(bce_loss(probs, labels), out.loss)

    params = {}
    for prefix, mod in (("encoder", enc), ("tokenizer", tok), ("qformer", qf)):
        params.update({f"{prefix}.{k}": p for k, p in mod.named_parameters()})
    return f, params


def run_grad_check(cfg: Config) -> list[GradReport]:
    f, params = composite_objective(cfg)
    return grad_check(
        f,
        params,
        eps=cfg["check.eps"],
        tol=cfg["check.tol"],
        samples=cfg["check.samples"],
        rng=rngmod.stream(cfg["seed"], "check-coords"),
        floor=cfg["check.floor"],
    )


# ---------------------------------------------------------------- ablation

ABLATION_CELLS = (
    ("L5 only", False, False),
    ("L5 only", False, True),
    ("Multi-scale", True, False),
    ("Multi-scale", True, True),
)


def run_ablate(cfg: Config, corpus: Corpus, encoder_path, out) -> list[dict]:
    """Stage 2 + generation + scoring for the four visual-token variants.

    All cells share the frozen stage-1 encoder; only which token blocks
    reach the querying transformer changes.
    """
    out = Path(out)
    _write_config(cfg, out)
    train_cases = corpus.subset("train")
    if cfg["ablate.n_train"]:
        train_cases = train_cases[: cfg["ablate.n_train"]]
    eval_cases = corpus.subset(cfg["report.split"])
    tcfg = cfg.train(2)
    tcfg.epochs = cfg["ablate.stage2_epochs"]
    rows = []
    for label, ms, fcls in ABLATION_CELLS:
        enc = load_encoder(cfg, encoder_path, use_multiscale=ms, use_fcls=fcls)
        tok, qf = build_stage2(cfg, len(corpus.vocab), use_multiscale=ms, use_fcls=fcls)
        feats = stage2_features(enc, train_cases, corpus.vocab, cfg["qformer.max_len"])
        train_stage2(enc, tok, qf, feats, tcfg)
        efeats = stage2_features(enc, eval_cases, corpus.vocab, cfg["qformer.max_len"])
        reports, _ = generate_reports(cfg, enc, tok, qf, eval_cases, corpus.vocab, feats=efeats)
        texts = {r.case_id: (render_report(r), r) for r in reports}
        values = evaluate(cfg, eval_cases, texts)
        row = {
            "cell": f"{label} / F_CLS {'on' if fcls else 'off'}",
            "multiscale": ms,
            "fcls": fcls,
            "n_tokens": n_visual_tokens(enc.cfg, corpus.meta.get("extents", cfg["data.extents"])),
            "exact_match": values["nlg.abn.exact_match"],
            "retrieval": inbatch_retrieval(tok, qf, efeats, tcfg),
            "ce_f1": values["ce.f1"],
            "bleu4": values["nlg.abn.bleu4"],
        }
        rows.append(row)
        log.info("ablation %s: %s", row["cell"], row)
    write_ablation(rows, out / "ablation.tsv")
    (out / "ablation.json").write_text(json.dumps(rows, indent=1) + "\n", encoding="utf-8")
    return rows


ABLATION_COLUMNS = ("cell", "multiscale", "fcls", "n_tokens", "exact_match", "retrieval", "ce_f1", "bleu4")


def format_ablation(rows: list[dict]) -> str:
    lines = ["\t".join(ABLATION_COLUMNS)]
    for r in rows:
        vals = [r[c] if isinstance(r[c], str) else (f"{r[c]:.6f}" if isinstance(r[c], float) else str(r[c])) for c in ABLATION_COLUMNS]
        lines.append("\t".join(vals))
    return "\n".join(lines) + "\n"


def write_ablation(rows: list[dict], path) -> None:
    Path(path).write_text(format_ablation(rows), encoding="utf-8")

