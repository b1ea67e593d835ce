"""Two-stage optimization.

Stage 1 fits the conv encoder and classifier head with BCE.  Stage 2 freezes
both, caches their outputs once (patch means per stage and P), and fits the
visual tokenizer and querying transformer with ACL + ATG.

Batches come from a per-epoch seeded permutation, so the batch at global step
``s`` depends only on ``(seed, s)``; resuming from a checkpoint therefore
replays the uninterrupted trajectory exactly.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from . import rng as rngmod
from . import tensor as T
from .encoder import ConvEncoder, VisualTokenizer, pooled_features
from .metrics import roc_auc
from .objectives import SmoothingSpec, acl_loss, atg_loss, bce_loss
from .optim import AdamW, AdamWHyper, NonFiniteGradient
from .qformer import QFormer
from .synth import CLS_ID, DEC_ID, PAD_ID, Case, Vocabulary, preprocess_volume

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch: int = 8
    epochs: int = 30
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    lambda_acl: float = 1.0
    lambda_atg: float = 1.0
    ckpt_every: int = 0
    tau: float = 0.07
    label_smoothing: float = 0.1
    acl_soft_weights: bool = True
    reduction: str = "sum"
    condition_scope: str = "all"

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch < 1:
            raise ValueError("batch size must be at least 1")
        if self.lambda_acl < 0 or self.lambda_atg < 0:
            raise ValueError("loss weights must be non-negative")
        if self.tau <= 0:
            raise ValueError("temperature must be positive")
        if self.reduction not in ("mean", "sum") or self.condition_scope not in ("all", "single"):
            raise ValueError("unknown reduction or condition scope")

    def hyper(self) -> AdamWHyper:
        return AdamWHyper(self.lr, self.beta1, self.beta2, self.eps, self.weight_decay)


FULL_SCALE_TRAIN = dict(lr=1e-5, batch=20, epochs=27)


@dataclass
class StepRecord:
    step: int
    total: float
    bce: float = 0.0
    acl: float = 0.0
    atg: float = 0.0
    ms: float = 0.0

    def line(self) -> str:
        return f"{self.step}\t{self.total:.9g}\t{self.bce:.9g}|{self.acl:.9g}|{self.atg:.9g}\t{self.ms:.3f}"


@dataclass
class TrainLog:
    steps: list[StepRecord] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    rejected: list[int] = field(default_factory=list)

    def add(self, rec: StepRecord) -> None:
        if self.steps and rec.step <= self.steps[-1].step:
            raise ValueError("step index must increase")
        if not math.isfinite(rec.total):
            raise DivergenceError(f"loss became non-finite at step {rec.step}")
        self.steps.append(rec)

    def losses(self) -> np.ndarray:
        return np.array([r.total for r in self.steps])

    def text(self) -> str:
        return "".join(r.line() + "\n" for r in self.steps)


def batch_indices(n: int, batch: int, seed: int, step: int) -> np.ndarray:
    """Members of the batch at global ``step``; the last partial batch is kept."""
    per_epoch = math.ceil(n / batch)
    epoch, pos = divmod(step, per_epoch)
    perm = rngmod.stream(seed, "shuffle", epoch).permutation(n)
    return perm[pos * batch : (pos + 1) * batch]


def steps_per_epoch(n: int, batch: int) -> int:
    return math.ceil(n / batch)


def _optimizer_step(opt: AdamW, tlog: TrainLog, step: int) -> None:
    try:
        opt.step()
    except NonFiniteGradient:
        tlog.rejected.append(step)
        log.warning("step %d: non-finite gradient, update rejected", step)


def _save_resumable(path, model_entries: dict, opt: AdamW, step: int) -> None:
    entries = dict(model_entries)
    entries.update(opt.state_entries())
    entries["train.step"] = np.array(float(step))
    checkpoint.save(path, entries)


def stack_volumes(cases: list[Case]) -> np.ndarray:
    return np.stack([preprocess_volume(c.volume) for c in cases]).astype(np.float32)


def stack_labels(cases: list[Case]) -> np.ndarray:
    return np.stack([c.labels for c in cases]).astype(np.float64)


# ---------------------------------------------------------------- stage 1


def predict_probs(encoder: ConvEncoder, volumes: np.ndarray, batch: int = 16) -> np.ndarray:
    out = []
    with T.no_grad():
        for s in range(0, len(volumes), batch):
            maps = encoder.encode_multiscale(T.Tensor(volumes[s : s + batch]))
            out.append(encoder.classify(maps[-1])[1].data)
    return np.concatenate(out)


def macro_auc(probs: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean([roc_auc(probs[:, k], labels[:, k])[0] for k in range(labels.shape[1])]))


@dataclass
class Stage1Result:
    log: TrainLog
    best_auc: float | None
    best_state: dict | None


def train_stage1(
    encoder: ConvEncoder,
    train_cases: list[Case],
    cfg: TrainConfig,
    val_cases: list[Case] | None = None,
    steps: int | None = None,
    resume: dict | None = None,
    resume_path=None,
    on_step=None,
) -> Stage1Result:
    """Minimize BCE over ``train_cases``; keep the best-validation-AUC weights.

    ``steps`` overrides ``cfg.epochs``.  ``resume`` is a loaded resumable
    checkpoint; ``resume_path`` receives one every ``cfg.ckpt_every`` steps.
    """
    if not train_cases:
        raise ValueError("stage 1 needs a non-empty train split")
    x_train = stack_volumes(train_cases)
    y_train = stack_labels(train_cases)
    n = len(train_cases)
    spe = steps_per_epoch(n, cfg.batch)
    total_steps = steps if steps is not None else cfg.epochs * spe
    x_val = stack_volumes(val_cases) if val_cases else None
    y_val = stack_labels(val_cases) if val_cases else None

    opt = AdamW(list(encoder.named_parameters()), cfg.hyper())
    start = 0
    best_auc, best_state = None, None
    if resume is not None:
        encoder.load_state_dict({k: v for k, v in resume.items() if not k.startswith(("opt.", "train.", "best."))})
        opt.load_state_entries(resume)
        start = int(resume["train.step"])
        if "train.best_auc" in resume:
            best_auc = float(resume["train.best_auc"])
            best_state = {k[5:]: v.copy() for k, v in resume.items() if k.startswith("best.")}

    tlog = TrainLog()
    for step in range(start, total_steps):
        t0 = time.perf_counter()
        idx = batch_indices(n, cfg.batch, cfg.seed, step)
        opt.zero_grad()
        _, _, probs = encoder(T.Tensor(x_train[idx]))
        loss = bce_loss(probs, y_train[idx])
        T.backward(loss)
        _optimizer_step(opt, tlog, step)
        value = loss.item()
        tlog.add(StepRecord(step, value, bce=value, ms=1000 * (time.perf_counter() - t0)))
        if on_step is not None:
            on_step(step, value)
        if x_val is not None and ((step + 1) % spe == 0 or step + 1 == total_steps):
            auc = macro_auc(predict_probs(encoder, x_val), y_val)
            tlog.epochs.append({"step": step + 1, "val_macro_auc": auc})
            log.info("stage1 step %d loss %.4f val macro-AUC %.4f", step + 1, value, auc)
            if best_auc is None or auc > best_auc:
                best_auc, best_state = auc, encoder.state_dict()
        if resume_path is not None and cfg.ckpt_every and (step + 1) % cfg.ckpt_every == 0:
            entries = dict(encoder.state_dict())
            if best_state is not None:
                entries.update({f"best.{k}": v for k, v in best_state.items()})
                entries["train.best_auc"] = np.array(best_auc)
            _save_resumable(resume_path, entries, opt, step + 1)
    if best_state is not None:
        encoder.load_state_dict(best_state)
    return Stage1Result(tlog, best_auc, best_state)


# ---------------------------------------------------------------- stage 2


def _pad(rows: list[list[int]], length: int) -> np.ndarray:
    out = np.full((len(rows), length), PAD_ID, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


@dataclass
class TextBatch:
    """Per-case token arrays, shaped (n_cases, 32, L)."""

    enc_ids: np.ndarray
    dec_ids: np.ndarray
    dec_targets: np.ndarray
    dec_mask: np.ndarray
    findings: list  # findings[i][k] as token tuples, for duplicate-aware retrieval

    @classmethod
    def build(cls, cases: list[Case], vocab: Vocabulary, max_len: int) -> "TextBatch":
        enc, dec, tgt = [], [], []
        for c in cases:
            for f in c.findings:
                ids = vocab.encode(f)
                if len(ids) > max_len:
                    raise ValueError(f"{c.case_id}: finding longer than max_len {max_len}")
                assert ids[0] == DEC_ID
                enc.append([CLS_ID] + ids[1:])
                dec.append(ids[:-1])
                tgt.append(ids[1:])
        Le = max(map(len, enc))
        Ld = max(map(len, dec))
        n = len(cases)
        enc_ids = _pad(enc, Le).reshape(n, -1, Le)
        dec_ids = _pad(dec, Ld).reshape(n, -1, Ld)
        dec_targets = _pad(tgt, Ld).reshape(n, -1, Ld)
        mask = dec_targets != PAD_ID
        # the first target is BOS_k, which the input already fixes
        mask[..., 0] = False
        return cls(enc_ids, dec_ids, dec_targets, mask, [[tuple(f) for f in c.findings] for c in cases])


@dataclass
class Stage2Features:
    pooled: list  # per stage (n, tokens_l, C_l)
    probs: np.ndarray  # (n, 32), frozen stage-1 predictions
    text: TextBatch

    def take(self, idx) -> tuple[list, np.ndarray]:
        return [p[idx] for p in self.pooled], self.probs[idx]


def stage2_features(encoder: ConvEncoder, cases: list[Case], vocab: Vocabulary, max_len: int) -> Stage2Features:
    pooled, probs = pooled_features(encoder, stack_volumes(cases))
    return Stage2Features(pooled, probs, TextBatch.build(cases, vocab, max_len))


@dataclass
class Stage2Outputs:
    loss: T.Tensor
    acl: T.Tensor
    atg: T.Tensor
    query: object
    h: T.Tensor
    logits: T.Tensor


def stage2_loss(
    tokenizer: VisualTokenizer,
    qformer: QFormer,
    pooled: list,
    probs,
    text: TextBatch,
    idx,
    cfg: TrainConfig,
    probs_for_fcls=None,
) -> Stage2Outputs:
    """lambda_acl * ACL + lambda_atg * ATG for one batch.

    ``pooled``/``probs`` are the batch's per-stage patch means and (constant)
    P; ``idx`` selects the matching rows of ``text``.  ``probs_for_fcls``
    replaces the P fed to F_CLS, so a caller can route a differentiable P
    through the visual tokens while the ACL weights stay detached.
    """
    idx = np.asarray(idx)
    probs = np.asarray(getattr(probs, "data", probs), dtype=np.float64)
    n = len(idx)
    vis = tokenizer(pooled, probs if probs_for_fcls is None else probs_for_fcls)
    q = qformer.query_visual(vis.tokens)
    K = text.enc_ids.shape[1]
    # identical sentences (every shared negative) are encoded once, then gathered
    uniq, inverse = np.unique(text.enc_ids[idx].reshape(n * K, -1), axis=0, return_inverse=True)
    enc = qformer.encode_text(uniq)
    h = T.reshape(T.take(enc.h, inverse.reshape(-1), axis=0), (n, K, -1))
    l_acl = acl_loss(q.Z_proj, h, probs, cfg.tau, cfg.acl_soft_weights)
    logits = qformer.decode(
        text.dec_ids[idx].reshape(n * K, -1),
        q,
        case_index=np.repeat(np.arange(n), K),
        k_index=np.tile(np.arange(K), n),
        scope=cfg.condition_scope,
    )
    spec = SmoothingSpec(cfg.label_smoothing, qformer.cfg.vocab_size)
    l_atg = atg_loss(
        logits,
        text.dec_targets[idx].reshape(n * K, -1),
        spec,
        mask=text.dec_mask[idx].reshape(n * K, -1),
        reduction=cfg.reduction,
        n_cases=n,
    )
    loss = T.add(T.mul(l_acl, cfg.lambda_acl), T.mul(l_atg, cfg.lambda_atg))
    return Stage2Outputs(loss, l_acl, l_atg, q, h, logits)


def stage2_forward(tokenizer, qformer, feats: Stage2Features, idx, cfg: TrainConfig) -> Stage2Outputs:
    """:func:`stage2_loss` on the cached features of cases ``idx``."""
    pooled, probs = feats.take(np.asarray(idx))
    return stage2_loss(tokenizer, qformer, pooled, probs, feats.text, idx, cfg)


def stage2_modules_entries(tokenizer: VisualTokenizer, qformer: QFormer) -> dict:
    entries = {f"tokenizer.{k}": v for k, v in tokenizer.state_dict().items()}
    entries.update({f"qformer.{k}": v for k, v in qformer.state_dict().items()})
    return entries


def load_stage2_entries(tokenizer: VisualTokenizer, qformer: QFormer, entries: dict) -> None:
    tokenizer.load_state_dict({k[10:]: v for k, v in entries.items() if k.startswith("tokenizer.")})
    qformer.load_state_dict({k[8:]: v for k, v in entries.items() if k.startswith("qformer.")})


@dataclass
class Stage2Result:
    log: TrainLog


def train_stage2(
    encoder: ConvEncoder,
    tokenizer: VisualTokenizer,
    qformer: QFormer,
    feats: Stage2Features,
    cfg: TrainConfig,
    steps: int | None = None,
    resume: dict | None = None,
    resume_path=None,
    on_step=None,
) -> Stage2Result:
    """Minimize lambda_acl * ACL + lambda_atg * ATG with the encoder frozen.

    ``feats`` must come from :func:`stage2_features` with this ``encoder``.
    """
    n = len(feats.probs)
    if n == 0:
        raise ValueError("stage 2 needs a non-empty train split")
    digest = encoder.digest()
    named = [(f"tokenizer.{k}", p) for k, p in tokenizer.named_parameters()]
    named += [(f"qformer.{k}", p) for k, p in qformer.named_parameters()]
    opt = AdamW(named, cfg.hyper())
    start = 0
    if resume is not None:
        load_stage2_entries(tokenizer, qformer, resume)
        opt.load_state_entries(resume)
        start = int(resume["train.step"])
    total_steps = steps if steps is not None else cfg.epochs * steps_per_epoch(n, cfg.batch)

    tlog = TrainLog()
    for step in range(start, total_steps):
        t0 = time.perf_counter()
        idx = batch_indices(n, cfg.batch, cfg.seed, step)
        opt.zero_grad()
        out = stage2_forward(tokenizer, qformer, feats, idx, cfg)
        T.backward(out.loss)
        _optimizer_step(opt, tlog, step)
        rec = StepRecord(
            step,
            out.loss.item(),
            acl=out.acl.item(),
            atg=out.atg.item(),
            ms=1000 * (time.perf_counter() - t0),
        )
        tlog.add(rec)
        if on_step is not None:
            on_step(step, rec.total)
        if resume_path is not None and cfg.ckpt_every and (step + 1) % cfg.ckpt_every == 0:
            _save_resumable(resume_path, stage2_modules_entries(tokenizer, qformer), opt, step + 1)
        if (step + 1) % steps_per_epoch(n, cfg.batch) == 0:
            log.info("stage2 step %d loss %.4f (acl %.4f atg %.4f)", step + 1, rec.total, rec.acl, rec.atg)
    if encoder.digest() != digest:
        raise RuntimeError("encoder parameters changed during stage 2")
    return Stage2Result(tlog)


# ---------------------------------------------------------------- stage-2 diagnostics


def teacher_forced_accuracy(tokenizer, qformer, feats: Stage2Features, cfg: TrainConfig, batch: int = 8) -> float:
    hits = total = 0
    n = len(feats.probs)
    with T.no_grad():
        for s in range(0, n, batch):
            idx = np.arange(s, min(n, s + batch))
            out = stage2_forward(tokenizer, qformer, feats, idx, cfg)
            K = feats.text.dec_ids.shape[1]
            pred = out.logits.data.argmax(axis=-1)
            tgt = feats.text.dec_targets[idx].reshape(len(idx) * K, -1)
            mask = feats.text.dec_mask[idx].reshape(len(idx) * K, -1)
            hits += int(((pred == tgt) & mask).sum())
            total += int(mask.sum())
    return hits / max(total, 1)


def inbatch_retrieval(tokenizer, qformer, feats: Stage2Features, cfg: TrainConfig, batch: int | None = None) -> float:
    """Image->text top-1 over batches of the training order.

    For case i and abnormality k the retrieved text is argmax_j <Z_i^k, h_j^k>
    within the batch; it counts as a hit when its finding equals case i's
    finding (identical sentences have identical embeddings, so j == i cannot
    be singled out among duplicates).
    """
    batch = batch or cfg.batch
    n = len(feats.probs)
    hits = total = 0
    with T.no_grad():
        for s in range(steps_per_epoch(n, batch)):
            idx = batch_indices(n, batch, cfg.seed, s)
            out = stage2_forward(tokenizer, qformer, feats, idx, cfg)
            z = out.query.Z_proj.data  # (b, K, d)
            h = out.h.data
            sims = np.einsum("ikd,jkd->kij", z, h)
            best = sims.argmax(axis=2)  # (K, b)
            for k in range(best.shape[0]):
                for a, i in enumerate(idx):
                    j = idx[best[k, a]]
                    hits += feats.text.findings[j][k] == feats.text.findings[i][k]
                    total += 1
    return hits / max(total, 1)
