"""Classification, text-overlap and clinical-efficacy metrics.

Degenerate denominators follow fixed conventions and are flagged: an AUC with
a single class present is 0.5, and a 0/0 precision/recall/F1 is 1.0.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .taxonomy import N_ABN, REGIONS, name_tokens, region_members, slug

CLS_FIELDS = ("acc", "auc", "sen", "spe", "prec", "f1")


def _ratio(num: float, den: float) -> tuple[float, bool]:
    if den == 0:
        return 1.0, True
    return num / den, False


def roc_auc(scores, labels) -> tuple[float, bool]:
    """Mann-Whitney AUC with midranks; ``(0.5, True)`` when one class is absent."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        return 0.5, True
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg)), False


def f1_from(prec: float, rec: float) -> float:
    return 0.0 if prec + rec == 0 else 2.0 * prec * rec / (prec + rec)


def binary_metrics(scores, labels, threshold: float = 0.5) -> tuple[dict, dict]:
    """Per-label metric values and their degeneracy flags."""
    y = np.asarray(labels).astype(bool)
    pred = np.asarray(scores, dtype=np.float64) >= threshold
    tp = int(np.sum(pred & y))
    tn = int(np.sum(~pred & ~y))
    fp = int(np.sum(pred & ~y))
    fn = int(np.sum(~pred & y))
    sen, f_sen = _ratio(tp, tp + fn)
    spe, f_spe = _ratio(tn, tn + fp)
    prec, f_prec = _ratio(tp, tp + fp)
    auc, f_auc = roc_auc(scores, labels)
    vals = {
        "acc": (tp + tn) / len(y),
        "auc": auc,
        "sen": sen,
        "spe": spe,
        "prec": prec,
        "f1": f1_from(prec, sen),
    }
    flags = {"auc": f_auc, "sen": f_sen, "spe": f_spe, "prec": f_prec}
    return vals, flags


@dataclass
class ClassMetrics:
    per_label: list[dict]
    per_region: dict[str, dict]
    macro: dict
    flags: list[dict] = field(default_factory=list)

    def flat(self) -> dict[str, float]:
        out = {f"cls.macro.{m}": v for m, v in self.macro.items()}
        for name, vals in self.per_region.items():
            out.update({f"cls.region.{slug(name)}.{m}": v for m, v in vals.items()})
        for k, vals in enumerate(self.per_label):
            out.update({f"cls.abn.{k:02d}.{m}": v for m, v in vals.items()})
        out["cls.degenerate_auc"] = float(sum(f.get("auc", False) for f in self.flags))
        return out


def classification_metrics(P, Y, threshold: float = 0.5, pooled: bool = False) -> ClassMetrics:
    """Metrics per abnormality, per region and macro over ``P``/``Y`` of shape (N, 32).

    Region rows average their members' metrics; ``pooled`` instead evaluates
    the flattened member predictions as one binary problem.
    """
    P = np.asarray(P, dtype=np.float64)
    Y = np.asarray(Y).astype(bool)
    if P.ndim != 2 or P.shape != Y.shape or P.shape[0] < 1:
        raise ValueError(f"classification_metrics: P {P.shape} vs Y {Y.shape}")
    per, flags = zip(*(binary_metrics(P[:, k], Y[:, k], threshold) for k in range(P.shape[1])))
    per, flags = list(per), list(flags)
    regions = {}
    for r, name in enumerate(REGIONS):
        members = [k for k in region_members(r) if k < P.shape[1]]
        if pooled:
            regions[name] = binary_metrics(P[:, members].ravel(), Y[:, members].ravel(), threshold)[0]
        else:
            regions[name] = {m: float(np.mean([per[k][m] for k in members])) for m in CLS_FIELDS}
    macro = {m: float(np.mean([p[m] for p in per])) for m in CLS_FIELDS}
    return ClassMetrics(per, regions, macro, flags)


# ---------------------------------------------------------------- text overlap


def _ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidate, reference, n: int = 4) -> float:
    """Sentence BLEU up to order ``n``: clipped precisions, geometric mean, brevity penalty."""
    cand, ref = list(candidate), list(reference)
    if not cand:
        return 0.0
    log_sum = 0.0
    for order in range(1, n + 1):
        c = _ngrams(cand, order)
        total = sum(c.values())
        if total == 0:
            return 0.0
        r = _ngrams(ref, order)
        match = sum(min(v, r[g]) for g, v in c.items())
        if match == 0:
            return 0.0
        log_sum += math.log(match / total)
    bp = 1.0 if len(cand) >= len(ref) else math.exp(1.0 - len(ref) / len(cand))
    return bp * math.exp(log_sum / n)


def lcs_length(a, b) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge(candidate, reference, variant: str = "L") -> float:
    cand, ref = list(candidate), list(reference)
    if not cand and not ref:
        return 1.0
    if not cand or not ref:
        return 0.0
    if variant == "1":
        overlap = sum((Counter(cand) & Counter(ref)).values())
    elif variant == "L":
        overlap = lcs_length(cand, ref)
    else:
        raise ValueError(f"unknown ROUGE variant {variant!r}")
    if overlap == 0:
        return 0.0
    p, r = overlap / len(cand), overlap / len(ref)
    return 2 * p * r / (p + r)


def _align(cand, ref) -> list[tuple[int, int]]:
    """Greedy left-to-right exact unigram alignment, each reference token used once."""
    used = [False] * len(ref)
    pairs = []
    for i, tok in enumerate(cand):
        for j, other in enumerate(ref):
            if not used[j] and other == tok:
                used[j] = True
                pairs.append((i, j))
                break
    return pairs


def meteor_simplified(candidate, reference) -> float:
    """Exact-match METEOR: F_mean = 10PR/(R+9P), penalty 0.5*(chunks/m)^3."""
    cand, ref = list(candidate), list(reference)
    pairs = _align(cand, ref)
    m = len(pairs)
    if m == 0:
        return 0.0
    p, r = m / len(cand), m / len(ref)
    f_mean = 10 * p * r / (r + 9 * p)
    chunks = 1 + sum(
        1 for (i0, j0), (i1, j1) in zip(pairs, pairs[1:]) if not (i1 == i0 + 1 and j1 == j0 + 1)
    )
    return f_mean * (1.0 - 0.5 * (chunks / m) ** 3)


NLG_FIELDS = {
    "bleu1": lambda c, r: bleu(c, r, 1),
    "bleu4": lambda c, r: bleu(c, r, 4),
    "rouge1": lambda c, r: rouge(c, r, "1"),
    "rougeL": lambda c, r: rouge(c, r, "L"),
    "meteor_simplified": meteor_simplified,
}


def nlg_scores(candidate, reference) -> dict[str, float]:
    return {name: fn(candidate, reference) for name, fn in NLG_FIELDS.items()}


def nlg_corpus(pairs) -> dict[str, float]:
    """Average of per-pair scores over ``(candidate, reference)`` word lists."""
    pairs = list(pairs)
    if not pairs:
        return {name: 0.0 for name in NLG_FIELDS}
    scores = [nlg_scores(c, r) for c, r in pairs]
    return {name: float(np.mean([s[name] for s in scores])) for name in NLG_FIELDS}


# ---------------------------------------------------------------- clinical efficacy

NEGATION_CUES = (("no",), ("without",), ("negative", "for"))

# keywords sorted longest first so "acute pulmonary embolism" wins over "pulmonary embolism"
_KEYWORDS = sorted(((tuple(name_tokens(k)), k) for k in range(N_ABN)), key=lambda e: -len(e[0]))


def _words(sentence: str) -> list[str]:
    return re.findall(r"[a-z0-9]+", sentence.lower())


def _negated(words: list[str], start: int) -> bool:
    for cue in NEGATION_CUES:
        n = len(cue)
        for i in range(start - n + 1):
            if tuple(words[i : i + n]) == cue:
                return True
    return False


def sentence_labels(sentence: str) -> dict[int, bool]:
    """Abnormalities mentioned in one sentence and whether each is affirmed."""
    words = _words(sentence)
    taken = [False] * len(words)
    found: dict[int, bool] = {}
    for kw, k in _KEYWORDS:
        n = len(kw)
        for i in range(len(words) - n + 1):
            if tuple(words[i : i + n]) == kw and not any(taken[i : i + n]):
                taken[i : i + n] = [True] * n
                found[k] = found.get(k, False) or not _negated(words, i)
    return found


def split_sentences(text: str) -> list[str]:
    out = []
    for line in text.splitlines():
        if line.lstrip().startswith("#"):
            continue
        out.extend(s for s in re.split(r"[.;!?]", line) if s.strip())
    return out


def extract_labels(text: str) -> np.ndarray:
    y = np.zeros(N_ABN, dtype=bool)
    for sent in split_sentences(text):
        for k, pos in sentence_labels(sent).items():
            y[k] |= pos
    return y


@dataclass
class CEScores:
    precision: float
    recall: float
    f1: float
    degenerate: bool

    def flat(self) -> dict[str, float]:
        return {
            "ce.precision": self.precision,
            "ce.recall": self.recall,
            "ce.f1": self.f1,
            "ce.degenerate": float(self.degenerate),
        }


def ce_from_labels(pred, ref) -> CEScores:
    pred = np.asarray(pred).astype(bool)
    ref = np.asarray(ref).astype(bool)
    tp = int(np.sum(pred & ref))
    prec, d1 = _ratio(tp, int(pred.sum()))
    rec, d2 = _ratio(tp, int(ref.sum()))
    f1 = 1.0 if (d1 and d2) else f1_from(prec, rec)
    return CEScores(prec, rec, f1, d1 or d2)


def ce_metrics(reports, Y) -> CEScores:
    """Micro precision/recall/F1 of labels extracted from ``reports`` against ``Y``."""
    pred = np.stack([extract_labels(t) for t in reports]) if len(reports) else np.zeros((0, N_ABN), bool)
    return ce_from_labels(pred, np.asarray(Y).reshape(len(reports), N_ABN))


# ---------------------------------------------------------------- output


def write_metrics(values: dict[str, float], tsv_path, json_path) -> None:
    keys = sorted(values)
    with open(tsv_path, "w", encoding="utf-8", newline="\n") as fh:
        for k in keys:
            fh.write(f"{k}\t{values[k]!r}\n")
    Path(json_path).write_text(
        json.dumps({k: float(values[k]) for k in keys}, indent=1, sort_keys=True) + "\n", encoding="utf-8"
    )


def read_metrics_tsv(path) -> dict[str, float]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        k, v = line.split("\t")
        out[k] = float(v)
    return out

