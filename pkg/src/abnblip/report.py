"""Greedy per-abnormality decoding and structured report assembly."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .qformer import QFormer, QueryOutput
from .synth import (
    CLS_ID,
    DEC_ID,
    EOS_ID,
    PAD_ID,
    Vocabulary,
    bos_id,
    detokenize,
)
from .taxonomy import N_ABN, REGIONS, region_members


class ReportError(ValueError):
    pass


@dataclass(frozen=True)
class Finding:
    k: int
    tokens: tuple[str, ...]
    prob: float
    positive: bool

    def sentence(self) -> str:
        return detokenize(list(self.tokens))


@dataclass
class StudyReport:
    case_id: str
    checkpoint_id: str
    findings: list[Finding]

    def __post_init__(self):
        if [f.k for f in self.findings] != list(range(N_ABN)):
            raise ReportError("a report needs exactly one finding per abnormality, in order")

    @property
    def sections(self) -> list[tuple[str, list[Finding]]]:
        return [(name, [self.findings[k] for k in region_members(r)]) for r, name in enumerate(REGIONS)]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, StudyReport)
            and self.case_id == other.case_id
            and self.checkpoint_id == other.checkpoint_id
            and self.findings == other.findings
        )


def banned_ids(vocab_size: int) -> np.ndarray:
    """Tokens greedy decoding may never emit: [PAD], [CLS], [DEC] and every BOS_k."""
    ids = [PAD_ID, CLS_ID, DEC_ID] + [bos_id(k) for k in range(N_ABN)]
    return np.array([i for i in ids if i < vocab_size])


def greedy_decode(
    qformer: QFormer,
    query: QueryOutput,
    case_index,
    ks,
    max_len: int | None = None,
    scope: str = "all",
) -> list[list[int]]:
    """Decode one sequence per ``(case_index[b], ks[b])``, starting ``[DEC] BOS_k``.

    Each step recomputes the whole prefix (no cache) and takes the argmax of
    the last position; ``np.argmax`` returns the lowest id among ties.  A
    sequence stops after ``[EOS]`` or at ``max_len`` tokens in total.
    """
    max_len = max_len or qformer.cfg.max_len
    case_index = np.asarray(case_index, dtype=np.int64)
    ks = np.asarray(ks, dtype=np.int64)
    if np.any(ks < 0) or np.any(ks >= N_ABN):
        raise ValueError("abnormality index out of range")
    seqs = [[DEC_ID, bos_id(int(k))] for k in ks]
    banned = banned_ids(qformer.cfg.vocab_size)
    live = [b for b in range(len(seqs)) if len(seqs[b]) < max_len]
    with T.no_grad():
        while live:
            L = len(seqs[live[0]])
            ids = np.array([seqs[b] for b in live])
            logits = qformer.decode(ids, query, case_index[live], ks[live], scope).data[:, L - 1, :]
            logits = logits.copy()
            logits[:, banned] = -np.inf
            nxt = np.argmax(logits, axis=-1)
            for b, tok in zip(live, nxt):
                seqs[b].append(int(tok))
            live = [b for b in live if seqs[b][-1] != EOS_ID and len(seqs[b]) < max_len]
    return seqs


def generate_findings(
    qformer: QFormer,
    query: QueryOutput,
    probs,
    vocab: Vocabulary,
    max_len: int | None = None,
    threshold: float = 0.5,
    scope: str = "all",
) -> list[list[Finding]]:
    """All 32 findings for every case in ``query`` (batched over cases and k)."""
    probs = np.asarray(probs, dtype=np.float64)
    n = probs.shape[0]
    case_index = np.repeat(np.arange(n), N_ABN)
    ks = np.tile(np.arange(N_ABN), n)
    seqs = greedy_decode(qformer, query, case_index, ks, max_len, scope)
    out = []
    for i in range(n):
        row = []
        for k in range(N_ABN):
            p = float(probs[i, k])
            row.append(Finding(k, tuple(vocab.decode(seqs[i * N_ABN + k])), p, p >= threshold))
        out.append(row)
    return out


def generate_finding(qformer, query, probs, vocab, k: int, max_len=None, threshold=0.5, scope="all") -> Finding:
    """Single finding ``k`` for the one case in ``query``."""
    seq = greedy_decode(qformer, query, [0], [k], max_len, scope)[0]
    p = float(np.asarray(probs).reshape(-1)[k])
    return Finding(k, tuple(vocab.decode(seq)), p, p >= threshold)


def assemble_report(findings: list[Finding], case_id: str, checkpoint_id: str = "") -> StudyReport:
    by_k = {f.k: f for f in findings}
    missing = sorted(set(range(N_ABN)) - set(by_k))
    if missing:
        raise ReportError(f"missing findings for abnormalities {missing}")
    return StudyReport(case_id, checkpoint_id, [by_k[k] for k in range(N_ABN)])


# ---------------------------------------------------------------- text forms


def render_report(report: StudyReport) -> str:
    lines = [f"# REPORT {report.case_id}", f"# checkpoint {report.checkpoint_id or '-'}"]
    for name, members in report.sections:
        lines.append(f"## {name}")
        lines.extend(f.sentence() + "." for f in members)
    return "\n".join(lines) + "\n"


def render_sidecar(report: StudyReport) -> str:
    return "".join(f"{f.k}\t{f.prob!r}\t{' '.join(f.tokens)}\n" for f in report.findings)


def render_findings(report: StudyReport) -> str:
    """The corpus findings format: 32 lines of space-separated tokens."""
    return "".join(" ".join(f.tokens) + "\n" for f in report.findings)


def parse_report(text: str, sidecar: str, threshold: float = 0.5) -> StudyReport:
    lines = text.splitlines()
    if len(lines) < 2 or not lines[0].startswith("# REPORT ") or not lines[1].startswith("# checkpoint "):
        raise ReportError("report header missing")
    case_id = lines[0][len("# REPORT ") :]
    ckpt = lines[1][len("# checkpoint ") :]
    ckpt = "" if ckpt == "-" else ckpt
    findings = []
    for line in sidecar.splitlines():
        k, p, toks = line.split("\t")
        prob = float(p)
        findings.append(Finding(int(k), tuple(toks.split()), prob, prob >= threshold))
    report = assemble_report(findings, case_id, ckpt)
    # the body must agree with the sidecar
    body = lines[2:]
    expected = render_report(report).splitlines()[2:]
    if body != expected:
        raise ReportError("report body disagrees with its sidecar")
    return report


def similarity_matrix(z_proj, h) -> np.ndarray:
    """(32, 32) cosine similarities ``S[k, j] = <Z^k, h^j>``, averaged over cases.

    Accepts one case ``(32, d)`` or a batch ``(N, 32, d)``.
    """
    z = np.asarray(getattr(z_proj, "data", z_proj), dtype=np.float64)
    t = np.asarray(getattr(h, "data", h), dtype=np.float64)
    if z.ndim == 2:
        z, t = z[None], t[None]
    s = np.einsum("nkd,njd->nkj", z, t).mean(axis=0)
    return np.clip(s, -1.0, 1.0)


def is_template_match(f: Finding, reference: list[str]) -> bool:
    return list(f.tokens) == list(reference)


__all__ = [
    "Finding",
    "StudyReport",
    "greedy_decode",
    "generate_findings",
    "generate_finding",
    "assemble_report",
    "render_report",
    "parse_report",
    "similarity_matrix",
]
