"""On-disk corpus layout.

    <dir>/manifest.tsv         id <TAB> split <TAB> 32-char '0'/'1' label string
    <dir>/vocab.txt            one token per line, line number = id
    <dir>/volumes/<id>.vol     b"VOL0" | D,H,W u32 | little-endian f32 payload
    <dir>/findings/<id>.txt    32 lines of space-separated tokens
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .synth import Case, Corpus, Vocabulary
from .taxonomy import N_ABN

VOL_MAGIC = b"VOL0"


class CorpusError(ValueError):
    pass


def volume_bytes(vol: np.ndarray) -> bytes:
    vol = np.asarray(vol, dtype="<f4")
    if vol.ndim != 3:
        raise CorpusError("volume must be 3-D")
    return VOL_MAGIC + struct.pack("<3I", *vol.shape) + vol.tobytes()


def read_volume(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != VOL_MAGIC or len(buf) < 16:
        raise CorpusError(f"{path}: bad volume header")
    shape = struct.unpack_from("<3I", buf, 4)
    n = int(np.prod(shape))
    if len(buf) != 16 + 4 * n:
        raise CorpusError(f"{path}: payload size mismatch")
    return np.frombuffer(buf, dtype="<f4", offset=16).reshape(shape).astype(np.float32)


def write_findings(path, findings: list[list[str]]) -> None:
    Path(path).write_text("".join(" ".join(f) + "\n" for f in findings), encoding="utf-8")


def read_findings(path) -> list[list[str]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [line.split() for line in lines]


def write_corpus(corpus: Corpus, root) -> None:
    root = Path(root)
    (root / "volumes").mkdir(parents=True, exist_ok=True)
    (root / "findings").mkdir(parents=True, exist_ok=True)
    rows = []
    for case, split in zip(corpus.cases, corpus.split):
        labels = "".join("1" if y else "0" for y in case.labels)
        rows.append(f"{case.case_id}\t{split}\t{labels}\n")
        (root / "volumes" / f"{case.case_id}.vol").write_bytes(volume_bytes(case.volume))
        write_findings(root / "findings" / f"{case.case_id}.txt", case.findings)
    (root / "manifest.tsv").write_text("".join(rows), encoding="utf-8")
    (root / "vocab.txt").write_text("".join(t + "\n" for t in corpus.vocab.tokens), encoding="utf-8")


def read_corpus(root) -> Corpus:
    root = Path(root)
    manifest = root / "manifest.tsv"
    if not manifest.is_file():
        raise CorpusError(f"no manifest in {root}")
    try:
        vocab = Vocabulary((root / "vocab.txt").read_text(encoding="utf-8").splitlines())
    except (OSError, ValueError) as exc:
        raise CorpusError(f"bad vocabulary: {exc}") from exc
    cases, split = [], []
    for lineno, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), 1):
        parts = line.split("\t")
        if len(parts) != 3 or len(parts[2]) != N_ABN or set(parts[2]) - {"0", "1"}:
            raise CorpusError(f"manifest line {lineno} malformed")
        cid, sp, lab = parts
        if sp not in ("train", "val", "test"):
            raise CorpusError(f"manifest line {lineno}: unknown split {sp!r}")
        try:
            vol = read_volume(root / "volumes" / f"{cid}.vol")
            findings = read_findings(root / "findings" / f"{cid}.txt")
        except OSError as exc:
            raise CorpusError(str(exc)) from exc
        if len(findings) != N_ABN:
            raise CorpusError(f"{cid}: expected {N_ABN} findings, got {len(findings)}")
        try:
            vocab.encode(sum(findings, []))
        except KeyError as exc:
            raise CorpusError(f"{cid}: {exc}") from exc
        labels = np.array([c == "1" for c in lab])
        cases.append(Case(cid, vol, labels, findings))
        split.append(sp)
    return Corpus(cases, vocab, split)
