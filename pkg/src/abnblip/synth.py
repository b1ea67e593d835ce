"""Synthetic CTPA-like corpus with planted, learnable abnormality signatures.

Each abnormality ``k`` owns one cell of a 4 x 4 x 2 grid over the volume
(cells of one anatomical region are contiguous).  A positive case renders a
sphere, slab or rod at that cell with an intensity offset that is distinct
per abnormality; the severity drawn for the case (mild/moderate/severe) scales
size and amplitude and selects the finding template, so the text is grounded
in the image.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .taxonomy import N_ABN, NAMES, name_tokens

PAD, CLS, DEC, EOS = "[PAD]", "[CLS]", "[DEC]", "[EOS]"
SPECIALS = [PAD, CLS, DEC, EOS] + [f"BOS_{k}" for k in range(N_ABN)]
PAD_ID, CLS_ID, DEC_ID, EOS_ID = 0, 1, 2, 3
BOS_BASE = 4

SEVERITY_WORDS = ("mild", "moderate", "severe")
VERB_WORDS = ("seen", "present", "noted")
NEGATIVE_PREFIX = ("no", "evidence", "of")

DEFAULT_EXTENTS = (32, 32, 20)
MIN_EXTENTS = (16, 16, 8)
BACKGROUND_HU = -200.0
RAW_RANGE = (-1200.0, 1200.0)


class DataConfigError(ValueError):
    pass


def bos_id(k: int) -> int:
    return BOS_BASE + k


def positive_words(k: int, severity: int) -> list[str]:
    return [SEVERITY_WORDS[severity], *name_tokens(k), "is", VERB_WORDS[severity]]


def negative_words(k: int) -> list[str]:
    return [*NEGATIVE_PREFIX, *name_tokens(k)]


def finding_tokens(k: int, severity: int | None) -> list[str]:
    words = negative_words(k) if severity is None else positive_words(k, severity)
    return [DEC, f"BOS_{k}", *words, EOS]


def is_positive_finding(tokens: list[str]) -> bool:
    words = [t for t in tokens if t not in SPECIALS and not t.startswith("BOS_")]
    return bool(words) and words[0] in SEVERITY_WORDS


class Vocabulary:
    """Closed word-level vocabulary; ids 0..35 are the fixed special tokens."""

    def __init__(self, tokens: list[str]):
        if tokens[: len(SPECIALS)] != SPECIALS:
            raise DataConfigError("vocabulary must start with the special tokens")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise DataConfigError("duplicate vocabulary entries")

    @classmethod
    def closed(cls) -> "Vocabulary":
        words = set(SEVERITY_WORDS) | set(VERB_WORDS) | set(NEGATIVE_PREFIX) | {"is"}
        for k in range(N_ABN):
            words.update(name_tokens(k))
        return cls(SPECIALS + sorted(words))

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def encode(self, tokens: list[str]) -> list[int]:
        try:
            return [self.index[t] for t in tokens]
        except KeyError as exc:
            raise KeyError(f"token not in vocabulary: {exc.args[0]!r}") from None

    def decode(self, ids) -> list[str]:
        return [self.tokens[int(i)] for i in ids]


@dataclass
class Case:
    case_id: str
    volume: np.ndarray  # (D, H, W) float32, synthetic HU
    labels: np.ndarray  # (32,) bool
    findings: list[list[str]]
    seed: int | None = None
    severity: np.ndarray | None = None  # (32,) int, -1 where negative

    def same_as(self, other: "Case") -> bool:
        return (
            self.case_id == other.case_id
            and self.volume.dtype == other.volume.dtype
            and self.volume.tobytes() == other.volume.tobytes()
            and np.array_equal(self.labels, other.labels)
            and self.findings == other.findings
        )


@dataclass
class Corpus:
    cases: list[Case]
    vocab: Vocabulary
    split: list[str]  # per case: "train" | "val" | "test"
    meta: dict = field(default_factory=dict)

    def indices(self, name: str) -> list[int]:
        return [i for i, s in enumerate(self.split) if s == name]

    def subset(self, name: str) -> list[Case]:
        return [self.cases[i] for i in self.indices(name)]


def default_priors() -> np.ndarray:
    """Per-abnormality prevalences spread over [0.15, 0.40]."""
    return np.array([0.15 + 0.25 * ((7 * k) % N_ABN) / (N_ABN - 1) for k in range(N_ABN)])


def _cell(k: int, extents) -> tuple[np.ndarray, np.ndarray]:
    D, H, W = extents
    i, j, l = (k % 16) // 4, k % 4, k // 16
    size = np.array([D / 4, H / 4, W / 2])
    center = np.array([i + 0.5, j + 0.5, l + 0.5]) * size - 0.5
    return center, size / 2


def signature_amplitude(k: int) -> float:
    sign = -1.0 if k % 4 == 3 else 1.0
    return sign * (300.0 + 15.0 * (k % 8))


def signature_mask(k: int, severity: int, extents, offset) -> np.ndarray:
    """Boolean mask of signature ``k`` at the given severity and integer offset."""
    center, half = _cell(k, extents)
    center = center + np.asarray(offset, dtype=float)
    r = (0.6 + 0.1 * severity) * half.min()
    aspect = half[2] / half[0]
    dd, dh, dw = np.meshgrid(
        *(np.arange(n) - c for n, c in zip(extents, center)), indexing="ij"
    )
    shape = k % 3
    if shape == 0:
        return dd**2 + dh**2 + (dw / aspect) ** 2 <= r**2
    if shape == 1:
        return (np.abs(dd) <= 1.0) & (np.abs(dh) <= r) & (np.abs(dw) <= r * aspect)
    return (dd**2 + dh**2 <= 1.5**2) & (np.abs(dw) <= r * aspect + 1.0)


def _check_extents(extents) -> tuple[int, int, int]:
    extents = tuple(int(e) for e in extents)
    if len(extents) != 3 or any(e < m for e, m in zip(extents, MIN_EXTENTS)):
        raise DataConfigError(
            f"volume extents {extents} too small for signature placement (min {MIN_EXTENTS})"
        )
    return extents


def generate_case(
    seed: int,
    label_prior,
    extents=DEFAULT_EXTENTS,
    noise: float = 60.0,
    case_id: str | None = None,
) -> Case:
    """One synthetic study, fully determined by ``(seed, label_prior, extents, noise)``."""
    extents = _check_extents(extents)
    prior = np.asarray(label_prior, dtype=float)
    if prior.shape != (N_ABN,) or np.any(prior < 0) or np.any(prior > 1):
        raise DataConfigError("label_prior must be 32 probabilities in [0, 1]")
    rng = np.random.default_rng(seed)
    labels = rng.random(N_ABN) < prior
    severity = np.where(labels, rng.integers(0, 3, size=N_ABN), -1)
    offsets = rng.integers(-1, 2, size=(N_ABN, 3))
    vol = BACKGROUND_HU + noise * rng.standard_normal(extents)
    for k in np.flatnonzero(labels):
        mask = signature_mask(k, int(severity[k]), extents, offsets[k])
        vol += mask * signature_amplitude(k) * (0.6 + 0.2 * severity[k])
    vol = np.clip(vol, *RAW_RANGE).astype(np.float32)
    findings = [
        finding_tokens(k, int(severity[k]) if labels[k] else None) for k in range(N_ABN)
    ]
    return Case(
        case_id=case_id or f"case-{seed}",
        volume=vol,
        labels=labels,
        findings=findings,
        seed=seed,
        severity=severity,
    )


def split_sizes(n: int, ratio) -> tuple[int, int, int]:
    ratio = np.asarray(ratio, dtype=float)
    if ratio.shape != (3,) or np.any(ratio < 0) or abs(ratio.sum() - 1.0) > 1e-9:
        raise DataConfigError("split ratio must be three non-negative numbers summing to 1")
    n_train = int(round(n * ratio[0]))
    n_val = max(1, int(round(n * ratio[1])))
    n_test = n - n_train - n_val
    if n_test < 1:
        n_test = 1
        n_train = n - n_val - n_test
    if n_train < 1:
        raise DataConfigError(f"n={n} too small for split {tuple(ratio)}")
    return n_train, n_val, n_test


def make_corpus(
    n: int,
    seed: int,
    priors=None,
    extents=DEFAULT_EXTENTS,
    split_ratio=(0.7, 0.1, 0.2),
    noise: float = 60.0,
) -> Corpus:
    if n < 10:
        raise DataConfigError("corpus needs n >= 10")
    priors = default_priors() if priors is None else np.asarray(priors, dtype=float)
    sizes = split_sizes(n, split_ratio)
    cases = [
        generate_case(
            rngmod.derive_seed(seed, "data", i), priors, extents, noise, case_id=f"case{i:05d}"
        )
        for i in range(n)
    ]
    order = rngmod.stream(seed, "split").permutation(n)
    split = [""] * n
    names = ["train"] * sizes[0] + ["val"] * sizes[1] + ["test"] * sizes[2]
    for pos, idx in enumerate(order):
        split[idx] = names[pos]
    vocab = Vocabulary.closed()
    for c in cases:
        vocab.encode(sum(c.findings, []))
    return Corpus(cases, vocab, split, meta={"seed": seed, "extents": tuple(extents)})


def preprocess_volume(raw) -> np.ndarray:
    """Clip synthetic HU to [-1000, 1000] and rescale to [0, 1]."""
    return (np.clip(np.asarray(raw, dtype=np.float64), -1000.0, 1000.0) + 1000.0) / 2000.0


def finding_words(tokens: list[str]) -> list[str]:
    """Strip special tokens, leaving the sentence words."""
    return [t for t in tokens if not (t in SPECIALS or t.startswith("BOS_"))]


def detokenize(tokens: list[str]) -> str:
    return " ".join(finding_words(tokens))


__all__ = [
    "Case",
    "Corpus",
    "Vocabulary",
    "generate_case",
    "make_corpus",
    "preprocess_volume",
    "NAMES",
]
