"""Training losses: multi-label BCE, abnormality-aligned contrastive, and
label-smoothed generation cross-entropy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

NORM_TOL = 1e-6


@dataclass
class SmoothingSpec:
    epsilon: float = 0.1
    vocab_size: int = 95

    def __post_init__(self):
        if not 0.0 <= self.epsilon < 1.0:
            raise ValueError("label smoothing must lie in [0, 1)")


def bce_loss(probs: Tensor, labels, reduction: str = "mean") -> Tensor:
    """-sum_k [y log P + (1-y) log(1-P)], averaged (or summed) over the batch."""
    y = np.asarray(labels, dtype=np.float64)
    if probs.shape != y.shape:
        raise T.ShapeError(f"bce_loss: probs {probs.shape} vs labels {y.shape}")
    per = T.add(T.mul(T.log(probs), y), T.mul(T.log(T.sub(1.0, probs)), 1.0 - y))
    total = T.sum_(per)
    n = probs.shape[0] if reduction == "mean" else 1
    return T.mul(total, -1.0 / n)


def batch_weights(probs, soft: bool = True) -> np.ndarray:
    """(32, N) per-sample weights for each abnormality, summing to 1 over the batch.

    ``soft`` uses the softmax over the batch of the predicted probabilities for
    abnormality k; otherwise every sample gets 1/N.
    """
    p = np.asarray(probs, dtype=np.float64)
    n = p.shape[0]
    if not soft:
        return np.full((p.shape[1], n), 1.0 / n)
    z = p.T - p.T.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def acl_terms(z_proj: Tensor, h: Tensor, probs=None, tau: float = 0.07, soft: bool = True):
    """Per-abnormality image->text and text->image terms, each of shape (32,).

    ``S[k, i, j] = <Z_i^k, h_j^k> / tau``; the image->text term for k is
    ``-sum_i w_ki log softmax_j(S[k, i, :])[i]`` and the text->image term uses
    the column softmax.  ``w`` comes from :func:`batch_weights`, detached.
    """
    if z_proj.ndim != 3 or z_proj.shape != h.shape:
        raise T.ShapeError(f"acl: Z {z_proj.shape} vs h {h.shape}")
    n = z_proj.shape[0]
    if n == 0:
        raise ValueError("acl_loss needs a non-empty batch")
    if tau <= 0:
        raise ValueError("temperature must be positive")
    for name, t in (("Z", z_proj), ("h", h)):
        norms = np.linalg.norm(t.data, axis=-1)
        if np.max(np.abs(norms - 1.0)) > NORM_TOL:
            raise ValueError(f"acl_loss expects unit-norm {name} rows")
    if probs is None:
        probs = np.zeros((n, z_proj.shape[1]))
        soft = False
    w = batch_weights(probs, soft)
    zk = T.transpose(z_proj, (1, 0, 2))  # (K, N, d)
    hk = T.transpose(h, (1, 2, 0))  # (K, d, N)
    s = T.mul(T.matmul(zk, hk), 1.0 / tau)  # (K, N, N)
    diag = (slice(None), np.arange(n), np.arange(n))
    i2t = T.getitem(T.log_softmax(s, axis=2), diag)  # (K, N)
    t2i = T.getitem(T.log_softmax(s, axis=1), diag)
    l_i2t = T.mul(T.sum_(T.mul(i2t, w), axis=1), -1.0)
    l_t2i = T.mul(T.sum_(T.mul(t2i, w), axis=1), -1.0)
    return l_i2t, l_t2i


def acl_loss(z_proj: Tensor, h: Tensor, probs=None, tau: float = 0.07, soft: bool = True) -> Tensor:
    l_i2t, l_t2i = acl_terms(z_proj, h, probs, tau, soft)
    return T.mul(T.sum_(T.add(l_i2t, l_t2i)), 0.5)


def atg_loss(
    logits: Tensor,
    targets,
    spec: SmoothingSpec,
    mask=None,
    reduction: str = "mean",
    n_cases: int | None = None,
) -> Tensor:
    """Cross-entropy of ``logits`` (..., V) against the smoothed one-hot targets.

    ``mean`` averages over the unmasked target positions; ``sum`` adds them up
    and divides by ``n_cases`` (the batch of studies).
    """
    targets = np.asarray(targets, dtype=np.int64)
    V = logits.shape[-1]
    if V != spec.vocab_size:
        raise T.ShapeError(f"logits width {V} != vocab size {spec.vocab_size}")
    if targets.shape != logits.shape[:-1]:
        raise T.ShapeError(f"targets {targets.shape} vs logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise IndexError("target token outside the vocabulary")
    mask = np.ones(targets.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    eps = spec.epsilon
    q = np.full(logits.shape, eps / V)
    np.put_along_axis(q, targets[..., None], 1.0 - eps + eps / V, axis=-1)
    q *= mask[..., None]
    total = T.mul(T.sum_(T.mul(T.log_softmax(logits, axis=-1), q)), -1.0)
    if reduction == "mean":
        return T.mul(total, 1.0 / max(int(mask.sum()), 1))
    if reduction == "sum":
        return T.mul(total, 1.0 / (n_cases or 1))
    raise ValueError(f"unknown reduction {reduction!r}")


def smoothed_entropy(eps: float, V: int) -> float:
    """Entropy of (1-eps)*onehot + eps/V."""
    hi = 1.0 - eps + eps / V
    lo = eps / V
    out = -hi * np.log(hi)
    if lo > 0:
        out -= (V - 1) * lo * np.log(lo)
    return float(out)
