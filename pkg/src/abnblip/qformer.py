"""Abnormality-driven querying transformer.

One stack of self-attention + FFN layers is shared by the query branch and
the text branch; cross-attention into the visual tokens exists only in the
query branch and sits between SA and FFN.  Text carries learned positional
embeddings, queries and visual tokens carry none.

Three passes use the shared stack:

* :meth:`QFormer.query_visual` - queries alone (unimodal-query mask) with CA.
* :meth:`QFormer.encode_text` - text alone, bidirectional, ``[CLS]`` pooled.
* :meth:`QFormer.decode` - text under the multimodal-causal mask.  Query rows
  of that mask see only query columns, so their states equal the
  ``query_visual`` states layer by layer; ``decode`` reuses them as the
  query keys/values instead of recomputing them per text.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module, normal
from .tensor import MASK_VALUE, Tensor

N_QUERIES = 32
REGIMES = ("unimodal-query", "unimodal-text-bidir", "text-causal", "multimodal-causal")


class MaskError(ValueError):
    pass


@dataclass
class QFormerConfig:
    d: int = 32
    layers: int = 2
    heads: int = 4
    ffn: int = 64
    d_p: int = 16
    d_v: int = 32
    vocab_size: int = 95
    max_len: int = 12
    n_queries: int = N_QUERIES

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError(f"hidden width {self.d} not divisible by {self.heads} heads")
        if self.n_queries != N_QUERIES:
            raise ValueError("the query count is fixed at 32")


FULL_SCALE_QFORMER = dict(d=768, layers=12, heads=12, ffn=3072, d_p=256, d_v=1408)


@dataclass
class AttentionMask:
    allowed: np.ndarray  # allowed[i, j]: position i may attend to position j
    regime: str


def build_attention_mask(regime: str, n_text: int = 0, n_queries: int = N_QUERIES) -> AttentionMask:
    if regime == "unimodal-query":
        allowed = np.ones((n_queries, n_queries), dtype=bool)
    elif regime == "unimodal-text-bidir":
        allowed = np.ones((n_text, n_text), dtype=bool)
    elif regime == "text-causal":
        allowed = np.tril(np.ones((n_text, n_text), dtype=bool))
    elif regime == "multimodal-causal":
        n = n_queries + n_text
        allowed = np.zeros((n, n), dtype=bool)
        allowed[:n_queries, :n_queries] = True
        allowed[n_queries:, :n_queries] = True
        allowed[n_queries:, n_queries:] = np.tril(np.ones((n_text, n_text), dtype=bool))
    else:
        raise MaskError(f"unknown mask regime {regime!r}")
    return AttentionMask(allowed, regime)


def additive_mask(allowed: np.ndarray) -> np.ndarray:
    if not np.all(allowed.any(axis=-1)):
        raise MaskError("a row of the attention mask allows no position")
    return np.where(allowed, 0.0, MASK_VALUE)


@dataclass
class QueryOutput:
    Z: Tensor  # (B, 32, d)
    Z_proj: Tensor  # (B, 32, d_p), unit rows
    layer_inputs: list = field(default_factory=list)  # query states entering each layer


@dataclass
class TextOutput:
    h: Tensor  # (B, d_p), unit rows
    states: Tensor  # (B, L, d)


class Attention(Module):
    def __init__(self, rng, d: int, heads: int):
        self.q = Linear(rng, d, d)
        self.k = Linear(rng, d, d)
        self.v = Linear(rng, d, d)
        self.o = Linear(rng, d, d)
        self._heads = heads

    def __call__(self, xq: Tensor, xkv: Tensor, mask: np.ndarray | None = None, trace=None, prefix=None):
        """``prefix=(states, index)`` prepends ``states[index]`` to the keys/values.

        The prefix rows are projected once per distinct state and then
        gathered, which is cheaper than projecting a gathered copy.
        """
        B, Lq, d = xq.shape
        h = self._heads
        dk = d // h
        kx, vx = self.k(xkv), self.v(xkv)
        if prefix is not None:
            states, index = prefix
            kx = T.concat([T.take(self.k(states), index, axis=0), kx], axis=1)
            vx = T.concat([T.take(self.v(states), index, axis=0), vx], axis=1)
        Lk = kx.shape[1]
        q = T.transpose(T.reshape(self.q(xq), (B, Lq, h, dk)), (0, 2, 1, 3))
        k = T.transpose(T.reshape(kx, (B, Lk, h, dk)), (0, 2, 3, 1))
        v = T.transpose(T.reshape(vx, (B, Lk, h, dk)), (0, 2, 1, 3))
        scores = T.mul(T.matmul(q, k), 1.0 / math.sqrt(dk))
        if mask is not None:
            scores = T.add(scores, mask)
        p = T.softmax(scores, axis=-1)
        if trace is not None:
            trace.append(p.data)
        out = T.reshape(T.transpose(T.matmul(p, v), (0, 2, 1, 3)), (B, Lq, d))
        return self.o(out)


class Layer(Module):
    def __init__(self, rng, cfg: QFormerConfig):
        self.sa = Attention(rng, cfg.d, cfg.heads)
        self.ln_sa = LayerNorm(cfg.d)
        self.ca = Attention(rng, cfg.d, cfg.heads)
        self.ln_ca = LayerNorm(cfg.d)
        self.ff1 = Linear(rng, cfg.d, cfg.ffn)
        self.ff2 = Linear(rng, cfg.ffn, cfg.d)
        self.ln_ff = LayerNorm(cfg.d)

    def ffn(self, x: Tensor) -> Tensor:
        return self.ln_ff(T.add(x, self.ff2(T.relu(self.ff1(x)))))


class QFormer(Module):
    def __init__(self, cfg: QFormerConfig, rng: np.random.Generator):
        self.queries = T.parameter(normal(rng, (cfg.n_queries, cfg.d)))
        self.vis_in = Linear(rng, cfg.d_v, cfg.d)
        self.tok_emb = T.parameter(normal(rng, (cfg.vocab_size, cfg.d)))
        self.pos_emb = T.parameter(normal(rng, (cfg.max_len, cfg.d)))
        self.emb_ln = LayerNorm(cfg.d)
        self.layers = [Layer(rng, cfg) for _ in range(cfg.layers)]
        self.vis_proj = Linear(rng, cfg.d, cfg.d_p)
        self.text_proj = Linear(rng, cfg.d, cfg.d_p)
        self.lm_head = Linear(rng, cfg.d, cfg.vocab_size)
        self._cfg = cfg
        self._trace = None

    @property
    def cfg(self) -> QFormerConfig:
        return self._cfg

    def start_trace(self) -> list:
        """Collect every attention probability tensor computed until stop_trace()."""
        self._trace = []
        return self._trace

    def stop_trace(self) -> None:
        self._trace = None

    # ------------------------------------------------------------------ queries

    def query_visual(self, v) -> QueryOutput:
        """32 queries refined by SA -> CA(v) -> FFN per layer; v is (B, n_tokens, d_v)."""
        v = T.as_tensor(v)
        B = v.shape[0]
        vis = self.vis_in(v)
        z = T.broadcast_to(self.queries, (B,) + self.queries.shape)
        inputs = []
        for layer in self.layers:
            inputs.append(z)
            z = layer.ln_sa(T.add(z, layer.sa(z, z, trace=self._trace)))
            z = layer.ln_ca(T.add(z, layer.ca(z, vis, trace=self._trace)))
            z = layer.ffn(z)
        z_proj = T.l2_normalize(self.vis_proj(z), axis=-1)
        return QueryOutput(z, z_proj, inputs)

    # ------------------------------------------------------------------ text

    def embed_text(self, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        L = ids.shape[1]
        if L > self._cfg.max_len:
            raise ValueError(f"text length {L} exceeds max_len {self._cfg.max_len}")
        x = T.add(T.embedding_lookup(self.tok_emb, ids), self.pos_emb[:L])
        return self.emb_ln(x)

    def encode_text(self, ids, pad_id: int = 0) -> TextOutput:
        """Bidirectional text-only pass; ids are (B, L) with [CLS] first."""
        ids = np.asarray(ids, dtype=np.int64)
        x = self.embed_text(ids)
        keep = ids != pad_id
        keep[:, 0] = True
        mask = additive_mask(np.broadcast_to(keep[:, None, None, :], (ids.shape[0], 1, ids.shape[1], ids.shape[1])))
        for layer in self.layers:
            x = layer.ln_sa(T.add(x, layer.sa(x, x, mask, trace=self._trace)))
            x = layer.ffn(x)
        h = T.l2_normalize(self.text_proj(x[:, 0, :]), axis=-1)
        return TextOutput(h, x)

    def decode(self, ids, query: QueryOutput, case_index=None, k_index=None, scope: str = "all") -> Tensor:
        """Next-token logits (B_t, L, V) for texts under the multimodal-causal mask.

        ``case_index[b]`` picks the case whose query states text ``b`` attends
        to; with ``scope='single'`` text ``b`` sees only query row ``k_index[b]``.
        """
        ids = np.asarray(ids, dtype=np.int64)
        Bt, L = ids.shape
        nq = self._cfg.n_queries
        if case_index is None:
            case_index = np.arange(Bt)
        case_index = np.asarray(case_index, dtype=np.int64)
        allowed = np.zeros((Bt, 1, L, nq + L), dtype=bool)
        allowed[..., nq:] = np.tril(np.ones((L, L), dtype=bool))
        if scope == "all":
            allowed[..., :nq] = True
        elif scope == "single":
            allowed[np.arange(Bt), 0, :, np.asarray(k_index)] = True
        else:
            raise ValueError(f"unknown condition scope {scope!r}")
        mask = additive_mask(allowed)
        x = self.embed_text(ids)
        for layer, qstate in zip(self.layers, query.layer_inputs):
            sa = layer.sa(x, x, mask, trace=self._trace, prefix=(qstate, case_index))
            x = layer.ln_sa(T.add(x, sa))
            x = layer.ffn(x)
        return self.lm_head(x)

    def joint_forward(self, ids, v) -> tuple[Tensor, Tensor]:
        """Dense reference pass over ``[32 queries ∥ text]`` with the multimodal-causal mask.

        Query rows cross-attend into ``v`` after SA; text rows do not.  Returns
        the final query states (B, 32, d) and text states (B, L, d); the text
        states feed ``lm_head`` to give the same logits as :meth:`decode`.
        """
        ids = np.asarray(ids, dtype=np.int64)
        v = T.as_tensor(v)
        B, L = ids.shape
        nq = self._cfg.n_queries
        mask = additive_mask(build_attention_mask("multimodal-causal", L, nq).allowed)
        vis = self.vis_in(v)
        z = T.broadcast_to(self.queries, (B,) + self.queries.shape)
        x = T.concat([z, self.embed_text(ids)], axis=1)
        for layer in self.layers:
            x = layer.ln_sa(T.add(x, layer.sa(x, x, mask, trace=self._trace)))
            z, t = x[:, :nq, :], x[:, nq:, :]
            z = layer.ln_ca(T.add(z, layer.ca(z, vis, trace=self._trace)))
            x = layer.ffn(T.concat([z, t], axis=1))
        return x[:, :nq, :], x[:, nq:, :]
