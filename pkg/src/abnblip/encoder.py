"""Five-stage 3D CNN encoder, abnormality classifier and visual tokenizer.

Feature maps are channels-last, ``(B, D, H, W, C)``.  Every stage is
``conv(stride 2) -> norm -> relu -> conv -> norm -> relu`` where the norm
standardizes each case over its whole feature map (one group, per-channel
affine), so a 1x1x1 stage-5 map still normalizes cleanly and batch
composition never changes a case's output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module, SampleNorm
from .taxonomy import N_ABN
from .tensor import Tensor

N_STAGES = 5


class EncoderConfigError(ValueError):
    pass


@dataclass
class EncoderConfig:
    widths: tuple[int, ...] = (4, 8, 16, 32, 64)
    # patch edge per stage, capped by the stage extent; one triple or five
    patch: tuple = (2, 2, 2)
    d_v: int = 32
    use_multiscale: bool = True
    use_fcls: bool = True

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) != N_STAGES or min(self.widths) < 1:
            raise EncoderConfigError("encoder needs five positive stage widths")
        if self.d_v < 1:
            raise EncoderConfigError("d_v must be positive")

    def stage_patches(self) -> list[tuple[int, int, int]]:
        p = self.patch
        if len(p) == 3 and all(isinstance(x, (int, np.integer)) for x in p):
            return [tuple(int(x) for x in p)] * N_STAGES
        if len(p) != N_STAGES:
            raise EncoderConfigError("patch must be one triple or five triples")
        return [tuple(int(x) for x in q) for q in p]


FULL_SCALE_EXTENTS = (224, 224, 160)
# per-stage patch edges giving 128 + 64 + 32 + 16 + 16 = 256 scale tokens at FULL_SCALE_EXTENTS
FULL_SCALE_PATCHES = ((28, 28, 10), (14, 14, 10), (7, 7, 10), (7, 7, 3), (2, 2, 5))


def full_scale_encoder_config() -> EncoderConfig:
    return EncoderConfig(widths=(64, 256, 512, 1024, 2048), patch=FULL_SCALE_PATCHES, d_v=1408)


def stage_extents(extents) -> list[tuple[int, int, int]]:
    """Spatial extents of the five stage maps (each stage halves, rounding up)."""
    out, cur = [], tuple(int(e) for e in extents)
    for _ in range(N_STAGES):
        cur = tuple(math.ceil(e / 2) for e in cur)
        out.append(cur)
    sizes = [int(np.prod(extents))] + [int(np.prod(e)) for e in out]
    if any(b >= a for a, b in zip(sizes, sizes[1:])):
        raise EncoderConfigError(
            f"volume {tuple(extents)} too small for {N_STAGES} distinct scales"
        )
    return out


def patch_layout(extent, patch) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """(patch edge, patch count) per axis, with edges capped by the extent."""
    edge = tuple(min(int(p), int(e)) for p, e in zip(patch, extent))
    count = tuple(math.ceil(e / p) for e, p in zip(extent, edge))
    return edge, count


def token_counts(cfg: EncoderConfig, extents) -> list[int]:
    """Pooled tokens contributed by each stage (zero for stages left out)."""
    counts = []
    for l, (ext, patch) in enumerate(zip(stage_extents(extents), cfg.stage_patches())):
        n = int(np.prod(patch_layout(ext, patch)[1]))
        counts.append(n if (cfg.use_multiscale or l == N_STAGES - 1) else 0)
    return counts


def n_visual_tokens(cfg: EncoderConfig, extents) -> int:
    return sum(token_counts(cfg, extents)) + (1 if cfg.use_fcls else 0)


def patch_pool(f: Tensor, patch) -> Tensor:
    """Average non-overlapping patches of a (B, D, H, W, C) map -> (B, n_patches, C).

    Extents that the patch does not divide are padded by edge replication.
    """
    B = f.shape[0]
    C = f.shape[-1]
    edge, count = patch_layout(f.shape[1:4], patch)
    x = f
    for axis in range(3):
        n = f.shape[1 + axis]
        padded = edge[axis] * count[axis]
        if padded != n:
            idx = np.minimum(np.arange(padded), n - 1)
            x = T.take(x, idx, axis=1 + axis)
    gd, gh, gw = count
    pd, ph, pw = edge
    x = T.reshape(x, (B, gd, pd, gh, ph, gw, pw, C))
    x = T.mean(x, axis=(2, 4, 6))
    return T.reshape(x, (B, gd * gh * gw, C))


class _Stage(Module):
    def __init__(self, rng, c_in: int, c_out: int):
        std_a = math.sqrt(2.0 / (27 * c_in))
        std_b = math.sqrt(2.0 / (27 * c_out))
        self.conv_a = T.parameter(rng.normal(0.0, std_a, (c_out, c_in, 3, 3, 3)))
        self.bias_a = T.parameter(np.zeros(c_out))
        self.norm_a = SampleNorm(c_out)
        self.conv_b = T.parameter(rng.normal(0.0, std_b, (c_out, c_out, 3, 3, 3)))
        self.bias_b = T.parameter(np.zeros(c_out))
        self.norm_b = SampleNorm(c_out)

    def __call__(self, x: Tensor) -> Tensor:
        x = T.relu(self.norm_a(T.conv3d(x, self.conv_a, self.bias_a, stride=2)))
        return T.relu(self.norm_b(T.conv3d(x, self.conv_b, self.bias_b, stride=1)))


class ConvEncoder(Module):
    """The stage-1 model: conv stages plus the 32-way classifier head."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.stages = []
        c_in = 1
        for w in cfg.widths:
            self.stages.append(_Stage(rng, c_in, w))
            c_in = w
        self.head = Linear(rng, cfg.widths[-1], N_ABN, std=math.sqrt(1.0 / cfg.widths[-1]))
        self._cfg = cfg

    @property
    def cfg(self) -> EncoderConfig:
        return self._cfg

    def encode_multiscale(self, x: Tensor) -> list[Tensor]:
        """(B, D, H, W) volumes in [0, 1] -> five channels-last feature maps."""
        if x.ndim == 4:
            x = T.reshape(x, x.shape + (1,))
        stage_extents(x.shape[1:4])
        maps = []
        for stage in self.stages:
            x = stage(x)
            maps.append(x)
        return maps

    def classify(self, f5: Tensor) -> tuple[Tensor, Tensor]:
        """Global average pool + linear head; returns (logits, P)."""
        pooled = T.mean(f5, axis=(1, 2, 3))
        logits = self.head(pooled)
        return logits, T.sigmoid(logits)

    def __call__(self, x: Tensor):
        maps = self.encode_multiscale(x)
        logits, probs = self.classify(maps[-1])
        return maps, logits, probs


@dataclass
class VisualTokens:
    tokens: Tensor  # (B, n_tokens, d_v)
    provenance: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    # stage index (0..4) per row; -1 marks the F_CLS row


def build_visual_tokens(
    scale_tokens: list[Tensor],
    probs: Tensor | None,
    fcls: Linear | None,
    scale_ids=None,
) -> VisualTokens:
    """Concatenate per-scale token blocks and, when ``fcls`` is given, the F_CLS row."""
    if scale_ids is None:
        scale_ids = list(range(len(scale_tokens)))
    d_v = {t.shape[-1] for t in scale_tokens}
    if len(d_v) != 1:
        raise EncoderConfigError(f"inconsistent token widths {sorted(d_v)}")
    blocks = list(scale_tokens)
    prov = [np.full(t.shape[1], s) for t, s in zip(scale_tokens, scale_ids)]
    if fcls is not None:
        f = fcls(probs)
        blocks.append(T.reshape(f, (f.shape[0], 1, f.shape[-1])))
        prov.append(np.array([-1]))
    return VisualTokens(T.concat(blocks, axis=1), np.concatenate(prov))


class VisualTokenizer(Module):
    """Per-scale patch embeddings and the F_CLS projection (trained in stage 2)."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.embeds = [Linear(rng, w, cfg.d_v) for w in cfg.widths]
        self.norms = [LayerNorm(cfg.d_v) for _ in cfg.widths]
        self.fcls = Linear(rng, N_ABN, cfg.d_v)
        self._cfg = cfg

    def embed(self, l: int, pooled: Tensor) -> Tensor:
        return self.norms[l](T.relu(self.embeds[l](pooled)))

    def __call__(self, pooled: list, probs) -> VisualTokens:
        """``pooled``: per-stage (B, n_l, C_l) patch means; ``probs``: (B, 32)."""
        cfg = self._cfg
        stages = range(N_STAGES) if cfg.use_multiscale else [N_STAGES - 1]
        blocks = [self.embed(l, T.as_tensor(pooled[l])) for l in stages]
        return build_visual_tokens(
            blocks,
            T.as_tensor(probs),
            self.fcls if cfg.use_fcls else None,
            scale_ids=list(stages),
        )


def pooled_features(encoder: ConvEncoder, volumes: np.ndarray, batch: int = 16):
    """Frozen-encoder outputs for stage 2: per-stage patch means and P (numpy)."""
    patches = encoder.cfg.stage_patches()
    pooled = [[] for _ in range(N_STAGES)]
    probs = []
    with T.no_grad():
        for s in range(0, len(volumes), batch):
            x = T.Tensor(volumes[s : s + batch])
            maps, _, p = encoder(x)
            for l, f in enumerate(maps):
                pooled[l].append(patch_pool(f, patches[l]).data)
            probs.append(p.data)
    return [np.concatenate(p) for p in pooled], np.concatenate(probs)
