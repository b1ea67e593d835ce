"""Parameter containers built on :mod:`abnblip.tensor`."""

from __future__ import annotations

import hashlib
from collections import OrderedDict

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Base class: parameters are discovered from attributes, in assignment order."""

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())

    def load_state_dict(self, state: dict, strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            if missing:
                raise KeyError(f"missing parameters: {missing[:5]}")
        for name, p in own.items():
            if name not in state:
                continue
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != expected {p.shape}")
            p.data = arr.copy()
            p.zero_grad()

    def digest(self) -> str:
        """sha256 over parameter names and raw bytes."""
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(p.data.tobytes())
        return h.hexdigest()


def normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


class Linear(Module):
    """``y = x @ W + b`` with ``W`` of shape (n_in, n_out).

    The default init std is ``1/sqrt(n_in)``, which keeps activations at unit
    scale for any width.
    """

    def __init__(self, rng, n_in: int, n_out: int, std: float | None = None, bias: bool = True):
        std = 1.0 / np.sqrt(n_in) if std is None else std
        self.weight = T.parameter(normal(rng, (n_in, n_out), std))
        self.bias = T.parameter(np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = T.parameter(np.ones(d))
        self.beta = T.parameter(np.zeros(d))
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self._eps)


class SampleNorm(LayerNorm):
    """Per-sample normalization over a whole channels-last feature map."""

    def __call__(self, x: Tensor) -> Tensor:
        return T.sample_norm(x, self.gamma, self.beta, self._eps)
