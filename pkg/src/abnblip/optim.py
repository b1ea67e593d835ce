"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class AdamWHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


def adamw_step(params, grads, state: dict, hyper: AdamWHyper) -> None:
    """One in-place update of the arrays in ``params``.

    ``state`` holds ``step`` and per-parameter ``m``/``v`` lists; it is
    created on first use.  A non-finite gradient rejects the whole step
    before anything is modified.
    """
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient("non-finite gradient; step rejected")
    if "m" not in state:
        state["m"] = [np.zeros_like(p) for p in params]
        state["v"] = [np.zeros_like(p) for p in params]
        state["step"] = 0
    state["step"] += 1
    t = state["step"]
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if hyper.weight_decay:
            p -= hyper.lr * hyper.weight_decay * p
        p -= hyper.lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps)


class AdamW:
    def __init__(self, named_params, hyper: AdamWHyper):
        self.named = list(named_params)
        self.hyper = hyper
        self.state: dict = {}

    @property
    def params(self) -> list[Tensor]:
        return [p for _, p in self.named]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        adamw_step([p.data for p in self.params], [p.grad for p in self.params], self.state, self.hyper)

    @property
    def step_count(self) -> int:
        return self.state.get("step", 0)

    def state_entries(self) -> dict[str, np.ndarray]:
        out = {"opt.step": np.array(float(self.step_count))}
        if "m" in self.state:
            for (name, _), m, v in zip(self.named, self.state["m"], self.state["v"]):
                out[f"opt.m.{name}"] = m.copy()
                out[f"opt.v.{name}"] = v.copy()
        return out

    def load_state_entries(self, entries: dict) -> None:
        step = int(entries.get("opt.step", 0))
        if step == 0:
            self.state = {}
            return
        self.state = {
            "step": step,
            "m": [np.array(entries[f"opt.m.{n}"], dtype=np.float64) for n, _ in self.named],
            "v": [np.array(entries[f"opt.v.{n}"], dtype=np.float64) for n, _ in self.named],
        }
