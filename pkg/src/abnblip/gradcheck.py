"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class GradReport:
    name: str
    max_abs_err: float
    max_rel_err: float
    passed: bool
    n_checked: int


def grad_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor],
    eps: float = 1e-6,
    tol: float = 1e-4,
    samples: int | None = 4,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
    analytic: dict[str, np.ndarray] | None = None,
    noise_factor: float = 8.0,
) -> list[GradReport]:
    """Compare ``backward(f())`` against (f(θ+eps) - f(θ-eps)) / 2eps.

    ``samples`` coordinates are drawn per parameter (all when None).  The
    relative error is ``|a - n| / max(|a|, |n|, floor)``; a coordinate whose
    perturbed loss is non-finite counts as a failure.  A coordinate also passes
    when its absolute error is below the central-difference round-off bound
    ``noise_factor * u * max|f(θ±eps)| / eps`` (u = f64 unit round-off), which
    matters only where the true gradient is near zero.  ``analytic`` may supply
    precomputed gradients (used for negative controls).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    rng = rng or np.random.default_rng(0)
    if analytic is None:
        for p in params.values():
            p.zero_grad()
        loss = f()
        T.backward(loss)
        analytic = {n: p.grad.copy() for n, p in params.items()}

    reports = []
    with T.no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            if samples is None or samples >= flat.size:
                coords = np.arange(flat.size)
            else:
                coords = rng.choice(flat.size, size=samples, replace=False)
            g = analytic[name].reshape(-1)
            max_abs = max_rel = 0.0
            ok = True
            for c in coords:
                orig = flat[c]
                flat[c] = orig + eps
                fp = f().item()
                flat[c] = orig - eps
                fm = f().item()
                flat[c] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    ok = False
                    max_abs = max_rel = float("inf")
                    continue
                num = (fp - fm) / (2 * eps)
                err = abs(g[c] - num)
                rel = err / max(abs(g[c]), abs(num), floor)
                max_abs = max(max_abs, err)
                max_rel = max(max_rel, rel)
                noise = noise_factor * np.finfo(np.float64).eps * max(abs(fp), abs(fm)) / eps
                if rel > tol and err > noise:
                    ok = False
            reports.append(GradReport(name, max_abs, max_rel, ok, len(coords)))
    return reports
