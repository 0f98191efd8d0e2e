"""Finite-difference checks of tape gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .params import ParamStore
from .tensor import Tape, Tensor


@dataclass
class GradcheckReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-3

    @property
    def failed(self) -> list[str]:
        return [n for n, e in self.max_rel_error.items() if not e <= self.tol]

    @property
    def ok(self) -> bool:
        return not self.failed

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """Elementwise |a-n| / max(|a|, |n|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def gradcheck(f: Callable[[ParamStore], Tensor], params: ParamStore, eps: float = 1e-3, tol: float = 1e-3,
              samples: int = 32, seed: int = 0, abs_floor: float = 1e-6) -> GradcheckReport:
    """Compare tape gradients of scalar ``f(params)`` to central differences.

    ``params`` is copied to float64 first so the finite differences are not
    swamped by float32 rounding. For each entry, ``samples`` coordinates (or all
    of them, if fewer) are perturbed. Coordinates where both gradients are below
    ``abs_floor`` count as agreeing.
    """
    p64 = params.copy(np.float64)
    p64.zero_grad()
    with Tape() as tape:
        loss = f(p64)
    tape.backward(loss)
    rng = np.random.default_rng(seed)
    report = GradcheckReport(tol=tol)
    for name, t in p64.items():
        flat = t.data.reshape(-1)
        grad = t.grad.reshape(-1)
        idx = np.arange(flat.size) if flat.size <= samples else rng.choice(flat.size, samples, replace=False)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = float(f(p64).data)
            flat[i] = orig - eps
            down = float(f(p64).data)
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            if max(abs(numeric), abs(grad[i])) < abs_floor:
                continue
            worst = max(worst, float(rel_error(np.float64(grad[i]), np.float64(numeric))))
        report.max_rel_error[name] = worst
    return report
