"""Adam optimizer over a :class:`ParamStore`."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import ParamStore


class OptimizerStateError(RuntimeError):
    pass


@dataclass
class AdamState:
    """First/second moment buffers keyed like the ParamStore they serve."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(cls, params: ParamStore) -> "AdamState":
        return cls(
            m={n: np.zeros_like(p.data) for n, p in params.items()},
            v={n: np.zeros_like(p.data) for n, p in params.items()},
        )


def adam_step(params: ParamStore, state: AdamState | None, lr: float = 1e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> int:
    """Apply one bias-corrected Adam update in place; returns the new step count."""
    if state is None or not state.m:
        raise OptimizerStateError("Adam state is uninitialized; build it with AdamState.for_params")
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        if name not in state.m:
            raise OptimizerStateError(f"no Adam moments for parameter {name!r}")
        g = p.grad
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        step = (lr / c1) * m / (np.sqrt(v / c2) + eps)
        p.data -= step.astype(p.dtype, copy=False)
    return t
