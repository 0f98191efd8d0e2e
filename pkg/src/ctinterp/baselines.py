"""Classical z-axis interpolators used as comparison arms."""
from __future__ import annotations

import numpy as np


def _check_n(n: float) -> None:
    if not 0 < n < 1:
        raise ValueError(f"fractional position n must lie in (0, 1), got {n}")


def nn_interpolate(s_a: np.ndarray, s_b: np.ndarray, n: float) -> np.ndarray:
    """Nearest slice; the tie at n = 0.5 goes to the earlier slice ``s_a``."""
    _check_n(n)
    return np.array(s_b if n > 0.5 else s_a, copy=True)


def linear_interpolate(s_a: np.ndarray, s_b: np.ndarray, n: float) -> np.ndarray:
    """Pixelwise (1 - n) * s_a + n * s_b."""
    _check_n(n)
    s_a = np.asarray(s_a)
    return ((1 - n) * s_a + n * np.asarray(s_b)).astype(s_a.dtype, copy=False)
