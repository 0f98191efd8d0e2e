"""Through-plane upsampling: insert k-1 slices between each pair of originals."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .baselines import linear_interpolate, nn_interpolate
from .volume import DEFAULT_WINDOW, HOUNSFIELD, Volume, VolumeError

METHODS = ("nn", "linear", "flow")

Interpolator = Callable[[np.ndarray, np.ndarray, float], np.ndarray]


def upsampled_depth(depth: int, factor: int) -> int:
    return factor * (depth - 1) + 1


def _stacked(fn: Interpolator) -> Interpolator:
    def run(a, b, n):
        return np.stack([fn(x, y, n) for x, y in zip(a, b)])

    return run


def upsample_volume(volume: Volume, factor: int, method: str = "linear", interpolator: Interpolator | None = None,
                    window: tuple[float, float] = DEFAULT_WINDOW) -> Volume:
    """Insert slices at fractional positions j/k between consecutive slices.

    Originals land bit-exactly at indices 0, k, 2k, ... and the slice spacing
    is divided by k. ``interpolator`` (required for ``flow``) maps stacked
    pairs (N, H, W) and a fraction n to (N, H, W) normalized slices. A
    Hounsfield volume is windowed before the flow model and mapped back after,
    so inserted slices are limited to the window range.
    """
    if factor not in (2, 3):
        raise VolumeError(f"upsampling factor must be 2 or 3, got {factor}")
    if method not in METHODS:
        raise VolumeError(f"unknown method {method!r}; choose from {METHODS}")
    depth = volume.shape[0]
    if depth < 2:
        raise VolumeError("need at least two slices to upsample")
    data = volume.data
    if method == "flow":
        if interpolator is None:
            raise VolumeError("method 'flow' needs a trained interpolator")
        fn = interpolator
        if volume.intensity_unit == HOUNSFIELD:
            lo, hi = (np.float32(w) for w in window)
            fn = lambda a, b, n: interpolator((np.clip(a, lo, hi) - lo) / (hi - lo),  # noqa: E731
                                              (np.clip(b, lo, hi) - lo) / (hi - lo), n) * (hi - lo) + lo
    else:
        fn = _stacked(nn_interpolate if method == "nn" else linear_interpolate)
    out = np.empty((upsampled_depth(depth, factor),) + data.shape[1:], np.float32)
    out[::factor] = data
    for j in range(1, factor):
        new = fn(data[:-1], data[1:], j / factor)
        out[j::factor] = np.asarray(new, np.float32)
        if volume.intensity_unit != HOUNSFIELD:
            np.clip(out[j::factor], 0.0, 1.0, out=out[j::factor])
    dz, dy, dx = volume.spacing
    return volume.with_data(out, spacing=(dz / factor, dy, dx))
