"""Volume and label data model, intensity windowing and triplet extraction."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

HOUNSFIELD = "hounsfield"
NORMALIZED = "normalized"

DEFAULT_WINDOW = (-200.0, 300.0)

BACKGROUND, LIVER, LESION = 0, 1, 2


class VolumeError(ValueError):
    """Invalid volume, label volume or slicing request."""


def _spacing(spacing) -> tuple[float, float, float]:
    # stored at float32 precision, the resolution of the NIfTI header field
    out = tuple(float(np.float32(s)) for s in spacing)
    if len(out) != 3 or not all(s > 0 for s in out):
        raise VolumeError(f"spacing must be three positive values, got {tuple(spacing)}")
    return out


@dataclass
class Volume:
    """3D float32 grid indexed (z, y, x) with spacing (dz, dy, dx) in mm.

    ``affine`` holds the raw orientation block of a NIfTI header so it can be
    written back unchanged; it is never interpreted.
    """

    data: np.ndarray
    spacing: tuple[float, float, float]
    intensity_unit: str = HOUNSFIELD
    affine: Optional[bytes] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise VolumeError(f"volume data must be 3D (z, y, x), got shape {self.data.shape}")
        self.spacing = _spacing(self.spacing)
        if self.intensity_unit not in (HOUNSFIELD, NORMALIZED):
            raise VolumeError(f"unknown intensity unit {self.intensity_unit!r}")
        if self.intensity_unit == NORMALIZED and self.data.size and (self.data.min() < 0 or self.data.max() > 1):
            raise VolumeError("normalized volume has values outside [0, 1]")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def with_data(self, data: np.ndarray, spacing=None, intensity_unit=None) -> "Volume":
        return Volume(data, spacing or self.spacing, intensity_unit or self.intensity_unit, self.affine)


@dataclass
class SegVolume:
    """uint8 label map aligned with a :class:`Volume` (0 background, 1 liver, 2 lesion)."""

    labels: np.ndarray
    spacing: tuple[float, float, float]
    affine: Optional[bytes] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise VolumeError(f"label data must be 3D, got shape {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() > LESION):
            raise VolumeError(f"label values must be in {{0, 1, 2}}, found {np.unique(labels).tolist()}")
        self.labels = labels.astype(np.uint8)
        self.spacing = _spacing(self.spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.labels.shape

    def check_aligned(self, volume: Volume) -> None:
        if self.shape != volume.shape:
            raise VolumeError(f"label shape {self.shape} does not match volume shape {volume.shape}")


@dataclass
class SliceTriplet:
    s0: np.ndarray
    s1: np.ndarray
    s2: np.ndarray
    labels1: Optional[np.ndarray] = None
    source_spacing_z: float = 1.0
    z: int = 0  # index of s0 in the source volume

    def __post_init__(self):
        if not (self.s0.shape == self.s1.shape == self.s2.shape):
            raise VolumeError("triplet slices differ in shape")

    @property
    def center(self) -> int:
        return self.z + 1


def window_normalize(volume: Volume, lo_hu: float = DEFAULT_WINDOW[0], hi_hu: float = DEFAULT_WINDOW[1]) -> Volume:
    """Clamp to [lo_hu, hi_hu] and map linearly onto [0, 1]."""
    if not lo_hu < hi_hu:
        raise VolumeError(f"degenerate intensity window ({lo_hu}, {hi_hu})")
    data = (np.clip(volume.data, lo_hu, hi_hu) - np.float32(lo_hu)) / np.float32(hi_hu - lo_hu)
    return volume.with_data(np.clip(data, 0, 1), intensity_unit=NORMALIZED)


def triplet_count(depth: int, stride: int = 1) -> int:
    return (depth - 3) // stride + 1 if depth >= 3 else 0


def extract_triplets(volume: Volume, seg: SegVolume | None = None, stride: int = 1) -> list[SliceTriplet]:
    """Overlapping (z, z+1, z+2) windows stepped by ``stride``."""
    if stride < 1:
        raise VolumeError(f"stride must be positive, got {stride}")
    depth = volume.shape[0]
    if depth < 3:
        raise VolumeError(f"need at least 3 slices to form a triplet, volume has {depth}")
    if seg is not None:
        seg.check_aligned(volume)
    d = volume.data
    out = []
    for z in range(0, depth - 2, stride):
        labels = seg.labels[z + 1] if seg is not None else None
        out.append(SliceTriplet(d[z], d[z + 1], d[z + 2], labels, volume.spacing[0], z))
    return out
