"""Interpolation quality (PSNR, SSIM) and segmentation metrics (Dice, recall,
precision, average symmetric surface distance), with ROI-restricted variants."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

ROIS = ("whole", "liver", "lesion")


class EmptyROIError(ValueError):
    """The ROI mask selects no pixels (or no SSIM window centres)."""


class UndefinedASDError(ValueError):
    """ASD is undefined when either mask is empty."""


def roi_mask(labels: np.ndarray, roi: str) -> np.ndarray | None:
    """Boolean ROI from a label map: liver includes its lesions; whole is None."""
    if roi == "whole":
        return None
    if roi == "liver":
        return labels >= 1
    if roi == "lesion":
        return labels == 2
    raise ValueError(f"unknown ROI {roi!r}")


def psnr(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE), MSE over ``mask`` if given; identical inputs give 99 dB."""
    pred = np.asarray(pred, np.float64)
    gt = np.asarray(gt, np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"psnr: shape mismatch {pred.shape} vs {gt.shape}")
    err = (pred - gt) ** 2
    if mask is not None:
        mask = np.asarray(mask, bool)
        if not mask.any():
            raise EmptyROIError("psnr: empty ROI mask")
        err = err[mask]
    mse = err.mean()
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse)))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def ssim_map(pred: np.ndarray, gt: np.ndarray, peak: float = 1.0) -> np.ndarray:
    """SSIM at every window position fully inside the image (valid region)."""
    x = np.asarray(pred, np.float64)
    y = np.asarray(gt, np.float64)
    if x.shape != y.shape:
        raise ValueError(f"ssim: shape mismatch {x.shape} vs {y.shape}")
    if x.ndim != 2 or min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"ssim: image {x.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = gaussian_window()
    half = SSIM_WINDOW // 2

    def filt(img):
        out = ndimage.correlate1d(img, g, axis=0, mode="constant")
        out = ndimage.correlate1d(out, g, axis=1, mode="constant")
        return out[half:-half, half:-half]

    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x**2
    syy = filt(y * y) - mu_y**2
    sxy = filt(x * y) - mu_x * mu_y
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    return ((2 * mu_x * mu_y + c1) * (2 * sxy + c2)) / ((mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2))


def ssim(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None, peak: float = 1.0) -> float:
    """Mean windowed SSIM; with ``mask``, only windows centred inside the mask count."""
    smap = ssim_map(pred, gt, peak)
    if mask is None:
        return float(smap.mean())
    half = SSIM_WINDOW // 2
    centres = np.asarray(mask, bool)[half:-half, half:-half]
    if not centres.any():
        raise EmptyROIError("ssim: no window centre lies inside the ROI")
    return float(smap[centres].mean())


def _select(labels: np.ndarray, class_id) -> np.ndarray:
    if isinstance(class_id, (tuple, list, set, frozenset)):
        return np.isin(labels, list(class_id))
    return np.asarray(labels) == class_id


def seg_overlap(pred_labels: np.ndarray, gt_labels: np.ndarray, class_id=1) -> tuple[float, float, float]:
    """(dice, recall, precision) for ``class_id`` (an int or a collection of ints).

    Both empty -> (1, 1, 1). Exactly one side empty -> (0, 0, 0).
    """
    pred_labels, gt_labels = np.asarray(pred_labels), np.asarray(gt_labels)
    if pred_labels.shape != gt_labels.shape:
        raise ValueError(f"seg_overlap: shape mismatch {pred_labels.shape} vs {gt_labels.shape}")
    p = _select(pred_labels, class_id)
    g = _select(gt_labels, class_id)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    if tp + fp == 0 and tp + fn == 0:
        return 1.0, 1.0, 1.0
    if tp + fp == 0 or tp + fn == 0:
        return 0.0, 0.0, 0.0
    return 2 * tp / (2 * tp + fp + fn), tp / (tp + fn), tp / (tp + fp)


def surface(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one face-adjacent background voxel (outside counts as background)."""
    mask = np.asarray(mask, bool)
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    return mask & ~ndimage.binary_erosion(mask, structure, border_value=0)


def asd(pred_mask: np.ndarray, gt_mask: np.ndarray, spacing) -> float:
    """Average symmetric surface distance in mm."""
    pred_mask, gt_mask = np.asarray(pred_mask, bool), np.asarray(gt_mask, bool)
    if pred_mask.shape != gt_mask.shape:
        raise ValueError(f"asd: shape mismatch {pred_mask.shape} vs {gt_mask.shape}")
    if not pred_mask.any() or not gt_mask.any():
        raise UndefinedASDError("asd: undefined for an empty mask")
    spacing = tuple(float(s) for s in spacing)
    sp, sg = surface(pred_mask), surface(gt_mask)
    dist_to_g = ndimage.distance_transform_edt(~sg, sampling=spacing)
    dist_to_p = ndimage.distance_transform_edt(~sp, sampling=spacing)
    total = dist_to_g[sp].sum() + dist_to_p[sg].sum()
    return float(total / (sp.sum() + sg.sum()))


# --------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    """Per-item metric values with (roi, metric) aggregates.

    Missing values (e.g. undefined ASD) are stored as NaN, written as empty
    cells and excluded from aggregates.
    """

    items: list[tuple[str, str, str, float]] = field(default_factory=list)

    def add(self, item_id: str, roi: str, metric: str, value: float) -> None:
        self.items.append((str(item_id), roi, metric, float(value)))

    def aggregates(self) -> dict[tuple[str, str], tuple[float, float, int]]:
        """(roi, metric) -> (mean, population std, count) in first-seen order."""
        groups: dict[tuple[str, str], list[float]] = {}
        for _, roi, metric, value in self.items:
            groups.setdefault((roi, metric), [])
            if not math.isnan(value):
                groups[(roi, metric)].append(value)
        out = {}
        for key, vals in groups.items():
            arr = np.asarray(vals, np.float64)
            out[key] = (float(arr.mean()) if arr.size else math.nan, float(arr.std()) if arr.size else math.nan, int(arr.size))
        return out

    def mean(self, roi: str, metric: str) -> float:
        return self.aggregates()[(roi, metric)][0]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["item_id", "roi", "metric", "value"])
        for item_id, roi, metric, value in self.items:
            w.writerow([item_id, roi, metric, "" if math.isnan(value) else repr(value)])
        buf.write("\n")
        w.writerow(["roi", "metric", "mean", "std", "count"])
        for (roi, metric), (m, s, n) in self.aggregates().items():
            w.writerow([roi, metric, "" if math.isnan(m) else repr(m), "" if math.isnan(s) else repr(s), n])
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> tuple["MetricReport", dict]:
        """Parse a report and its footer; returns (report, footer aggregates)."""
        body, _, footer = text.partition("\n\n")
        rep = cls()
        for row in list(csv.reader(io.StringIO(body)))[1:]:
            rep.add(row[0], row[1], row[2], float(row[3]) if row[3] else math.nan)
        agg = {}
        for row in list(csv.reader(io.StringIO(footer)))[1:]:
            if row:
                agg[(row[0], row[1])] = (float(row[2]) if row[2] else math.nan,
                                         float(row[3]) if row[3] else math.nan, int(row[4]))
        return rep, agg
