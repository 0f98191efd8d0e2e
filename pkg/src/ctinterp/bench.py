"""Benchmark matrix: upsampling methods x thickness factors x ROIs x metrics.

Held-out thin phantoms are degraded by each factor, upsampled back with every
available method and compared against the withheld thin slices (interpolation
metrics on inserted slices) and, through the slice-wise segmenter, against the
thin label maps (segmentation metrics per volume).
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as kv
from .flownet import FlowInterpolator, load_config as load_flow_config
from .metrics import EmptyROIError, UndefinedASDError, asd, psnr, roi_mask, seg_overlap, ssim
from .numerics import load_checkpoint
from .phantom import degrade_thickness, generate, spec_from_kv
from .segmenter import load_config as load_unet_config, predict_volume
from .upsample import upsample_volume
from .volume import SegVolume, Volume, window_normalize

log = logging.getLogger(__name__)

METHODS = ("nn", "linear", "flow_noseg", "flow_seg")
ROIS = ("whole", "liver", "lesion")
IMAGE_METRICS = ("psnr", "ssim")
SEG_METRICS = ("dice", "recall", "precision", "asd")
MATRIX_COLUMNS = ("method", "factor", "roi", "metric", "mean", "std", "count")
CURVE_COLUMNS = ("method", "factor", "dice_liver", "dice_lesion", "recall_lesion", "precision_lesion")

# classes scored by the segmentation metrics; "whole" scores all foreground
ROI_CLASSES = {"whole": (1, 2), "liver": (1, 2), "lesion": 2}


@dataclass
class BenchConfig:
    test_count: int = 10
    test_seed: int = 1000
    phantom: dict[str, str] = field(default_factory=dict)  # phantom spec keys
    factors: tuple[int, ...] = (2, 3)
    thickness_factors: tuple[int, ...] = (1, 2, 3)
    methods: tuple[str, ...] = METHODS
    rois: tuple[str, ...] = ROIS
    segmenter: str | None = None
    flow_noseg: str | None = None
    flow_seg: str | None = None
    batch_size: int = 16

    def __post_init__(self):
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise kv.ConfigError(f"unknown bench methods {sorted(bad)}")
        bad = set(self.rois) - set(ROIS)
        if bad:
            raise kv.ConfigError(f"unknown ROIs {sorted(bad)}")
        if any(f not in (2, 3) for f in self.factors):
            raise kv.ConfigError(f"factors must be 2 or 3, got {self.factors}")
        if any(f not in (1, 2, 3) for f in self.thickness_factors):
            raise kv.ConfigError(f"thickness factors must be 1, 2 or 3, got {self.thickness_factors}")
        if self.test_count < 1:
            raise kv.ConfigError("test_count must be positive")

    @property
    def metrics(self) -> tuple[str, ...]:
        return IMAGE_METRICS + SEG_METRICS


def _names(value: str) -> tuple[str, ...]:
    return tuple(v for v in value.replace(",", " ").split() if v)


def bench_config_from_kv(values: dict[str, str], base_dir: Path | None = None) -> BenchConfig:
    """Keys: test_count, test_seed, phantom_spec (path), factors, thickness_factors,
    methods, rois, segmenter, flow_noseg, flow_seg, batch_size. Relative paths
    resolve against ``base_dir``."""
    known = {"test_count", "test_seed", "phantom_spec", "factors", "thickness_factors", "methods", "rois",
             "segmenter", "flow_noseg", "flow_seg", "batch_size"}
    unknown = set(values) - known
    if unknown:
        raise kv.ConfigError(f"unknown bench config keys: {sorted(unknown)}")
    base = base_dir or Path(".")

    def path(key):
        return str(base / values[key]) if values.get(key) else None

    try:
        phantom = kv.read_kv(base / values["phantom_spec"]) if values.get("phantom_spec") else {}
        return BenchConfig(
            test_count=int(values.get("test_count", 10)),
            test_seed=int(values.get("test_seed", 1000)),
            phantom=phantom,
            factors=kv.ints(values.get("factors", "2,3")),
            thickness_factors=kv.ints(values.get("thickness_factors", "1,2,3")),
            methods=_names(values.get("methods", ",".join(METHODS))),
            rois=_names(values.get("rois", ",".join(ROIS))),
            segmenter=path("segmenter"),
            flow_noseg=path("flow_noseg"),
            flow_seg=path("flow_seg"),
            batch_size=int(values.get("batch_size", 16)),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, kv.ConfigError):
            raise
        raise kv.ConfigError(f"invalid bench config: {exc}") from None


@dataclass
class BenchResult:
    rows: list[tuple] = field(default_factory=list)  # MATRIX_COLUMNS
    curve: list[tuple] = field(default_factory=list)  # CURVE_COLUMNS
    skipped: list[tuple[str, str]] = field(default_factory=list)

    def value(self, method: str, factor: int, roi: str, metric: str) -> float:
        for r in self.rows:
            if r[:4] == (method, factor, roi, metric):
                return r[4]
        raise KeyError((method, factor, roi, metric))

    def matrix_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(MATRIX_COLUMNS)
        for r in self.rows:
            w.writerow([*r[:4], *(_num(v) for v in r[4:6]), r[6]])
        buf.write("\n")
        w.writerow(("skipped_arm", "reason"))
        w.writerows(self.skipped)
        return buf.getvalue()

    def curve_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for r in self.curve:
            w.writerow([r[0], r[1], *(_num(v) for v in r[2:])])
        return buf.getvalue()

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.csv").write_text(self.matrix_csv())
        (out / "thickness.csv").write_text(self.curve_csv())
        return out / "bench.csv", out / "thickness.csv"


def _num(v: float) -> str:
    return "" if v is None or math.isnan(v) else repr(float(v))


def _summary(values: list[float]) -> tuple[float, float, int]:
    arr = np.asarray([v for v in values if not math.isnan(v)], np.float64)
    if not arr.size:
        return math.nan, math.nan, 0
    return float(arr.mean()), float(arr.std()), int(arr.size)


def held_out_set(cfg: BenchConfig) -> list[tuple[Volume, SegVolume]]:
    """Held-out thin phantoms (normalized) drawn from seeds test_seed, test_seed+1, ..."""
    values = dict(cfg.phantom)
    values["seed"] = str(cfg.test_seed)
    out = []
    for i in range(cfg.test_count):
        vol, seg = generate(spec_from_kv(values, seed_offset=i))
        out.append((window_normalize(vol), seg))
    return out


def image_scores(pred: np.ndarray, gt: Volume, seg: SegVolume, factor: int, roi: str) -> dict[str, list[float]]:
    """PSNR/SSIM per inserted slice; slices whose ROI is empty are left out."""
    out = {m: [] for m in IMAGE_METRICS}
    for z in range(pred.shape[0]):
        if z % factor == 0:
            continue
        mask = roi_mask(seg.labels[z], roi)
        try:
            scores = psnr(pred[z], gt.data[z], mask), ssim(pred[z], gt.data[z], mask)
        except EmptyROIError:
            continue
        out["psnr"].append(scores[0])
        out["ssim"].append(scores[1])
    return out


def seg_scores(pred: np.ndarray, seg: SegVolume, roi: str) -> dict[str, float]:
    classes = ROI_CLASSES[roi]
    d, r, p = seg_overlap(pred, seg.labels, classes)
    pm = np.isin(pred, classes) if isinstance(classes, tuple) else pred == classes
    gm = np.isin(seg.labels, classes) if isinstance(classes, tuple) else seg.labels == classes
    try:
        a = asd(pm, gm, seg.spacing)
    except UndefinedASDError:
        a = math.nan
    return {"dice": d, "recall": r, "precision": p, "asd": a}


def _load_arms(cfg: BenchConfig, result: BenchResult):
    interpolators = {}
    for name in ("flow_noseg", "flow_seg"):
        if name not in cfg.methods:
            continue
        ckpt = getattr(cfg, name)
        if not ckpt or not Path(ckpt).exists():
            result.skipped.append((name, f"missing checkpoint {ckpt or '(not configured)'}"))
            continue
        interpolators[name] = FlowInterpolator(load_checkpoint(ckpt), load_flow_config(ckpt), cfg.batch_size)
    segmenter = None
    if cfg.segmenter and Path(cfg.segmenter).exists():
        segmenter = (load_checkpoint(cfg.segmenter), load_unet_config(cfg.segmenter))
    else:
        result.skipped.append(("segmentation", f"missing segmenter checkpoint {cfg.segmenter or '(not configured)'}"))
    return interpolators, segmenter


def run_bench(cfg: BenchConfig) -> BenchResult:
    result = BenchResult()
    interpolators, segmenter = _load_arms(cfg, result)
    methods = [m for m in cfg.methods if m in ("nn", "linear") or m in interpolators]
    data = held_out_set(cfg)

    def segment_volume(vol: np.ndarray) -> np.ndarray:
        params, ucfg = segmenter
        return predict_volume(params, vol, ucfg, cfg.batch_size)

    predictions: dict[tuple[str, int], list[np.ndarray]] = {}
    for method in methods:
        for factor in sorted(set(cfg.factors) | {f for f in cfg.thickness_factors if f > 1}):
            ups = []
            for vol, seg in data:
                thick, _ = degrade_thickness(vol, None, factor)
                if method in ("nn", "linear"):
                    ups.append(upsample_volume(thick, factor, method).data)
                else:
                    ups.append(upsample_volume(thick, factor, "flow", interpolators[method]).data)
            predictions[(method, factor)] = ups
        log.info("bench: upsampled with %s", method)

    seg_cache: dict[tuple[str, int], list[np.ndarray]] = {}
    if segmenter is not None:
        thin_pred = [segment_volume(vol.data) for vol, _ in data]
        for key, ups in predictions.items():
            seg_cache[key] = [segment_volume(u) for u in ups]

    for method in methods:
        for factor in cfg.factors:
            ups = predictions[(method, factor)]
            for roi in cfg.rois:
                per = {m: [] for m in IMAGE_METRICS}
                for u, (vol, seg) in zip(ups, data):
                    for m, vals in image_scores(u, vol, seg, factor, roi).items():
                        per[m].extend(vals)
                for m in IMAGE_METRICS:
                    result.rows.append((method, factor, roi, m, *_summary(per[m])))
                if segmenter is None:
                    continue
                seg_per = {m: [] for m in SEG_METRICS}
                for p, (_, seg) in zip(seg_cache[(method, factor)], data):
                    for m, v in seg_scores(p, seg, roi).items():
                        seg_per[m].append(v)
                for m in SEG_METRICS:
                    result.rows.append((method, factor, roi, m, *_summary(seg_per[m])))

    if segmenter is not None:
        for method in methods:
            for factor in cfg.thickness_factors:
                preds = thin_pred if factor == 1 else seg_cache[(method, factor)]
                liver = [seg_scores(p, seg, "liver")["dice"] for p, (_, seg) in zip(preds, data)]
                lesion = [seg_scores(p, seg, "lesion") for p, (_, seg) in zip(preds, data)]
                result.curve.append((method, factor, float(np.mean(liver)),
                                     float(np.mean([s["dice"] for s in lesion])),
                                     float(np.mean([s["recall"] for s in lesion])),
                                     float(np.mean([s["precision"] for s in lesion]))))
    return result
