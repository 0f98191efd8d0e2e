"""Two-phase training of the slice interpolator.

Phase 1 (``pretrain``) fits G_pre on thin-slice data with the dropped middle
slice as ground truth. Phase 2 (``finetune``) adapts G to thick-slice data with
no middle ground truth, combining a cycle-consistency term, a pseudo-supervised
term against the frozen G_pre, and a segmentation-attention term from a frozen
segmenter.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import config as kv
from .baselines import linear_interpolate
from .flownet import FlowField, FlowInterpolator, FlowNetConfig, init_flownet, interpolate, save_config
from .metrics import psnr
from .numerics import (
    AdamState,
    NonFiniteError,
    ParamStore,
    ShapeError,
    Tape,
    Tensor,
    adam_step,
    concat,
    l1_loss,
    no_tape,
    one_hot,
    save_checkpoint,
    soft_dice_loss,
    take,
    tv_regularizer,
)
from .segmenter import NUM_CLASSES, UNetConfig, segment
from .volume import SegVolume, Volume, extract_triplets

log = logging.getLogger(__name__)

PRETRAIN_COLUMNS = ("step", "epoch", "l_dvf", "total", "val_psnr_whole", "val_psnr_liver", "val_psnr_linear")
FINETUNE_COLUMNS = ("step", "epoch", "l_cycle", "l_ps", "l_seg", "total", "val_psnr_whole", "val_psnr_liver")


class TrainingDiverged(RuntimeError):
    """Loss or gradients became non-finite."""

    def __init__(self, step: int, detail: str = ""):
        super().__init__(f"diverged at step {step}" + (f": {detail}" if detail else ""))
        self.step = step


class SkipSample(Exception):
    """A sample lacks the labels a loss term needs; not a failure."""


@dataclass
class LossWeights:
    lambda_cycle: float = 1.0
    lambda_seg: float = 0.5
    lambda_ps: float = 1.0

    def __post_init__(self):
        w = (self.lambda_cycle, self.lambda_seg, self.lambda_ps)
        if any(x < 0 for x in w):
            raise ValueError(f"loss weights must be non-negative, got {w}")
        if not any(x > 0 for x in w):
            raise ValueError("at least one loss weight must be positive")


@dataclass
class TrainConfig:
    """Optimizer and loop settings shared by both training phases."""

    lr: float = 1e-4
    batch_size: int = 8
    epochs: int = 30
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    checkpoint_interval: int = 0  # epochs; 0 writes only the final checkpoint
    tv_motion: float = 1.0
    tv_mask: float = 1.0
    pretrain_factors: tuple[int, ...] = (2, 3)
    init_from_pretrained: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        self.pretrain_factors = tuple(int(f) for f in self.pretrain_factors)
        if not self.pretrain_factors or any(f < 2 for f in self.pretrain_factors):
            raise ValueError(f"pretrain_factors must be integers >= 2, got {self.pretrain_factors}")


_FLOW_KEYS = {
    "encoder_channels": kv.ints,
    "bottleneck_channels": int,
    "kernel": int,
    "skip_connections": kv.boolean,
    "max_disp": float,
    "zero_init_head": kv.boolean,
}
_TRAIN_KEYS = {
    "lr": float,
    "batch_size": int,
    "epochs": int,
    "seed": int,
    "checkpoint_interval": int,
    "tv_motion": float,
    "tv_mask": float,
    "pretrain_factors": kv.ints,
    "init_from_pretrained": kv.boolean,
}
_WEIGHT_KEYS = ("lambda_cycle", "lambda_seg", "lambda_ps")


def configs_from_kv(values: dict[str, str]) -> tuple[TrainConfig, FlowNetConfig]:
    """Split a key = value mapping into training and model configs; unknown keys are errors."""
    train, flow, weights = {}, {}, {}
    try:
        for key, raw in values.items():
            if key in _TRAIN_KEYS:
                train[key] = _TRAIN_KEYS[key](raw)
            elif key in _FLOW_KEYS:
                flow[key] = _FLOW_KEYS[key](raw)
            elif key in _WEIGHT_KEYS:
                weights[key] = float(raw)
            else:
                raise kv.ConfigError(f"unknown training config key {key!r}")
        return TrainConfig(loss_weights=LossWeights(**weights), **train), FlowNetConfig(**flow)
    except ValueError as exc:
        if isinstance(exc, kv.ConfigError):
            raise
        raise kv.ConfigError(str(exc)) from exc


def load_train_config(path) -> tuple[TrainConfig, FlowNetConfig]:
    return configs_from_kv(kv.read_kv(path))


# --------------------------------------------------------------------------
# data


@dataclass
class DropMiddleSet:
    """Pairs (a, b) with a ground-truth slice at fractional position n between them."""

    a: np.ndarray  # (N, H, W)
    b: np.ndarray
    target: np.ndarray
    n: np.ndarray  # (N,)
    labels: np.ndarray | None = None  # labels of the target slice

    def __len__(self) -> int:
        return len(self.a)

    def subset(self, idx) -> "DropMiddleSet":
        return DropMiddleSet(self.a[idx], self.b[idx], self.target[idx], self.n[idx],
                             None if self.labels is None else self.labels[idx])


def drop_middle_samples(volumes: Sequence[Volume], segs: Sequence[SegVolume] | None = None,
                        factors: Sequence[int] = (2,)) -> DropMiddleSet:
    """Thin-slice samples: for gap f, slices z and z+f bracket targets z+j at n = j/f."""
    a, b, t, n, lab = [], [], [], [], []
    for i, vol in enumerate(volumes):
        d = vol.data
        seg = None if segs is None else segs[i].labels
        for f in factors:
            for z in range(d.shape[0] - f):
                for j in range(1, f):
                    a.append(d[z])
                    b.append(d[z + f])
                    t.append(d[z + j])
                    n.append(j / f)
                    if seg is not None:
                        lab.append(seg[z + j])
    if not a:
        raise ValueError("drop_middle_samples: no samples (empty dataset or volumes too thin)")
    return DropMiddleSet(np.stack(a), np.stack(b), np.stack(t), np.asarray(n, np.float32),
                         np.stack(lab) if lab else None)


@dataclass
class TripletSet:
    """Stacked thick-slice triplets; ``labels`` holds the centre-slice labels."""

    s0: np.ndarray
    s1: np.ndarray
    s2: np.ndarray
    labels: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.s0)

    def subset(self, idx) -> "TripletSet":
        return TripletSet(self.s0[idx], self.s1[idx], self.s2[idx], None if self.labels is None else self.labels[idx])


def stack_triplets(volumes: Sequence[Volume], segs: Sequence[SegVolume] | None = None) -> TripletSet:
    trips = []
    for i, vol in enumerate(volumes):
        trips.extend(extract_triplets(vol, None if segs is None else segs[i]))
    if not trips:
        raise ValueError("no triplets: dataset is empty")
    labels = None
    if all(t.labels1 is not None for t in trips):
        labels = np.stack([t.labels1 for t in trips]).astype(np.int64)
    return TripletSet(np.stack([t.s0 for t in trips]), np.stack([t.s1 for t in trips]),
                      np.stack([t.s2 for t in trips]), labels)


# --------------------------------------------------------------------------
# losses


def _nchw(x) -> Tensor:
    if isinstance(x, Tensor):
        if x.ndim != 4:
            raise ShapeError(f"expected (N,1,H,W) tensor, got {x.shape}")
        return x
    arr = np.asarray(x, np.float32)
    if arr.ndim == 2:
        arr = arr[None, None]
    elif arr.ndim == 3:
        arr = arr[:, None]
    return Tensor(arr)


def dvf_loss(s_hat: Tensor, s_gt, flow: FlowField, tv_motion: float = 1.0, tv_mask: float = 1.0) -> Tensor:
    """Mean L1 reconstruction + weighted mean-TV of the motion and mask fields."""
    gt = _nchw(s_gt)
    if s_hat.shape != gt.shape:
        raise ShapeError(f"dvf_loss: prediction {s_hat.shape} vs ground truth {gt.shape}")
    loss = l1_loss(s_hat, gt)
    if tv_motion:
        loss = loss + tv_regularizer(flow.motion(), "mean") * tv_motion
    if tv_mask:
        loss = loss + tv_regularizer(flow.mask, "mean") * tv_mask
    return loss


@dataclass
class CycleResult:
    loss: Tensor
    s05: Tensor
    s15: Tensor
    s1: Tensor


def cycle_loss(params: ParamStore, s0, s1, s2, config: FlowNetConfig | None = None) -> CycleResult:
    """S^0.5 = G(s0, s1), S^1.5 = G(s1, s2), S^1 = G(S^0.5, S^1.5); loss = mean |S^1 - s1|.

    The two first-level syntheses share one batched network call.
    """
    a0, a1, a2 = _nchw(s0), _nchw(s1), _nchw(s2)
    if not (a0.shape == a1.shape == a2.shape):
        raise ShapeError(f"cycle_loss: triplet shapes differ {a0.shape}, {a1.shape}, {a2.shape}")
    n = a0.shape[0]
    first, _ = interpolate(params, concat([a0, a1], axis=0), concat([a1, a2], axis=0), 0.5, config)
    s05, s15 = take(first, np.s_[:n]), take(first, np.s_[n:])
    s1_hat, _ = interpolate(params, s05, s15, 0.5, config)
    return CycleResult(l1_loss(s1_hat, a1), s05, s15, s1_hat)


def teacher_outputs(pre_params: ParamStore, s0, s1, s2, config: FlowNetConfig | None = None) -> tuple[Tensor, Tensor]:
    """Frozen G_pre predictions at the two half-way positions (no tape, no gradient)."""
    a0, a1, a2 = _nchw(s0), _nchw(s1), _nchw(s2)
    n = a0.shape[0]
    with no_tape():
        out, _ = interpolate(pre_params.frozen(), np.concatenate([a0.data, a1.data]),
                             np.concatenate([a1.data, a2.data]), 0.5, config)
    return Tensor(out.data[:n]), Tensor(out.data[n:])


def pseudo_supervised_loss(params: ParamStore, pre_params: ParamStore, s0, s1, s2,
                           config: FlowNetConfig | None = None, s05: Tensor | None = None,
                           s15: Tensor | None = None) -> Tensor:
    """mean|G(s0,s1) - G_pre(s0,s1)| + mean|G(s1,s2) - G_pre(s1,s2)|.

    ``s05``/``s15`` may pass in student outputs already computed by ``cycle_loss``.
    """
    t05, t15 = teacher_outputs(pre_params, s0, s1, s2, config)
    if s05 is None or s15 is None:
        a0, a1, a2 = _nchw(s0), _nchw(s1), _nchw(s2)
        n = a0.shape[0]
        out, _ = interpolate(params, concat([a0, a1], axis=0), concat([a1, a2], axis=0), 0.5, config)
        s05, s15 = take(out, np.s_[:n]), take(out, np.s_[n:])
    return l1_loss(s05, t05) + l1_loss(s15, t15)


def segmentation_loss(seg_params: ParamStore, s1_hat: Tensor, labels1, seg_config: UNetConfig | None = None) -> Tensor:
    """Soft Dice (liver and lesion channels, pooled over the batch) of the frozen
    segmenter's prediction on the reconstructed centre slice against its labels."""
    if labels1 is None:
        raise SkipSample("centre slice has no labels")
    labels = np.asarray(labels1, np.int64)
    if labels.ndim == 2:
        labels = labels[None]
    if labels.shape != (s1_hat.shape[0],) + s1_hat.shape[2:]:
        raise ShapeError(f"segmentation_loss: labels {labels.shape} do not match slices {s1_hat.shape}")
    probs = segment(seg_params.frozen(), s1_hat, seg_config)
    target = Tensor(one_hot(labels, NUM_CLASSES, dtype=probs.dtype)[:, 1:])
    return soft_dice_loss(take(probs, np.s_[:, 1:]), target, pooled=True)


@dataclass
class LossTerms:
    total: Tensor
    l_cycle: float
    l_ps: float
    l_seg: float


def combined_loss(params: ParamStore, pre_params: ParamStore | None, seg_params: ParamStore | None,
                  batch: TripletSet, weights: LossWeights, config: FlowNetConfig | None = None,
                  seg_config: UNetConfig | None = None) -> LossTerms:
    """lambda_cycle * L_cycle + lambda_seg * L_seg + lambda_ps * L_ps.

    Terms with zero weight are not evaluated and report 0. A batch without
    centre labels skips the segmentation term (reported 0).
    """
    cyc = cycle_loss(params, batch.s0, batch.s1, batch.s2, config)
    terms, ws = [], []
    l_cycle = l_ps = l_seg = 0.0
    if weights.lambda_cycle > 0:
        terms.append(cyc.loss)
        ws.append(weights.lambda_cycle)
        l_cycle = float(cyc.loss.data)
    if weights.lambda_ps > 0:
        if pre_params is None:
            raise ValueError("lambda_ps > 0 needs the pretrained interpolator")
        ps = pseudo_supervised_loss(params, pre_params, batch.s0, batch.s1, batch.s2, config, cyc.s05, cyc.s15)
        terms.append(ps)
        ws.append(weights.lambda_ps)
        l_ps = float(ps.data)
    if weights.lambda_seg > 0:
        if seg_params is None:
            raise ValueError("lambda_seg > 0 needs the segmenter")
        try:
            seg = segmentation_loss(seg_params, cyc.s1, batch.labels, seg_config)
            terms.append(seg)
            ws.append(weights.lambda_seg)
            l_seg = float(seg.data)
        except SkipSample:
            pass
    if not terms:
        # every active term skipped; keep a differentiable zero so the step is a no-op
        terms, ws = [cyc.loss], [0.0]
    total = terms[0] * ws[0]
    for t, w in zip(terms[1:], ws[1:]):
        total = total + t * w
    return LossTerms(total, l_cycle, l_ps, l_seg)


# --------------------------------------------------------------------------
# loops


def validation_psnr(params: ParamStore, val: DropMiddleSet, config: FlowNetConfig | None = None,
                    batch_size: int = 16) -> tuple[float, float]:
    """Mean PSNR (whole slice, liver mask) of G against held-out middle slices."""
    interp = FlowInterpolator(params, config, batch_size)
    whole, liver = [], []
    for n_val in np.unique(val.n):
        idx = np.flatnonzero(val.n == n_val)
        pred = interp(val.a[idx], val.b[idx], float(n_val))
        for k, i in enumerate(idx):
            whole.append(psnr(pred[k], val.target[i]))
            if val.labels is not None and (val.labels[i] >= 1).any():
                liver.append(psnr(pred[k], val.target[i], val.labels[i] >= 1))
    return float(np.mean(whole)), float(np.mean(liver)) if liver else float("nan")


def linear_psnr(val: DropMiddleSet) -> float:
    return float(np.mean([psnr(linear_interpolate(a, b, float(n)), t)
                          for a, b, t, n in zip(val.a, val.b, val.target, val.n)]))


@dataclass
class TrainResult:
    params: ParamStore
    config: FlowNetConfig
    rows: list[dict] = field(default_factory=list)


class _CsvLog:
    def __init__(self, path, columns):
        self.columns = columns
        self.fh = open(path, "w", newline="") if path is not None else None
        self.writer = csv.writer(self.fh, lineterminator="\n") if self.fh else None
        if self.writer:
            self.writer.writerow(columns)

    def write(self, row: dict) -> None:
        if self.writer:
            self.writer.writerow(["" if row.get(c) is None else _fmt(row[c]) for c in self.columns])
            self.fh.flush()

    def close(self) -> None:
        if self.fh:
            self.fh.close()


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _step(params: ParamStore, state: AdamState, lr: float, step: int, loss_fn: Callable[[], Tensor]):
    params.zero_grad()
    try:
        with Tape() as tape:
            out = loss_fn()
        loss = out if isinstance(out, Tensor) else out.total
        if not np.isfinite(loss.data).all():
            raise TrainingDiverged(step, "loss is not finite")
        tape.backward(loss)
    except NonFiniteError as exc:
        raise TrainingDiverged(step, str(exc)) from exc
    for name, t in params.items():
        if not np.isfinite(t.grad).all():
            raise TrainingDiverged(step, f"non-finite gradient in {name}")
    adam_step(params, state, lr=lr)
    return out


def _checkpoint(params, config, path, epoch, cfg: TrainConfig, final: bool) -> None:
    if path is None:
        return
    if final or (cfg.checkpoint_interval and (epoch + 1) % cfg.checkpoint_interval == 0):
        save_checkpoint(params, path)
        save_config(config, path)


def pretrain(train: DropMiddleSet, cfg: TrainConfig, flow_config: FlowNetConfig | None = None,
             val: DropMiddleSet | None = None, checkpoint: str | Path | None = None,
             csv_path: str | Path | None = None) -> TrainResult:
    """Supervised drop-middle training of G_pre with Adam on ``dvf_loss``."""
    if len(train) == 0:
        raise ValueError("pretrain: empty dataset")
    flow_config = flow_config or FlowNetConfig()
    params = init_flownet(flow_config, cfg.seed)
    state = AdamState.for_params(params)
    rng = np.random.default_rng(cfg.seed + 1)
    result = TrainResult(params, flow_config)
    logger = _CsvLog(csv_path, PRETRAIN_COLUMNS)
    lin = linear_psnr(val) if val is not None else None
    step = 0
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(train))
            for start in range(0, len(order), cfg.batch_size):
                b = train.subset(order[start : start + cfg.batch_size])

                def loss_fn():
                    out, flow = interpolate(params, b.a, b.b, b.n, flow_config)
                    return dvf_loss(out, b.target, flow, cfg.tv_motion, cfg.tv_mask)

                loss = _step(params, state, cfg.lr, step, loss_fn)
                row = {"step": step, "epoch": epoch, "l_dvf": float(loss.data), "total": float(loss.data)}
                if start + cfg.batch_size >= len(order) and val is not None:
                    row["val_psnr_whole"], row["val_psnr_liver"] = validation_psnr(params, val, flow_config)
                    row["val_psnr_linear"] = lin
                    log.info("pretrain epoch %d: loss %.4f val %.2f dB (linear %.2f dB)",
                             epoch, row["total"], row["val_psnr_whole"], lin)
                result.rows.append(row)
                logger.write(row)
                step += 1
            _checkpoint(params, flow_config, checkpoint, epoch, cfg, final=epoch == cfg.epochs - 1)
    finally:
        logger.close()
    if cfg.epochs == 0:
        _checkpoint(params, flow_config, checkpoint, 0, cfg, final=True)
    return result


def finetune(train: TripletSet, pre_params: ParamStore, seg_params: ParamStore | None, cfg: TrainConfig,
             flow_config: FlowNetConfig | None = None, seg_config: UNetConfig | None = None,
             val: DropMiddleSet | None = None, checkpoint: str | Path | None = None,
             csv_path: str | Path | None = None) -> TrainResult:
    """Unsupervised adaptation of G on thick-slice triplets with ``combined_loss``.

    G starts as a copy of G_pre (or from a fresh seed-``cfg.seed`` init when
    ``cfg.init_from_pretrained`` is false). G_pre and the segmenter stay frozen.
    """
    if len(train) == 0:
        raise ValueError("finetune: empty dataset")
    flow_config = flow_config or FlowNetConfig()
    if cfg.init_from_pretrained:
        init = init_flownet(flow_config, cfg.seed)
        init.assert_compatible(pre_params)
        params = pre_params.copy()
    else:
        params = init_flownet(flow_config, cfg.seed)
    teacher = pre_params.frozen()
    seg_frozen = seg_params.frozen() if seg_params is not None else None
    state = AdamState.for_params(params)
    rng = np.random.default_rng(cfg.seed + 1)
    result = TrainResult(params, flow_config)
    logger = _CsvLog(csv_path, FINETUNE_COLUMNS)
    step = 0
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(train))
            for start in range(0, len(order), cfg.batch_size):
                b = train.subset(order[start : start + cfg.batch_size])
                terms = _step(params, state, cfg.lr, step,
                              lambda: combined_loss(params, teacher, seg_frozen, b, cfg.loss_weights,
                                                    flow_config, seg_config))
                row = {"step": step, "epoch": epoch, "l_cycle": terms.l_cycle, "l_ps": terms.l_ps,
                       "l_seg": terms.l_seg, "total": float(terms.total.data)}
                if start + cfg.batch_size >= len(order) and val is not None:
                    row["val_psnr_whole"], row["val_psnr_liver"] = validation_psnr(params, val, flow_config)
                    log.info("finetune epoch %d: total %.4f val %.2f dB", epoch, row["total"], row["val_psnr_whole"])
                result.rows.append(row)
                logger.write(row)
                step += 1
            _checkpoint(params, flow_config, checkpoint, epoch, cfg, final=epoch == cfg.epochs - 1)
    finally:
        logger.close()
    if cfg.epochs == 0:
        _checkpoint(params, flow_config, checkpoint, 0, cfg, final=True)
    return result
