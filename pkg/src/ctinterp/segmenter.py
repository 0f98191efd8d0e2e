"""Small 2D UNet for liver/lesion segmentation.

Used frozen as the attention term during interpolator fine-tuning, and slice-wise
as the downstream segmenter when comparing upsampling methods.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .numerics import (
    AdamState,
    ParamStore,
    ShapeError,
    Tape,
    Tensor,
    adam_step,
    concat,
    conv2d,
    cross_entropy,
    deconv2d,
    he_normal,
    no_tape,
    one_hot,
    reflect_pad,
    relu,
    reshape,
    soft_dice_loss,
    softmax,
    take,
)

NUM_CLASSES = 3


@dataclass
class UNetConfig:
    depth: int = 3
    base_channels: int = 16
    output_channels: int = NUM_CLASSES
    zero_init_head: bool = False

    def channels(self) -> list[int]:
        return [self.base_channels * 2**i for i in range(self.depth + 1)]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "UNetConfig":
        return cls(**json.loads(text))


def save_config(config: UNetConfig, checkpoint) -> None:
    Path(str(checkpoint) + ".json").write_text(config.to_json() + "\n")


def load_config(checkpoint) -> UNetConfig:
    path = Path(str(checkpoint) + ".json")
    return UNetConfig.from_json(path.read_text()) if path.exists() else UNetConfig()


def init_unet(config: UNetConfig | None = None, seed: int = 0) -> ParamStore:
    cfg = config or UNetConfig()
    rng = np.random.default_rng(seed)
    ps = ParamStore(seed)
    ch = cfg.channels()

    def conv(name, cin, cout, k=3, zero=False):
        w = np.zeros((cout, cin, k, k), np.float32) if zero else he_normal(rng, (cout, cin, k, k), cin * k * k)
        ps.add(f"{name}.w", w)
        ps.add(f"{name}.b", np.zeros(cout, np.float32))

    conv("in.0", 1, ch[0])
    conv("in.1", ch[0], ch[0])
    for i in range(1, cfg.depth + 1):
        conv(f"down{i}.0", ch[i - 1], ch[i])
        conv(f"down{i}.1", ch[i], ch[i])
    for i in range(cfg.depth, 0, -1):
        ps.add(f"up{i}.w", he_normal(rng, (ch[i], ch[i - 1], 4, 4), ch[i] * 4))
        ps.add(f"up{i}.b", np.zeros(ch[i - 1], np.float32))
        conv(f"up{i}.conv", 2 * ch[i - 1], ch[i - 1])
    conv("head", ch[0], cfg.output_channels, k=1, zero=cfg.zero_init_head)
    return ps


def _conv_relu(x, p, name, stride=1):
    return relu(conv2d(x, p[f"{name}.w"], p[f"{name}.b"], stride, 1))


def segment_logits(params: ParamStore, slices, config: UNetConfig | None = None) -> Tensor:
    """Class logits (N, K, H, W) for slices shaped (N, 1, H, W) or (N, H, W)."""
    cfg = config or UNetConfig()
    x = slices if isinstance(slices, Tensor) else Tensor(np.asarray(slices, np.float32))
    if x.ndim == 3:
        x = reshape(x, (x.shape[0], 1) + x.shape[1:])
    if x.ndim != 4 or x.shape[1] != 1:
        raise ShapeError(f"segmenter expects (N,1,H,W) slices, got {x.shape}")
    h, w = x.shape[-2:]
    mult = 2**cfg.depth
    ph, pw = (-h) % mult, (-w) % mult
    if ph or pw:
        if ph >= h or pw >= w:
            raise ShapeError(f"slice {h}x{w} too small to pad to a multiple of {mult}")
        x = reflect_pad(x, ph, pw)
    p = params
    skips = []
    y = _conv_relu(_conv_relu(x, p, "in.0"), p, "in.1")
    for i in range(1, cfg.depth + 1):
        skips.append(y)
        y = _conv_relu(_conv_relu(y, p, f"down{i}.0", stride=2), p, f"down{i}.1")
    for i in range(cfg.depth, 0, -1):
        y = relu(deconv2d(y, p[f"up{i}.w"], p[f"up{i}.b"]))
        y = _conv_relu(concat([y, skips[i - 1]], axis=1), p, f"up{i}.conv")
    logits = conv2d(y, p["head.w"], p["head.b"], 1, 0)
    if ph or pw:
        logits = take(logits, np.s_[..., :h, :w])
    return logits


def segment(params: ParamStore, slices, config: UNetConfig | None = None) -> Tensor:
    """Per-pixel class probabilities (N, 3, H, W): background, liver, lesion."""
    return softmax(segment_logits(params, slices, config))


def dice_ce_loss(logits: Tensor, labels: np.ndarray) -> tuple[Tensor, Tensor, Tensor]:
    """Equal-weight soft Dice (foreground channels) + cross-entropy."""
    probs = softmax(logits)
    fg = take(probs, np.s_[:, 1:])
    target = Tensor(one_hot(labels, NUM_CLASSES, dtype=logits.dtype)[:, 1:])
    dice = soft_dice_loss(fg, target)
    ce = cross_entropy(logits, labels)
    return dice + ce, dice, ce


@dataclass
class SegmenterRun:
    params: ParamStore
    config: UNetConfig
    epoch_losses: list[float] = field(default_factory=list)


def train_segmenter(dataset, config: UNetConfig | None = None, epochs: int = 10, seed: int = 0,
                    lr: float = 1e-3, batch_size: int = 8, log=None) -> SegmenterRun:
    """Fit the UNet on (slice, label) pairs with Adam; deterministic given ``seed``.

    ``dataset`` is a sequence of (H,W) float slices and (H,W) integer label maps.
    """
    if len(dataset) == 0:
        raise ValueError("train_segmenter: dataset is empty")
    cfg = config or UNetConfig()
    images = np.stack([np.asarray(s, np.float32) for s, _ in dataset])[:, None]
    labels = np.stack([np.asarray(l, np.int64) for _, l in dataset])
    params = init_unet(cfg, seed)
    state = AdamState.for_params(params)
    rng = np.random.default_rng(seed + 1)
    run = SegmenterRun(params, cfg)
    for epoch in range(epochs):
        order = rng.permutation(len(images))
        total, count = 0.0, 0
        for i in range(0, len(order), batch_size):
            idx = order[i : i + batch_size]
            params.zero_grad()
            with Tape() as tape:
                loss, _, _ = dice_ce_loss(segment_logits(params, images[idx], cfg), labels[idx])
            tape.backward(loss)
            adam_step(params, state, lr=lr)
            total += float(loss.data) * len(idx)
            count += len(idx)
        run.epoch_losses.append(total / count)
        if log is not None:
            log(epoch, run.epoch_losses[-1])
    return run


def largest_component_cleanup(labels: np.ndarray) -> np.ndarray:
    """Keep only the largest 3D face-connected foreground component."""
    fg = labels > 0
    comp, count = ndimage.label(fg)
    if count <= 1:
        return labels
    sizes = np.bincount(comp.ravel())
    sizes[0] = 0
    keep = comp == int(np.argmax(sizes))
    return np.where(keep, labels, 0).astype(labels.dtype)


def predict_volume(params: ParamStore, volume: np.ndarray, config: UNetConfig | None = None,
                   batch_size: int = 8, cleanup: bool = True) -> np.ndarray:
    """Slice-wise argmax labels (Z, Y, X) for a normalized volume."""
    frozen = params.frozen()
    out = np.empty(volume.shape, np.uint8)
    with no_tape():
        for z in range(0, volume.shape[0], batch_size):
            logits = segment_logits(frozen, volume[z : z + batch_size], config)
            out[z : z + batch_size] = np.argmax(logits.data, axis=1)
    return largest_component_cleanup(out) if cleanup else out
