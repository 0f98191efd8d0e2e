"""Voxel-flow slice interpolator.

An encoder-decoder maps two slices and a constant plane holding the fractional
target position ``n`` to a per-pixel in-plane displacement (dx, dy) and a blend
mask. The intermediate slice is synthesized by warping both inputs along the
displacement and blending them with the mask.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numerics import (
    ParamStore,
    ShapeError,
    Tensor,
    bilinear_sample,
    concat,
    conv2d,
    deconv2d,
    he_normal,
    no_tape,
    reflect_pad,
    relu,
    reshape,
    sigmoid,
    tanh,
    take,
)

DOWNSAMPLE = 8


@dataclass
class FlowNetConfig:
    encoder_channels: tuple[int, int, int] = (32, 64, 128)
    bottleneck_channels: int = 128
    kernel: int = 3
    skip_connections: bool = True
    max_disp: float = 16.0
    input_channels: int = 3
    zero_init_head: bool = False

    def __post_init__(self):
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        if len(self.encoder_channels) != 3:
            raise ValueError("encoder_channels must list exactly three stages")
        if self.kernel % 2 == 0:
            raise ValueError("kernel must be odd")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "FlowNetConfig":
        return cls(**json.loads(text))


def sidecar_path(checkpoint) -> Path:
    return Path(str(checkpoint) + ".json")


def save_config(config: FlowNetConfig, checkpoint) -> None:
    sidecar_path(checkpoint).write_text(config.to_json() + "\n")


def load_config(checkpoint) -> FlowNetConfig:
    path = sidecar_path(checkpoint)
    return FlowNetConfig.from_json(path.read_text()) if path.exists() else FlowNetConfig()


@dataclass
class FlowField:
    """Displacement (dx, dy) in pixels and blend mask, each shaped (N, 1, H, W)."""

    dx: Tensor
    dy: Tensor
    mask: Tensor
    max_disp: float = field(default=16.0)

    def motion(self) -> Tensor:
        return concat([self.dx, self.dy], axis=1)


def init_flownet(config: FlowNetConfig | None = None, seed: int = 0) -> ParamStore:
    """He-normal conv/deconv weights, zero biases."""
    cfg = config or FlowNetConfig()
    rng = np.random.default_rng(seed)
    ps = ParamStore(seed)
    k = cfg.kernel
    c1, c2, c3 = cfg.encoder_channels
    cb = cfg.bottleneck_channels

    def conv(name, cin, cout):
        ps.add(f"{name}.w", he_normal(rng, (cout, cin, k, k), cin * k * k))
        ps.add(f"{name}.b", np.zeros(cout, np.float32))

    def deconv(name, cin, cout, zero=False):
        shape = (cin, cout, 4, 4)
        # fan-in of a stride-2 transposed conv: each output sees cin * (4/2)**2 taps
        w = np.zeros(shape, np.float32) if zero else he_normal(rng, shape, cin * 4)
        ps.add(f"{name}.w", w)
        ps.add(f"{name}.b", np.zeros(cout, np.float32))

    skip = cfg.skip_connections
    conv("enc1", cfg.input_channels, c1)
    conv("enc2", c1, c2)
    conv("enc3", c2, c3)
    conv("bottleneck", c3, cb)
    deconv("dec1", cb, c2)
    deconv("dec2", c2 * (2 if skip else 1), c1)
    deconv("head", c1 * (2 if skip else 1), 3, zero=cfg.zero_init_head)
    return ps


def _as_batch(s) -> Tensor:
    """Slices given as (H,W), (N,H,W) or (N,1,H,W) -> (N,1,H,W) tensor."""
    t = s if isinstance(s, Tensor) else Tensor(np.asarray(s, dtype=np.float32))
    if t.ndim == 4 and t.shape[1] == 1:
        return t
    if t.ndim == 2:
        return reshape(t, (1, 1) + t.shape)
    if t.ndim == 3:
        return reshape(t, (t.shape[0], 1) + t.shape[1:])
    raise ShapeError(f"expected slice(s) shaped (H,W), (N,H,W) or (N,1,H,W), got {t.shape}")


def _n_plane(n, batch: int, h: int, w: int, dtype) -> np.ndarray:
    n_arr = np.broadcast_to(np.asarray(n, dtype=dtype).reshape(-1), (batch,))
    if np.any(n_arr <= 0) or np.any(n_arr >= 1):
        raise ValueError(f"fractional position n must lie in (0, 1), got {n}")
    return np.broadcast_to(n_arr[:, None, None, None], (batch, 1, h, w)).astype(dtype)


def flow_forward(params: ParamStore, s_a, s_b, n, config: FlowNetConfig | None = None) -> FlowField:
    """Run the encoder-decoder; spatial size must be a multiple of 8."""
    cfg = config or FlowNetConfig()
    a, b = _as_batch(s_a), _as_batch(s_b)
    if a.shape != b.shape:
        raise ShapeError(f"input slices differ in shape: {a.shape} vs {b.shape}")
    batch, _, h, w = a.shape
    if h % DOWNSAMPLE or w % DOWNSAMPLE:
        raise ShapeError(f"slice size {h}x{w} is not divisible by {DOWNSAMPLE}; pad the input (interpolate() does this)")
    x = concat([a, b, Tensor(_n_plane(n, batch, h, w, a.dtype))], axis=1)
    p = params
    pad = cfg.kernel // 2
    e1 = relu(conv2d(x, p["enc1.w"], p["enc1.b"], 2, pad))
    e2 = relu(conv2d(e1, p["enc2.w"], p["enc2.b"], 2, pad))
    e3 = relu(conv2d(e2, p["enc3.w"], p["enc3.b"], 2, pad))
    bn = relu(conv2d(e3, p["bottleneck.w"], p["bottleneck.b"], 1, pad))
    d1 = relu(deconv2d(bn, p["dec1.w"], p["dec1.b"]))
    if cfg.skip_connections:
        d1 = concat([d1, e2], axis=1)
    d2 = relu(deconv2d(d1, p["dec2.w"], p["dec2.b"]))
    if cfg.skip_connections:
        d2 = concat([d2, e1], axis=1)
    out = deconv2d(d2, p["head.w"], p["head.b"])
    dx = tanh(take(out, np.s_[:, 0:1])) * cfg.max_disp
    dy = tanh(take(out, np.s_[:, 1:2])) * cfg.max_disp
    mask = sigmoid(take(out, np.s_[:, 2:3]))
    return FlowField(dx, dy, mask, cfg.max_disp)


def _pixel_grid(h: int, w: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:h, 0:w]
    return xx.astype(dtype), yy.astype(dtype)


def synthesize(s_a, s_b, flow: FlowField, n) -> Tensor:
    """Warp both slices toward position ``n`` along the flow and blend by the mask.

    out = m * S_a(p - n*d) + (1 - m) * S_b(p + (1 - n)*d)
    """
    a, b = _as_batch(s_a), _as_batch(s_b)
    if a.shape != b.shape or a.shape != flow.dx.shape:
        raise ShapeError(f"slice shapes {a.shape}, {b.shape} do not match flow {flow.dx.shape}")
    batch, _, h, w = a.shape
    xx, yy = _pixel_grid(h, w, a.dtype)
    n_arr = np.broadcast_to(np.asarray(n, dtype=a.dtype).reshape(-1), (batch,)).reshape(batch, 1, 1, 1)
    warped_a = bilinear_sample(a, flow.dx * (-n_arr) + xx, flow.dy * (-n_arr) + yy)
    warped_b = bilinear_sample(b, flow.dx * (1 - n_arr) + xx, flow.dy * (1 - n_arr) + yy)
    return flow.mask * warped_a + (1.0 - flow.mask) * warped_b


def interpolate(params: ParamStore, s_a, s_b, n, config: FlowNetConfig | None = None) -> tuple[Tensor, FlowField]:
    """Synthesize the slice at fractional position ``n`` between ``s_a`` and ``s_b``.

    Inputs whose height/width are not multiples of 8 are reflect-padded at the
    bottom/right and the result is cropped back. Output has shape (N, 1, H, W).
    """
    a, b = _as_batch(s_a), _as_batch(s_b)
    h, w = a.shape[-2:]
    ph, pw = (-h) % DOWNSAMPLE, (-w) % DOWNSAMPLE
    if ph or pw:
        a, b = reflect_pad(a, ph, pw), reflect_pad(b, ph, pw)
    flow = flow_forward(params, a, b, n, config)
    out = synthesize(a, b, flow, n)
    if ph or pw:
        crop = np.s_[..., :h, :w]
        out = take(out, crop)
        flow = FlowField(take(flow.dx, crop), take(flow.dy, crop), take(flow.mask, crop), flow.max_disp)
    return out, flow


class FlowInterpolator:
    """Callable wrapper holding parameters and config for inference."""

    def __init__(self, params: ParamStore, config: FlowNetConfig | None = None, batch_size: int = 8):
        self.params = params.frozen()
        self.config = config or FlowNetConfig()
        self.batch_size = batch_size

    def __call__(self, s_a: np.ndarray, s_b: np.ndarray, n: float) -> np.ndarray:
        """Interpolate one pair (H,W) or a stack (N,H,W); returns the same rank."""
        single = np.ndim(s_a) == 2
        a = np.asarray(s_a, np.float32).reshape((-1,) + np.shape(s_a)[-2:])
        b = np.asarray(s_b, np.float32).reshape(a.shape)
        outs = []
        with no_tape():
            for i in range(0, len(a), self.batch_size):
                out, _ = interpolate(self.params, a[i : i + self.batch_size], b[i : i + self.batch_size], n, self.config)
                outs.append(out.data[:, 0])
        res = np.concatenate(outs)
        return res[0] if single else res
