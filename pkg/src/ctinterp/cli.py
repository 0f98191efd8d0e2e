"""Command-line pipeline: phantoms, training, upsampling, evaluation, benchmark.

Exit codes: 0 success, 2 input error, 3 training divergence, 4 shape mismatch.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as kv
from .bench import bench_config_from_kv, run_bench
from .flownet import FlowInterpolator, load_config as load_flow_config
from .metrics import ROIS, EmptyROIError, MetricReport, UndefinedASDError, asd, psnr, roi_mask, seg_overlap, ssim
from .nifti import NiftiFormatError, read_labels, read_nifti, write_nifti
from .numerics import CheckpointError, ShapeError, load_checkpoint, save_checkpoint
from .phantom import PhantomSpecError, degrade_thickness, generate, spec_from_kv
from .segmenter import UNetConfig, save_config as save_unet_config, load_config as load_unet_config, train_segmenter
from .training import (
    TrainingDiverged,
    configs_from_kv,
    drop_middle_samples,
    finetune,
    load_train_config,
    pretrain,
    stack_triplets,
)
from .upsample import upsample_volume
from .volume import SegVolume, Volume, VolumeError, window_normalize

EXIT_OK, EXIT_INPUT, EXIT_DIVERGED, EXIT_SHAPE = 0, 2, 3, 4

log = logging.getLogger("ctinterp")


class InputError(Exception):
    pass


class ShapeMismatch(Exception):
    pass


def _existing(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise InputError(f"{what} not found: {p}")
    return p


def _seed(value: str) -> int:
    v = int(value)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {value}")
    return v


def load_dataset(data_dir, need_labels: bool = True) -> tuple[list[Volume], list[SegVolume] | None]:
    """Normalized volumes (and labels) from ``*_image.nii.gz`` / ``*_label.nii.gz`` pairs."""
    d = _existing(data_dir, "data directory")
    images = sorted(d.glob("*_image.nii*"))
    if not images:
        raise InputError(f"no *_image.nii[.gz] files in {d}")
    vols, segs = [], []
    for img in images:
        lab = img.with_name(img.name.replace("_image", "_label"))
        if lab.exists():
            vol, seg = read_nifti(img, lab)
            segs.append(seg)
        elif need_labels:
            raise InputError(f"missing label file {lab}")
        else:
            vol = read_nifti(img)
        vols.append(window_normalize(vol))
    return vols, (segs if len(segs) == len(vols) else None)


# -------------------------------------------------------------- subcommands


def cmd_phantom(args) -> int:
    values = kv.read_kv(_existing(args.config, "phantom spec file")) if args.config else {}
    if args.seed is not None:
        values["seed"] = str(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(args.count):
        spec = spec_from_kv(values, seed_offset=i)
        vol, seg = generate(spec)
        if args.factor > 1:
            vol, seg = degrade_thickness(vol, seg, args.factor)
        image, label = f"phantom_{i:03d}_image.nii.gz", f"phantom_{i:03d}_label.nii.gz"
        write_nifti(vol, out / image)
        write_nifti(seg, out / label)
        rows.append((i, spec.seed, image, label, args.factor, vol.spacing[0]))
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("index", "seed", "image", "label", "factor", "spacing_z"))
        w.writerows(rows)
    log.info("wrote %d phantom pairs to %s", args.count, out)
    return EXIT_OK


def cmd_segmenter(args) -> int:
    values = kv.read_kv(_existing(args.config, "config file")) if args.config else {}
    known = {"epochs", "lr", "batch_size", "seed", "depth", "base_channels"}
    if set(values) - known:
        raise kv.ConfigError(f"unknown segmenter config keys: {sorted(set(values) - known)}")
    ucfg = UNetConfig(depth=int(values.get("depth", 3)), base_channels=int(values.get("base_channels", 16)))
    seed = args.seed if args.seed is not None else int(values.get("seed", 0))
    vols, segs = load_dataset(args.data)
    dataset = [(v.data[z], s.labels[z]) for v, s in zip(vols, segs) for z in range(v.shape[0])]
    csv_path = Path(args.csv or str(args.out) + ".csv")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "loss"))
        run = train_segmenter(dataset, ucfg, epochs=int(values.get("epochs", 10)), seed=seed,
                              lr=float(values.get("lr", 1e-3)), batch_size=int(values.get("batch_size", 8)),
                              log=lambda e, loss: (w.writerow((e, repr(float(loss)))), fh.flush()))
    if not all(np.isfinite(run.epoch_losses)):
        raise TrainingDiverged(len(run.epoch_losses), "segmenter loss is not finite")
    save_checkpoint(run.params, args.out)
    save_unet_config(ucfg, args.out)
    return EXIT_OK


def _train_config(args):
    cfg, fcfg = load_train_config(_existing(args.config, "config file")) if args.config else configs_from_kv({})
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg, fcfg


def cmd_pretrain(args) -> int:
    cfg, fcfg = _train_config(args)
    vols, segs = load_dataset(args.data, need_labels=False)
    train = drop_middle_samples(vols, segs, cfg.pretrain_factors)
    val = None
    if args.val:
        vv, vs = load_dataset(args.val, need_labels=False)
        val = drop_middle_samples(vv, vs, (2,))
    pretrain(train, cfg, fcfg, val, args.out, args.csv or str(args.out) + ".csv")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg, _ = _train_config(args)
    pre_path = _existing(args.pretrained, "pretrained checkpoint")
    pre = load_checkpoint(pre_path)
    fcfg = load_flow_config(pre_path)
    seg_params = seg_cfg = None
    if cfg.loss_weights.lambda_seg > 0:
        if not args.segmenter:
            raise InputError("lambda_seg > 0 needs --segmenter")
        seg_path = _existing(args.segmenter, "segmenter checkpoint")
        seg_params, seg_cfg = load_checkpoint(seg_path), load_unet_config(seg_path)
    vols, segs = load_dataset(args.data, need_labels=cfg.loss_weights.lambda_seg > 0)
    train = stack_triplets(vols, segs)
    val = None
    if args.val:
        vv, vs = load_dataset(args.val, need_labels=False)
        val = drop_middle_samples(vv, vs, (2,))
    finetune(train, pre, seg_params, cfg, fcfg, seg_cfg, val, args.out, args.csv or str(args.out) + ".csv")
    return EXIT_OK


def cmd_upsample(args) -> int:
    vol = read_nifti(_existing(args.input, "input volume"))
    interp = None
    if args.method == "flow":
        if not args.checkpoint:
            raise InputError("method flow needs --checkpoint")
        ckpt = _existing(args.checkpoint, "checkpoint")
        interp = FlowInterpolator(load_checkpoint(ckpt), load_flow_config(ckpt))
    out = upsample_volume(vol, args.factor, args.method, interp)
    write_nifti(out, args.out)
    return EXIT_OK


def _is_label_map(arr: np.ndarray) -> bool:
    return bool(np.all(np.isin(arr, (0, 1, 2))))


def cmd_eval(args) -> int:
    pred = read_nifti(_existing(args.pred, "prediction"))
    gt = read_nifti(_existing(args.gt, "ground truth"))
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
    kind = args.kind
    if kind == "auto":
        kind = "labels" if _is_label_map(pred.data) and _is_label_map(gt.data) else "image"
    report = MetricReport()
    roi = args.roi
    if kind == "labels":
        p, g = pred.data.astype(np.uint8), gt.data.astype(np.uint8)
        classes = {"whole": (1, 2), "liver": (1, 2), "lesion": 2}[roi]
        d, r, pr = seg_overlap(p, g, classes)
        item = Path(args.pred).name
        for name, v in (("dice", d), ("recall", r), ("precision", pr)):
            report.add(item, roi, name, v)
        try:
            a = asd(np.isin(p, classes), np.isin(g, classes), gt.spacing)
        except UndefinedASDError:
            a = float("nan")
        report.add(item, roi, "asd", a)
    else:
        labels = None
        if roi != "whole":
            if not args.labels:
                raise InputError(f"--roi {roi} needs --labels with the ground-truth label map")
            labels = read_labels(_existing(args.labels, "label file")).labels
            if labels.shape != gt.shape:
                raise ShapeMismatch(f"label shape {labels.shape} does not match ground truth {gt.shape}")
        if gt.data.min() < 0 or gt.data.max() > 1:
            pred, gt = window_normalize(pred), window_normalize(gt)
        for z in range(gt.shape[0]):
            mask = None if labels is None else roi_mask(labels[z], roi)
            try:
                scores = psnr(pred.data[z], gt.data[z], mask), ssim(pred.data[z], gt.data[z], mask)
            except EmptyROIError:
                continue
            report.add(f"z{z:03d}", roi, "psnr", scores[0])
            report.add(f"z{z:03d}", roi, "ssim", scores[1])
    report.write(args.out)
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg_path = _existing(args.config, "bench config")
    cfg = bench_config_from_kv(kv.read_kv(cfg_path), cfg_path.parent)
    if args.seed is not None:
        cfg.test_seed = args.seed
    result = run_bench(cfg)
    result.write(args.out)
    for arm, reason in result.skipped:
        print(f"warning: skipped {arm}: {reason}", file=sys.stderr)
    return EXIT_OK


# -------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctinterp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate phantom NIfTI pairs and a manifest")
    p.add_argument("--config", help="phantom spec (key = value)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--seed", type=_seed)
    p.add_argument("--factor", type=int, choices=(1, 2, 3), default=1, help="keep every k-th slice")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("segmenter", help="train the slice-wise UNet")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--csv")
    p.add_argument("--seed", type=_seed)
    p.set_defaults(func=cmd_segmenter)

    p = sub.add_parser("pretrain", help="supervised drop-middle training on thin volumes")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--val")
    p.add_argument("--out", required=True)
    p.add_argument("--csv")
    p.add_argument("--seed", type=_seed)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="unsupervised fine-tuning on thick volumes")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--pretrained", required=True)
    p.add_argument("--segmenter")
    p.add_argument("--val")
    p.add_argument("--out", required=True)
    p.add_argument("--csv")
    p.add_argument("--seed", type=_seed)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("upsample", help="insert slices between the originals")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--method", choices=("nn", "linear", "flow"), default="linear")
    p.add_argument("--factor", type=int, choices=(2, 3), default=2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_upsample)

    p = sub.add_parser("eval", help="metric report for a predicted volume or label map")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--labels", help="ground-truth labels defining the ROI for image metrics")
    p.add_argument("--roi", choices=ROIS, default="whole")
    p.add_argument("--kind", choices=("auto", "image", "labels"), default="auto")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="full comparison matrix and thickness curve")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=_seed, help="override the held-out phantom seed")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"ctinterp: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ShapeMismatch, ShapeError) as exc:
        print(f"ctinterp: shape mismatch: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except (InputError, kv.ConfigError, NiftiFormatError, CheckpointError, PhantomSpecError, VolumeError,
            FileNotFoundError, IsADirectoryError, PermissionError, ValueError) as exc:
        print(f"ctinterp: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
