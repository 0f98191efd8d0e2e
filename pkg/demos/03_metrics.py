"""
Scoring images and segmentations
================================

The metrics used for every comparison: PSNR and SSIM for intensities,
Dice, recall, precision and average symmetric surface distance for masks,
and the CSV report that collects them.
"""

import numpy as np

from ctinterp import MetricReport, asd, psnr, seg_overlap, ssim

rng = np.random.default_rng(0)
gt = rng.random((64, 64))
noisy = np.clip(gt + rng.normal(0, 0.05, gt.shape), 0, 1)

print("PSNR identical", psnr(gt, gt))  # capped at 99 dB
print("PSNR noisy    ", psnr(noisy, gt))
print("SSIM noisy    ", ssim(noisy, gt))

# a 10 x 10 square against the same square shifted by two columns
a = np.zeros((1, 32, 32), bool)
b = np.zeros((1, 32, 32), bool)
a[0, 10:20, 10:20] = True
b[0, 10:20, 12:22] = True
dice, recall, precision = seg_overlap(a.astype(np.uint8), b.astype(np.uint8), 1)
print(f"Dice {dice:.3f} recall {recall:.3f} precision {precision:.3f}")
print("harmonic mean of recall and precision", 2 * recall * precision / (recall + precision))
print("ASD (mm, 0.8 mm pixels)", asd(a, b, (2.5, 0.8, 0.8)))

report = MetricReport()
for z in range(3):
    report.add(f"z{z:03d}", "whole", "psnr", psnr(np.clip(gt + rng.normal(0, 0.02 * (z + 1), gt.shape), 0, 1), gt))
print(report.to_csv())
