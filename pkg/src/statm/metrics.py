"""Segmentation and video-quality metrics.

ari/miou compare integer label volumes (any shape, flattened); the
foreground variants restrict to pixels whose TRUTH label is nonzero,
keeping predicted labels as they are. miou matches predicted to truth
segments one-to-one by maximizing total IoU and averages over truth
segments (unmatched truth scores 0). psnr/ssim expect values in [0, 1].

Degenerate cases: ari of two single-cluster partitions is 1; an empty
foreground yields NaN, the "undefined" sentinel callers must exclude
from averages.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.optimize import linear_sum_assignment

from statm.errors import ConfigurationError

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
SSIM_WINDOW = 8


def _check_pair(predicted, truth):
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    if predicted.shape != truth.shape:
        raise ConfigurationError(
            f"mask pair shapes differ: {predicted.shape} vs {truth.shape}")
    return predicted.reshape(-1), truth.reshape(-1)


def _contingency(a: np.ndarray, b: np.ndarray):
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    na, nb = ai.max() + 1, bi.max() + 1
    table = np.bincount(ai * nb + bi, minlength=na * nb).reshape(na, nb)
    return table


def ari(predicted, truth, foreground_only: bool = False) -> float:
    """Adjusted Rand index over the flattened volumes; NaN if undefined."""
    p, t = _check_pair(predicted, truth)
    if foreground_only:
        sel = t != 0
        p, t = p[sel], t[sel]
    if p.size < 2:
        return float("nan")
    table = _contingency(p, t).astype(np.float64)
    comb = lambda x: x * (x - 1) / 2.0
    sum_cells = comb(table).sum()
    sum_rows = comb(table.sum(axis=1)).sum()
    sum_cols = comb(table.sum(axis=0)).sum()
    total = comb(float(p.size))
    expected = sum_rows * sum_cols / total
    max_term = 0.5 * (sum_rows + sum_cols)
    if max_term == expected:
        return 1.0
    return float((sum_cells - expected) / (max_term - expected))


def miou(predicted, truth, foreground_only: bool = False) -> float:
    """Mean IoU over truth segments after optimal one-to-one matching."""
    p, t = _check_pair(predicted, truth)
    if foreground_only:
        sel = t != 0
        p, t = p[sel], t[sel]
    if p.size == 0:
        return float("nan")
    truth_labels, ti = np.unique(t, return_inverse=True)
    pred_labels, pi = np.unique(p, return_inverse=True)
    inter = np.bincount(pi * truth_labels.size + ti,
                        minlength=pred_labels.size * truth_labels.size)
    inter = inter.reshape(pred_labels.size, truth_labels.size).astype(np.float64)
    pred_area = inter.sum(axis=1, keepdims=True)
    truth_area = inter.sum(axis=0, keepdims=True)
    union = pred_area + truth_area - inter
    iou = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
    rows, cols = linear_sum_assignment(-iou)
    scores = np.zeros(truth_labels.size)
    scores[cols] = iou[rows, cols]
    return float(scores.mean())


def psnr(a, b) -> float:
    """10*log10(1/MSE) in dB on unit range; +inf for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigurationError(f"psnr: shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gray(frames: np.ndarray) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[-1] == 3:
        frames = frames.mean(axis=-1)
    if frames.ndim == 2:
        frames = frames[None]
    return frames


def ssim(a, b) -> float:
    """Mean local SSIM over non-overlapping 8x8 windows of all frames."""
    ga, gb = _gray(a), _gray(b)
    if ga.shape != gb.shape:
        raise ConfigurationError(f"ssim: shapes differ: {ga.shape} vs {gb.shape}")
    t, h, w = ga.shape
    wh, ww = h // SSIM_WINDOW, w // SSIM_WINDOW
    if wh == 0 or ww == 0:
        raise ConfigurationError(f"ssim: frames {h}x{w} smaller than the window")
    ga = ga[:, :wh * SSIM_WINDOW, :ww * SSIM_WINDOW]
    gb = gb[:, :wh * SSIM_WINDOW, :ww * SSIM_WINDOW]
    wa = ga.reshape(t, wh, SSIM_WINDOW, ww, SSIM_WINDOW).transpose(0, 1, 3, 2, 4)
    wb = gb.reshape(t, wh, SSIM_WINDOW, ww, SSIM_WINDOW).transpose(0, 1, 3, 2, 4)
    wa = wa.reshape(t, wh * ww, -1)
    wb = wb.reshape(t, wh * ww, -1)
    mu_a = wa.mean(axis=-1)
    mu_b = wb.mean(axis=-1)
    var_a = wa.var(axis=-1)
    var_b = wb.var(axis=-1)
    cov = (wa * wb).mean(axis=-1) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float((num / den).mean())
