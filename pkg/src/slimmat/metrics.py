"""Matting errors over the trimap unknown region.

SAD, Grad and Conn are returned at report scale (raw sums divided by 1000);
MSE is a plain mean.
"""
from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

from .data import unknown_mask

METRIC_COLUMNS = ("MSE", "SAD", "Grad", "Conn", "#Param", "FLOPs")


class EmptyRegionError(ValueError):
    pass


def _region(pred, gt, trimap):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape != np.shape(trimap):
        raise ValueError(f"shape mismatch: {pred.shape}, {gt.shape}, {np.shape(trimap)}")
    mask = unknown_mask(np.asarray(trimap))
    if not mask.any():
        raise EmptyRegionError("trimap has no unknown pixels")
    return pred, gt, mask


def mse_unknown(pred, gt, trimap) -> float:
    pred, gt, mask = _region(pred, gt, trimap)
    return float(np.mean((pred - gt)[mask] ** 2))


def sad_unknown(pred, gt, trimap) -> float:
    pred, gt, mask = _region(pred, gt, trimap)
    return float(np.abs(pred - gt)[mask].sum() / 1000.0)


def gaussian_derivative_kernel(sigma: float = 1.4) -> np.ndarray:
    """x-derivative-of-Gaussian kernel, truncated at 3 sigma, unit L2 norm."""
    half = int(math.ceil(3 * sigma))
    ax = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-ax ** 2 / (2 * sigma ** 2)) / (sigma * math.sqrt(2 * math.pi))
    dg = -ax * g / sigma ** 2
    k = np.outer(g, dg)  # rows vary in y, columns in x
    return k / np.sqrt(np.sum(k * k))


def _gradient_magnitude(img, kernel):
    gx = ndimage.convolve(img, kernel, mode="reflect")
    gy = ndimage.convolve(img, kernel.T, mode="reflect")
    return np.sqrt(gx * gx + gy * gy)


def grad_error(pred, gt, trimap, sigma: float = 1.4) -> float:
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    pred, gt, mask = _region(pred, gt, trimap)
    # known pixels take the ground-truth value so only the unknown band is scored
    pred = np.where(mask, pred, gt)
    k = gaussian_derivative_kernel(sigma)
    diff = _gradient_magnitude(pred, k) - _gradient_magnitude(gt, k)
    return float(np.sum(diff[mask] ** 2) / 1000.0)


def _largest_component(binary: np.ndarray) -> np.ndarray:
    labels, n = ndimage.label(binary)  # 4-connectivity
    if n == 0:
        return np.zeros_like(binary, dtype=bool)
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (int(np.argmax(sizes)) + 1)


def conn_error(pred, gt, trimap, step: float = 0.1) -> float:
    """Connectivity error.

    Simplifications held fixed across this package: thresholds run over
    step..0.9, a pixel's level is the last threshold at which it was still in
    the largest common component, and differences below 0.15 are ignored.
    Components are built on the full image, not only the unknown region.
    """
    n_steps = round(0.9 / step)
    if step <= 0 or abs(n_steps * step - 0.9) > 1e-9:
        raise ValueError(f"step {step} does not divide 0.9")
    pred, gt, mask = _region(pred, gt, trimap)
    thresholds = [step * i for i in range(1, n_steps + 1)]
    level = np.full(pred.shape, -1.0)
    for i, theta in enumerate(thresholds):
        omega = _largest_component((pred >= theta) & (gt >= theta))
        if i == 0 and not omega.any():
            # no source region at all: fall back to SAD
            return float(np.abs(pred - gt)[mask].sum() / 1000.0)
        fresh = (level == -1) & ~omega
        level[fresh] = thresholds[i - 1] if i else 0.0
    level[level == -1] = 1.0
    dp, dg = pred - level, gt - level
    phi_p = 1.0 - dp * (dp >= 0.15)
    phi_g = 1.0 - dg * (dg >= 0.15)
    return float(np.abs(phi_p - phi_g)[mask].sum() / 1000.0)


def evaluate_alpha(pred, gt, trimap) -> dict[str, float]:
    return {"MSE": mse_unknown(pred, gt, trimap), "SAD": sad_unknown(pred, gt, trimap),
            "Grad": grad_error(pred, gt, trimap), "Conn": conn_error(pred, gt, trimap)}


def aggregate(rows: list[dict[str, float]]) -> dict[str, float]:
    """Mean of each metric in input order (deterministic reduction)."""
    keys = ("MSE", "SAD", "Grad", "Conn")
    return {k: float(sum(r[k] for r in rows) / len(rows)) for k in keys}
