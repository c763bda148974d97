"""PSNR, SSIM and embedding-capacity figures, computed on 8-bit images."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data_pipeline import ImageSample

MAX_VAL = 255.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

REPORT_HEADER = ["pair_id", "enc_psnr", "dec_psnr", "enc_ssim", "dec_ssim", "bpp", "payload_pct"]


@dataclass
class QualityReport:
    psnr_db: float
    ssim: float
    bpp: float
    payload_percent: float


def _pixels(x) -> np.ndarray:
    return x.pixels if isinstance(x, ImageSample) else np.asarray(x)


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")


def psnr(a, b) -> float:
    """10*log10(255^2 / MSE); +inf for identical images."""
    a, b = _pixels(a), _pixels(b)
    _same_shape(a, b)
    mse = np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(MAX_VAL ** 2 / mse))


def psnr_batch(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-image PSNR over the leading axis of two uint8 batches."""
    _same_shape(a, b)
    diff = a.astype(np.float64) - b.astype(np.float64)
    mse = np.mean(diff.reshape(len(a), -1) ** 2, axis=1)
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(MAX_VAL ** 2 / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(x: np.ndarray, window: np.ndarray) -> np.ndarray:
    return np.tensordot(sliding_window_view(x, window.shape), window, axes=([2, 3], [0, 1]))


def ssim_channel(a: np.ndarray, b: np.ndarray, window: np.ndarray | None = None) -> float:
    if window is None:
        window = gaussian_window()
    c1 = (SSIM_K1 * MAX_VAL) ** 2
    c2 = (SSIM_K2 * MAX_VAL) ** 2
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    mu_a = _filter_valid(a, window)
    mu_b = _filter_valid(b, window)
    var_a = _filter_valid(a * a, window) - mu_a * mu_a
    var_b = _filter_valid(b * b, window) - mu_b * mu_b
    cov = _filter_valid(a * b, window) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(a, b) -> float:
    """Mean single-scale SSIM over valid window positions, averaged over channels."""
    a, b = _pixels(a), _pixels(b)
    _same_shape(a, b)
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(
            f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape[0]}x{a.shape[1]}"
        )
    window = gaussian_window()
    return float(np.mean([ssim_channel(a[:, :, c], b[:, :, c], window) for c in range(a.shape[2])]))


def capacity(cover_dims: tuple[int, int], payload_dims: tuple[int, int]) -> tuple[float, float]:
    """(bits per cover pixel, payload bits as a percentage of 24-bit cover bits)."""
    ch, cw = cover_dims[:2]
    ph, pw = payload_dims[:2]
    if min(ch, cw, ph, pw) < 1:
        raise ValueError("dimensions must be positive")
    payload_bits = ph * pw * 8
    return payload_bits / (ch * cw), 100.0 * payload_bits / (ch * cw * 24)


def format_value(x: float) -> str:
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return f"{x:.6f}"


def quality_report(cover, hybrid, payload_dims=None) -> QualityReport:
    c = _pixels(cover)
    bpp, pct = capacity(c.shape[:2], payload_dims or c.shape[:2])
    return QualityReport(psnr(cover, hybrid), ssim(cover, hybrid), bpp, pct)
