"""Frame and video quality metrics: PSNR, SSIM, and normalized L1.

PSNR is capped at 100 dB so identical frames don't poison per-video
averages with infinities. SSIM uses an 11x11 sliding window with uniform
weights (hand-checkable; the common Gaussian-window variant differs
slightly). Video-level scores are the arithmetic mean of frame scores.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, DomainError

PSNR_CAP_DB = 100.0


@dataclass(frozen=True, eq=False)
class FramePair:
    """A predicted frame, its reference, and their shared dynamic range."""

    predicted: np.ndarray
    reference: np.ndarray
    max_value: float = 255.0

    def __post_init__(self) -> None:
        pred = np.asarray(self.predicted, dtype=np.float64)
        ref = np.asarray(self.reference, dtype=np.float64)
        if pred.shape != ref.shape:
            raise DimensionError(f"frame shapes differ: {pred.shape} vs {ref.shape}")
        if pred.ndim != 2 or pred.size == 0:
            raise DimensionError(f"frames must be non-empty 2-D grids, got {pred.shape}")
        if self.max_value <= 0:
            raise DomainError("max_value must be positive")
        for name, arr in (("predicted", pred), ("reference", ref)):
            if arr.min() < 0 or arr.max() > self.max_value:
                raise DomainError(f"{name} frame leaves the range [0, {self.max_value}]")
        object.__setattr__(self, "predicted", pred)
        object.__setattr__(self, "reference", ref)


def psnr(pair: FramePair) -> float:
    """Peak signal-to-noise ratio in decibels, capped at 100."""
    diff = pair.predicted - pair.reference
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return PSNR_CAP_DB
    value = 10.0 * np.log10(pair.max_value**2 / mse)
    return float(min(value, PSNR_CAP_DB))


def ssim(pair: FramePair, window: int = 11, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean local structural similarity over uniform sliding windows."""
    if window < 1 or window % 2 == 0:
        raise DomainError("window must be a positive odd integer")
    h, w = pair.predicted.shape
    if h < window or w < window:
        raise DimensionError(f"frame {h}x{w} smaller than the {window}x{window} window")
    c1 = (k1 * pair.max_value) ** 2
    c2 = (k2 * pair.max_value) ** 2
    px = sliding_window_view(pair.predicted, (window, window))
    rx = sliding_window_view(pair.reference, (window, window))
    mu_p = px.mean(axis=(-1, -2))
    mu_r = rx.mean(axis=(-1, -2))
    var_p = (px**2).mean(axis=(-1, -2)) - mu_p**2
    var_r = (rx**2).mean(axis=(-1, -2)) - mu_r**2
    cov = (px * rx).mean(axis=(-1, -2)) - mu_p * mu_r
    numer = (2 * mu_p * mu_r + c1) * (2 * cov + c2)
    denom = (mu_p**2 + mu_r**2 + c1) * (var_p + var_r + c2)
    return float(np.mean(numer / denom))


def l1(pair: FramePair) -> float:
    """Mean absolute difference, normalized by pixel count and range."""
    total = float(np.abs(pair.predicted - pair.reference).sum())
    return total / (pair.predicted.size * pair.max_value)


def video_metric(
    frames: Sequence[FramePair], metric: Callable[[FramePair], float]
) -> float:
    """Average a frame metric over a whole clip."""
    if not frames:
        raise DomainError("need at least one frame pair")
    return float(np.mean([metric(pair) for pair in frames]))
