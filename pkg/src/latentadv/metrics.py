"""Structural similarity, attack success rate, and the joint score.

SSIM uses a 7x7 Gaussian window (sigma 1.5, valid padding) per channel at
dynamic range 1, averaged over windows then channels; the window is sized
down from the classic 11x11 because the images are only 16x16.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["ssim", "EvalRecord", "asr", "ScoreBreakdown", "competition_score"]

SSIM_WINDOW = 7
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    one_d = np.exp(-(ax**2) / (2.0 * sigma**2))
    win = np.outer(one_d, one_d)
    return win / win.sum()


_WINDOW = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)


def _filter(channel: np.ndarray) -> np.ndarray:
    view = np.lib.stride_tricks.sliding_window_view(channel, (SSIM_WINDOW, SSIM_WINDOW))
    return np.tensordot(view, _WINDOW, axes=([2, 3], [0, 1]))


def ssim(x: np.ndarray, y: np.ndarray) -> float:
    """Mean structural similarity between two (C, H, W) images in [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if x.ndim != 3 or x.shape[1] < SSIM_WINDOW or x.shape[2] < SSIM_WINDOW:
        raise ValueError(f"expected (C, H, W) with H, W >= {SSIM_WINDOW}, got {x.shape}")
    values = []
    for xc, yc in zip(x, y):
        mu_x = _filter(xc)
        mu_y = _filter(yc)
        var_x = _filter(xc * xc) - mu_x * mu_x
        var_y = _filter(yc * yc) - mu_y * mu_y
        cov = _filter(xc * yc) - mu_x * mu_y
        num = (2.0 * mu_x * mu_y + SSIM_C1) * (2.0 * cov + SSIM_C2)
        den = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (var_x + var_y + SSIM_C2)
        values.append(np.mean(num / den))
    return float(np.mean(values))


@dataclass
class EvalRecord:
    image_id: int
    ssim: float
    verdicts: dict[str, int]
    radius: float | None
    success: bool


def asr(records, classifier: str) -> float:
    """Fraction of records a classifier marked as real (label 0)."""
    records = list(records)
    if not records:
        raise ValueError("asr over an empty record set")
    hits = 0
    for rec in records:
        if classifier not in rec.verdicts:
            raise ValueError(f"record {rec.image_id} has no verdict for {classifier!r}")
        hits += rec.verdicts[classifier] == 0
    return hits / len(records)


@dataclass
class ScoreBreakdown:
    per_classifier: dict[str, float] = field(default_factory=dict)
    total: float = 0.0


def competition_score(records, classifiers) -> ScoreBreakdown:
    """Sum over classifiers and images of SSIM * [verdict == real]."""
    breakdown = ScoreBreakdown()
    for rec in records:
        for name in classifiers:
            if name not in rec.verdicts:
                raise ValueError(f"record {rec.image_id} has no verdict for {name!r}")
    for name in classifiers:
        part = 0.0
        for rec in records:
            if rec.verdicts[name] == 0:
                part += rec.ssim
        breakdown.per_classifier[name] = part
        breakdown.total += part
    return breakdown
