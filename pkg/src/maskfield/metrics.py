"""Image-quality metrics shared by training smoke checks and evaluation."""

from __future__ import annotations

import numpy as np
import torch


def psnr(a: torch.Tensor | np.ndarray, b: torch.Tensor | np.ndarray,
         peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, peak]."""
    a_t = torch.as_tensor(a, dtype=torch.float64)
    b_t = torch.as_tensor(b, dtype=torch.float64)
    mse = ((a_t - b_t) ** 2).mean().item()
    if mse == 0:
        return float("inf")
    return 10.0 * float(np.log10(peak * peak / mse))


def foreground_iou(pred_fg: np.ndarray, true_fg: np.ndarray) -> float:
    """Intersection-over-union of two boolean silhouettes."""
    pred = np.asarray(pred_fg, dtype=bool)
    true = np.asarray(true_fg, dtype=bool)
    union = np.logical_or(pred, true).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, true).sum() / union)
