"""Image quality metrics: LAB-space RMSE by region, PSNR, and SSIM.

LAB RMSE is reported separately over shadow pixels, non-shadow pixels,
and the whole frame; PSNR and SSIM always cover the whole frame. Empty
regions report None instead of a number; identical images report the
+infinity PSNR sentinel.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .colorshift import srgb_to_lab
from .errors import ContractViolation

_SSIM_WINDOW = 8
_SSIM_C1 = 0.01**2
_SSIM_C2 = 0.03**2


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1 / MSE) for [0, 1] images; identical inputs give +inf."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolation(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean windowed SSIM over uniform 8x8 windows with stride 8.

    Inputs are converted to grayscale by channel mean; constants are the
    usual (0.01)^2 and (0.03)^2 on the [0, 1] range. Windows statistics
    use population variance.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolation(f"shape mismatch {a.shape} vs {b.shape}")
    ga = a.mean(axis=0) if a.ndim == 3 else a
    gb = b.mean(axis=0) if b.ndim == 3 else b
    h, w = ga.shape
    k = _SSIM_WINDOW
    if h < k or w < k:
        raise ContractViolation(f"image {h}x{w} smaller than one {k}x{k} window")
    vals = []
    for y in range(0, h - k + 1, k):
        for x in range(0, w - k + 1, k):
            wa = ga[y : y + k, x : x + k]
            wb = gb[y : y + k, x : x + k]
            mu_a, mu_b = wa.mean(), wb.mean()
            da, db = wa - mu_a, wb - mu_b
            # Same expression for variance and covariance so identical
            # inputs give exactly 1.0.
            var_a, var_b = (da * da).mean(), (db * db).mean()
            cov = (da * db).mean()
            num = (2 * mu_a * mu_b + _SSIM_C1) * (2 * cov + _SSIM_C2)
            den = (mu_a**2 + mu_b**2 + _SSIM_C1) * (var_a + var_b + _SSIM_C2)
            vals.append(num / den)
    return float(np.mean(vals))


@dataclass
class MetricsReport:
    """Region-split LAB RMSE plus full-frame PSNR/SSIM."""

    lab_rmse_shadow: float | None
    lab_rmse_nonshadow: float | None
    lab_rmse_all: float
    psnr: float
    ssim: float
    shadow_pixels: int
    nonshadow_pixels: int

    def to_dict(self) -> dict:
        def enc(v):
            if v is None:
                return None
            return "inf" if math.isinf(v) else v

        return {
            "lab_rmse_shadow": enc(self.lab_rmse_shadow),
            "lab_rmse_nonshadow": enc(self.lab_rmse_nonshadow),
            "lab_rmse_all": enc(self.lab_rmse_all),
            "psnr": enc(self.psnr),
            "ssim": self.ssim,
            "shadow_pixels": self.shadow_pixels,
            "nonshadow_pixels": self.nonshadow_pixels,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def _region_rmse(diff: np.ndarray, region: np.ndarray) -> float | None:
    count = int(region.sum())
    if count == 0:
        return None
    sel = diff[:, region]
    return float(np.sqrt(np.mean(sel * sel)))


def region_metrics(pred: np.ndarray, target: np.ndarray, mask: np.ndarray) -> MetricsReport:
    """Evaluate a prediction against ground truth, split by the mask."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if pred.shape != target.shape:
        raise ContractViolation(f"shape mismatch {pred.shape} vs {target.shape}")
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise ContractViolation("mask must be binary 0/1")
    diff = srgb_to_lab(pred) - srgb_to_lab(target)
    shadow = mask == 1.0
    nonshadow = ~shadow
    n_shadow, n_non = int(shadow.sum()), int(nonshadow.sum())
    assert n_shadow + n_non == mask.size
    return MetricsReport(
        lab_rmse_shadow=_region_rmse(diff, shadow),
        lab_rmse_nonshadow=_region_rmse(diff, nonshadow),
        lab_rmse_all=float(np.sqrt(np.mean(diff * diff))),
        psnr=psnr(pred, target),
        ssim=ssim(pred, target),
        shadow_pixels=n_shadow,
        nonshadow_pixels=n_non,
    )
