"""Quantitative evaluation on the [0, 1] windowed domain: PSNR, RMSE, SSIM,
CNR, and a dataset-level harness reporting mean and standard deviation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .imaging import Mask, NormalizedImage, Slice, hu_window_normalize

# Zero-MSE images report this finite cap instead of infinity.
PSNR_CAP_DB = 100.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _as_array(img) -> np.ndarray:
    if isinstance(img, NormalizedImage):
        return img.values.astype(np.float64)
    return np.asarray(img, dtype=np.float64)


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for unit dynamic range; identical
    images report the 100 dB cap."""
    x, y = _as_array(a), _as_array(b)
    _check_same_shape(x, y)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return 10.0 * math.log10(1.0 / mse)


def rmse(a, b) -> float:
    """Root-mean-square error on the [0, 1] scale (reports multiply by 100)."""
    x, y = _as_array(a), _as_array(b)
    _check_same_shape(x, y)
    return float(np.sqrt(np.mean((x - y) ** 2)))


def _gaussian_window(size: int, sigma: float, dtype: torch.dtype, device) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype, device=device) - (size - 1) / 2.0
    g = torch.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim_torch(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean local SSIM over an 11x11 Gaussian window (sigma 1.5), dynamic
    range 1, computed on valid window positions only.  Differentiable; inputs
    are (B, 1, H, W) tensors."""
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.shape[-2] < SSIM_WINDOW or x.shape[-1] < SSIM_WINDOW:
        raise ValueError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    w = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA, x.dtype, x.device).view(1, 1, SSIM_WINDOW, SSIM_WINDOW)
    mu_x = F.conv2d(x, w)
    mu_y = F.conv2d(y, w)
    var_x = F.conv2d(x * x, w) - mu_x ** 2
    var_y = F.conv2d(y * y, w) - mu_y ** 2
    cov = F.conv2d(x * y, w) - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_x ** 2 + mu_y ** 2 + SSIM_C1) * (var_x + var_y + SSIM_C2)
    return (num / den).mean()


def ssim(a, b) -> float:
    x, y = _as_array(a), _as_array(b)
    _check_same_shape(x, y)
    tx = torch.from_numpy(x)[None, None]
    ty = torch.from_numpy(y)[None, None]
    return float(ssim_torch(tx, ty).item())


def cnr(img, lesion_roi: Mask | np.ndarray, background_roi: Mask | np.ndarray) -> float:
    """Contrast-to-noise ratio |mean(lesion) - mean(background)| / std(background).

    The formula is this toolkit's convention; the ROIs must be non-empty and
    disjoint, and the background must have nonzero variance."""
    x = _as_array(img)
    lesion = lesion_roi.values if isinstance(lesion_roi, Mask) else np.asarray(lesion_roi, bool)
    bg = background_roi.values if isinstance(background_roi, Mask) else np.asarray(background_roi, bool)
    if lesion.shape != x.shape or bg.shape != x.shape:
        raise ValueError("ROI shape does not match the image")
    if not lesion.any() or not bg.any():
        raise ValueError("ROIs must be non-empty")
    if (lesion & bg).any():
        raise ValueError("lesion and background ROIs overlap")
    bg_std = float(x[bg].std())
    if bg_std == 0.0:
        raise ValueError("background ROI has zero standard deviation")
    return abs(float(x[lesion].mean()) - float(x[bg].mean())) / bg_std


@dataclass
class MetricReport:
    """Per-image metrics plus dataset mean/std.  RMSE is stored on the [0, 1]
    scale and SSIM as a fraction; the CSV layer applies the x10^-2 and %
    reporting conventions."""

    psnr: list[float]
    rmse: list[float]
    ssim: list[float]
    cnr: list[float] | None = None

    def _stats(self, xs: Sequence[float]) -> tuple[float, float]:
        arr = np.asarray(xs, dtype=np.float64)
        return float(arr.mean()), float(arr.std())

    def summary(self) -> dict:
        out = {}
        for name in ("psnr", "rmse", "ssim", "cnr"):
            values = getattr(self, name)
            if values is None:
                continue
            mean, std = self._stats(values)
            out[name] = {"mean": mean, "std": std, "count": len(values)}
        return out

    def to_json(self) -> str:
        payload = {
            "per_image": {
                name: getattr(self, name)
                for name in ("psnr", "rmse", "ssim", "cnr")
                if getattr(self, name) is not None
            },
            "summary": self.summary(),
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def to_csv(self) -> str:
        """One table row in the usual comparison layout: PSNR [dB],
        RMSE [x10^-2], SSIM [%], as mean+/-std strings."""
        s = self.summary()
        cells = [
            f"{s['psnr']['mean']:.2f}±{s['psnr']['std']:.2f}",
            f"{s['rmse']['mean'] * 100:.2f}±{s['rmse']['std'] * 100:.2f}",
            f"{s['ssim']['mean'] * 100:.2f}±{s['ssim']['std'] * 100:.2f}",
        ]
        header = "PSNR [dB],RMSE [x1e-2],SSIM [%]"
        if self.cnr is not None:
            cells.append(f"{s['cnr']['mean']:.2f}±{s['cnr']['std']:.2f}")
            header += ",CNR"
        return header + "\n" + ",".join(cells) + "\n"


def evaluate(
    denoise: Callable[[NormalizedImage], NormalizedImage],
    dataset: Sequence[tuple[Slice, Slice]],
    window: tuple[float, float] = (-1000.0, 2000.0),
) -> MetricReport:
    """Run a denoiser over (noisy, clean) slice pairs and aggregate metrics.

    The denoiser operates on windowed images; metrics are computed on the
    same [0, 1] domain against the windowed clean slice."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    psnrs, rmses, ssims = [], [], []
    for noisy, clean in dataset:
        x = hu_window_normalize(noisy, *window)
        y = hu_window_normalize(clean, *window)
        pred = denoise(x)
        if pred.values.shape != y.values.shape:
            raise ValueError("denoiser changed the image shape")
        psnrs.append(psnr(pred, y))
        rmses.append(rmse(pred, y))
        ssims.append(ssim(pred, y))
    return MetricReport(psnr=psnrs, rmse=rmses, ssim=ssims)
