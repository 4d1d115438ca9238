"""PSNR / SSIM and dataset evaluation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy import ndimage

from .data import LUMA, SampleRecord
from .errors import ConfigurationError, ShapeError

PSNR_CAP_DB = 80.0
MSE_FLOOR = 1e-8
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, dynamic_range: float = 1.0) -> float:
    """PSNR in dB over all elements, capped at 80 dB."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < MSE_FLOOR:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(dynamic_range ** 2 / mse))


def _luma(x):
    if x.ndim == 3 and x.shape[0] == 3:
        return np.tensordot(LUMA, x, axes=1)
    if x.ndim == 3 and x.shape[0] == 1:
        return x[0]
    if x.ndim == 2:
        return x
    raise ShapeError(f"ssim expects H x W, 1 x H x W or 3 x H x W, got {x.shape}")


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img, g):
    r = (len(g) - 1) // 2
    out = ndimage.correlate1d(img, g, axis=0, mode="reflect")
    out = ndimage.correlate1d(out, g, axis=1, mode="reflect")
    return out[r:-r, r:-r]


def ssim_map(a, b, dynamic_range: float = 1.0) -> np.ndarray:
    a, b = _pair(a, b)
    x, y = _luma(a), _luma(b)
    if min(x.shape) < SSIM_WINDOW:
        raise ConfigurationError(f"image {x.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    g = gaussian_window()
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    c1 = (SSIM_K1 * dynamic_range) ** 2
    c2 = (SSIM_K2 * dynamic_range) ** 2
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))


def ssim(a, b, dynamic_range: float = 1.0) -> float:
    """Mean SSIM of the luminance, 11x11 Gaussian window (sigma 1.5), valid region only."""
    return float(ssim_map(a, b, dynamic_range).mean())


@dataclass
class MetricsReport:
    rows: list[tuple[str, float, float]] = field(default_factory=list)
    model_tag: str = ""

    @property
    def count(self) -> int:
        return len(self.rows)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r[1] for r in self.rows]))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r[2] for r in self.rows]))

    def to_csv(self, path) -> Path:
        """Columns: id, psnr_db, ssim; a final ``mean`` row holds the aggregates."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "psnr_db", "ssim"])
            for rid, p, s in self.rows:
                w.writerow([rid, f"{p:.6f}", f"{s:.6f}"])
            w.writerow(["mean", f"{self.mean_psnr:.6f}", f"{self.mean_ssim:.6f}"])
        return path


def to_batch(image: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(np.ascontiguousarray(image), dtype=dtype)[None]


def restore(model, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode forward of one 3 x H x W image; outputs clamped to [0, 1]."""
    model.eval()
    with torch.no_grad():
        denoised, skeleton = model(to_batch(image))
    return denoised[0].clamp(0, 1).numpy(), skeleton[0].clamp(0, 1).numpy()


def evaluate(model, records: Sequence[SampleRecord], bypass: bool = False, tag: str = "") -> MetricsReport:
    """Per-image PSNR/SSIM of the restored image against the clean target.

    ``bypass=True`` skips the network and scores the noisy input itself.
    """
    if not records:
        raise ConfigurationError("cannot evaluate an empty split")
    report = MetricsReport(model_tag=tag or ("raw" if bypass else "model"))
    for r in records:
        out = r.noisy if bypass else restore(model, r.noisy)[0]
        report.rows.append((r.id, psnr(out, r.clean), ssim(out, r.clean)))
    return report
