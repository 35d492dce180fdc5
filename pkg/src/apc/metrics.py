"""Image-quality measurements on background-composited 8-bit RGB."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .renderer import ColorImage

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
DATA_RANGE = 255.0


@dataclass(frozen=True)
class QualityReport:
    ssim: float
    mse: float
    psnr: float  # math.inf for identical images
    max_abs_diff: tuple[float, float, float, float]  # per premultiplied channel, before quantisation

    @property
    def max_channel_diff(self) -> float:
        return max(self.max_abs_diff)

    def summary(self) -> str:
        psnr = "inf" if math.isinf(self.psnr) else f"{self.psnr:.2f}"
        return (f"SSIM={self.ssim:.4f} MSE={self.mse:.2f} PSNR={psnr} "
                f"max|diff|={self.max_channel_diff:.3g}")


def to_rgb8(image: ColorImage, background=(1.0, 1.0, 1.0)) -> np.ndarray:
    return np.round(image.composite(background) * 255.0).astype(np.uint8)


def _check_same_size(a: ColorImage, b: ColorImage):
    if a.shape != b.shape:
        raise ValueError(f"image sizes differ: {a.shape} vs {b.shape}")


def mse(x: np.ndarray, y: np.ndarray) -> float:
    d = x.astype(np.float64) - y.astype(np.float64)
    return float(np.mean(d * d))


def psnr_from_mse(value: float) -> float:
    if value == 0:
        return math.inf
    return 10.0 * math.log10(DATA_RANGE ** 2 / value)


def _gaussian_window() -> np.ndarray:
    x = np.arange(SSIM_WINDOW) - (SSIM_WINDOW - 1) / 2.0
    w = np.exp(-(x * x) / (2.0 * SSIM_SIGMA ** 2))
    return w / w.sum()


def _filter(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    out = correlate1d(img, window, axis=0, mode="reflect")
    out = correlate1d(out, window, axis=1, mode="reflect")
    pad = (SSIM_WINDOW - 1) // 2
    return out[pad:-pad, pad:-pad]


def ssim_channel(x: np.ndarray, y: np.ndarray) -> float:
    """Mean SSIM of one channel over all fully covered window positions."""
    x = x.astype(np.float64)
    y = y.astype(np.float64)
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW} pixels on each side for SSIM")
    w = _gaussian_window()
    mu_x, mu_y = _filter(x, w), _filter(y, w)
    xx, yy, xy = _filter(x * x, w), _filter(y * y, w), _filter(x * y, w)
    var_x = xx - mu_x * mu_x
    var_y = yy - mu_y * mu_y
    cov = xy - mu_x * mu_y
    c1 = (SSIM_K1 * DATA_RANGE) ** 2
    c2 = (SSIM_K2 * DATA_RANGE) ** 2
    s = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / ((mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2))
    return float(s.mean())


def ssim_rgb(x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean([ssim_channel(x[..., c], y[..., c]) for c in range(x.shape[-1])]))


def compare_images(a: ColorImage, b: ColorImage, background=(1.0, 1.0, 1.0)) -> QualityReport:
    _check_same_size(a, b)
    x, y = to_rgb8(a, background), to_rgb8(b, background)
    m = mse(x, y)
    if m == 0:
        s = 1.0
    else:
        s = ssim_rgb(x, y)
    diff = np.abs(a.data - b.data).reshape(-1, 4).max(axis=0)
    return QualityReport(s, m, psnr_from_mse(m), tuple(float(v) for v in diff))


def diff_image(a: ColorImage, b: ColorImage, scale: float = 3.0) -> ColorImage:
    """Opaque image of ``|a - b| * scale`` on the colour channels, clamped to [0, 1]."""
    _check_same_size(a, b)
    out = ColorImage(a.width, a.height)
    out.data[..., :3] = np.clip(np.abs(a.data[..., :3] - b.data[..., :3]) * scale, 0.0, 1.0)
    out.data[..., 3] = 1.0
    return out


def segment_heatmap(counts: np.ndarray) -> tuple[ColorImage, int]:
    """Grey-scale heat map with the maximum count mapped to white.

    Returns the image and the maximum count used for normalisation.
    """
    counts = np.asarray(counts)
    if np.any(counts < 0):
        raise ValueError("segment counts must be non-negative")
    h, w = counts.shape
    peak = int(counts.max()) if counts.size else 0
    out = ColorImage(w, h)
    if peak > 0:
        out.data[..., :3] = (counts / peak)[..., None]
    out.data[..., 3] = 1.0
    return out, peak
