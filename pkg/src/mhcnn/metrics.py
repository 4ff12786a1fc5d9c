"""PSNR and SSIM, the two quantitative quality measures."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class MetricError(ValueError):
    pass


PSNR_CAP_DB = 100.0


def psnr(reference: np.ndarray, test: np.ndarray) -> float:
    """10*log10(1/MSE) on the [0, 1] scale, both images clamped first.

    Identical to the 255-scale convention in dB. Identical images report the
    100 dB sentinel instead of infinity. Color MSE is averaged jointly across
    all channels, not per-channel PSNR averaged.
    """
    ref = np.clip(np.asarray(reference, dtype=np.float64), 0.0, 1.0)
    tst = np.clip(np.asarray(test, dtype=np.float64), 0.0, 1.0)
    if ref.shape != tst.shape:
        raise MetricError(f"shape mismatch {ref.shape} vs {tst.shape}")
    mse = float(np.mean((ref - tst) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB)


_WINDOW_SIZE = 11
_WINDOW_STD = 1.5
_K1, _K2 = 0.01, 0.03


def _gaussian_window() -> np.ndarray:
    half = (_WINDOW_SIZE - 1) / 2.0
    g = np.exp(-((np.arange(_WINDOW_SIZE) - half) ** 2) / (2.0 * _WINDOW_STD**2))
    win = np.outer(g, g)
    return win / win.sum()


_WIN = _gaussian_window()


def _filter_valid(img: np.ndarray) -> np.ndarray:
    view = np.lib.stride_tricks.sliding_window_view(img, (_WINDOW_SIZE, _WINDOW_SIZE))
    return np.tensordot(view, _WIN, axes=([2, 3], [0, 1]))


def _to_gray(img: np.ndarray) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr.mean(axis=0)  # channel-first color collapses by channel mean
    if arr.ndim != 2:
        raise MetricError(f"expected (h, w) or (c, h, w), got shape {img.shape}")
    return arr


def ssim(reference: np.ndarray, test: np.ndarray) -> float:
    """Single-scale SSIM: 11x11 Gaussian window (std 1.5), K1=0.01, K2=0.03,
    dynamic range 1.0, averaged over valid window positions."""
    x = _to_gray(reference)
    y = _to_gray(test)
    if x.shape != y.shape:
        raise MetricError(f"shape mismatch {x.shape} vs {y.shape}")
    if min(x.shape) < _WINDOW_SIZE:
        raise MetricError(
            f"image {x.shape} smaller than the {_WINDOW_SIZE}x{_WINDOW_SIZE} window"
        )
    c1 = _K1**2
    c2 = _K2**2
    mu_x = _filter_valid(x)
    mu_y = _filter_valid(y)
    sxx = _filter_valid(x * x) - mu_x * mu_x
    syy = _filter_valid(y * y) - mu_y * mu_y
    sxy = _filter_valid(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


@dataclass
class MetricReport:
    """Per-image PSNR/SSIM rows plus their arithmetic means."""

    names: list = field(default_factory=list)
    psnr_db: list = field(default_factory=list)
    ssim: list = field(default_factory=list)

    def add(self, name: str, psnr_value: float, ssim_value: float):
        self.names.append(name)
        self.psnr_db.append(psnr_value)
        self.ssim.append(ssim_value)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr_db))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim))

    def __len__(self):
        return len(self.names)
