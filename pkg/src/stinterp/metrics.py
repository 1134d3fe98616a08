"""Image-quality metrics over [0,1] gene maps: PSNR, SSIM, PCC, RMSE."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import STPatch

PSNR_CAP = 100.0  # dB reported for MSE below 1e-10
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    pcc: float
    rmse: float
    pcc_defined: bool = True

    def as_dict(self):
        return {"psnr": self.psnr, "ssim": self.ssim, "pcc": self.pcc, "rmse": self.rmse}


def _to_array(x):
    if isinstance(x, STPatch):
        x = x.genes
    arr = np.asarray(getattr(x, "data", x), dtype=np.float64)
    return arr.reshape((-1,) + arr.shape[-2:]) if arr.ndim >= 3 else arr[None]


def psnr(pred, target):
    mse = float(np.mean((np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return 10.0 * np.log10(1.0 / mse)


def rmse(pred, target):
    return float(np.sqrt(np.mean((np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)) ** 2)))


def pcc(pred, target):
    """Pearson correlation of the flattened maps; (0, False) if degenerate."""
    a = np.asarray(pred, dtype=np.float64).ravel()
    b = np.asarray(target, dtype=np.float64).ravel()
    a = a - a.mean()
    b = b - b.mean()
    na = np.sqrt((a * a).sum())
    nb = np.sqrt((b * b).sum())
    if na < 1e-12 or nb < 1e-12:
        return 0.0, False
    return float(np.clip((a * b).sum() / (na * nb), -1.0, 1.0)), True


def _gaussian_window(size, sigma):
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    win = np.outer(g, g)
    return win / win.sum()


def ssim(pred, target, window=SSIM_WINDOW, sigma=SSIM_SIGMA):
    """Mean structural similarity per channel (valid-window Gaussian filter)."""
    p = _to_array(pred)
    t = _to_array(target)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    h, w = p.shape[-2:]
    size = min(window, h, w)
    if size % 2 == 0:
        size -= 1
    win = _gaussian_window(size, sigma)

    def filt(img):
        views = sliding_window_view(img, (size, size), axis=(1, 2))
        return np.tensordot(views, win, axes=([3, 4], [0, 1]))

    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    mu_p = filt(p)
    mu_t = filt(t)
    var_p = filt(p * p) - mu_p * mu_p
    var_t = filt(t * t) - mu_t * mu_t
    cov = filt(p * t) - mu_p * mu_t
    num = (2.0 * mu_p * mu_t + c1) * (2.0 * cov + c2)
    den = (mu_p**2 + mu_t**2 + c1) * (var_p + var_t + c2)
    return float(np.mean(num / den))


def metric_suite(pred, target):
    p = _to_array(pred)
    t = _to_array(target)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    r, defined = pcc(p, t)
    return MetricReport(psnr=psnr(p, t), ssim=ssim(p, t), pcc=r, rmse=rmse(p, t), pcc_defined=defined)


def mean_reports(reports):
    if not reports:
        raise ValueError("no reports to aggregate")
    return MetricReport(
        psnr=float(np.mean([r.psnr for r in reports])),
        ssim=float(np.mean([r.ssim for r in reports])),
        pcc=float(np.mean([r.pcc for r in reports])),
        rmse=float(np.mean([r.rmse for r in reports])),
        pcc_defined=all(r.pcc_defined for r in reports),
    )
