"""Image quality metrics, YCbCr colour analysis and paired t-tests.

YCbCr uses the full-range BT.601 convention throughout the package::

    Y  =       0.299    R + 0.587    G + 0.114    B
    Cb = 128 - 0.168736 R - 0.331264 G + 0.5      B
    Cr = 128 + 0.5      R - 0.418688 G - 0.081312 B
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

_M = np.array([
    [0.299, 0.587, 0.114],
    [-0.168736, -0.331264, 0.5],
    [0.5, -0.418688, -0.081312],
])
_OFFSET = np.array([0.0, 128.0, 128.0])
_M_INV = np.linalg.inv(_M)


def rgb_to_ycbcr(rgb):
    """(..., 3) RGB in 0..255 to YCbCr code values."""
    rgb = np.asarray(rgb, dtype=np.float64)
    return rgb @ _M.T + _OFFSET


def ycbcr_to_rgb(ycc):
    ycc = np.asarray(ycc, dtype=np.float64)
    return (ycc - _OFFSET) @ _M_INV.T


def ycbcr_to_rgb_uint8(ycc):
    return np.clip(np.round(ycbcr_to_rgb(ycc)), 0, 255).astype(np.uint8)


def mse(target, test):
    target = np.asarray(target, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if target.shape != test.shape:
        raise ValueError(f"shape mismatch: {target.shape} vs {test.shape}")
    return float(np.mean((target - test) ** 2))


def psnr(target, test, max_value=1.0):
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    if max_value <= 0:
        raise ValueError("max_value must be positive")
    err = mse(target, test)
    if err == 0:
        return math.inf
    return 10.0 * math.log10(max_value ** 2 / err)


def _window(size, sigma):
    if sigma is None:
        w = np.ones((size, size))
    else:
        ax = np.arange(size) - (size - 1) / 2.0
        g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
        w = np.outer(g, g)
    return w / w.sum()


def _local_mean(img, w):
    win = sliding_window_view(img, w.shape, axis=(-2, -1))
    return np.einsum("...ijkl,kl->...ij", win, w)


def ssim_map(a, b, window=11, sigma=1.5, data_range=255.0, k1=0.01, k2=0.03):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape[-2:]) < window:
        raise ValueError(f"image {a.shape[-2:]} smaller than {window}px window")
    w = _window(window, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mu_a, mu_b = _local_mean(a, w), _local_mean(b, w)
    var_a = _local_mean(a * a, w) - mu_a ** 2
    var_b = _local_mean(b * b, w) - mu_b ** 2
    cov = _local_mean(a * b, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, window=11, sigma=1.5, data_range=255.0, k1=0.01, k2=0.03):
    """Mean SSIM over all valid window positions (and leading axes).

    ``sigma=None`` selects a uniform window.
    """
    return float(ssim_map(a, b, window, sigma, data_range, k1, k2).mean())


def msssim(a, b, data_range=255.0, scales=None):
    """Multi-scale SSIM of (..., H, W) arrays, evaluated in 64-bit."""
    from .losses import MsssimParams, _max_scales, msssim_index
    from .tensor import Tensor, default_dtype, no_grad

    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scales = scales or _max_scales(a.shape[-2:])
    with default_dtype(np.float64), no_grad():
        return msssim_index(Tensor(a), Tensor(b), MsssimParams(scales=scales, data_range=data_range)).item()


@dataclass
class ColorDifferenceRecord:
    dY: float
    dCb: float
    dCr: float
    z_axial: float = 0.0
    framework: int = 0

    def as_tuple(self):
        return (self.dY, self.dCb, self.dCr)


def color_difference(img_a, img_b, z_axial=0.0, framework=0):
    """Per-channel mean absolute difference of two (3, H, W) YCbCr images."""
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    d = np.abs(a - b).reshape(3, -1).mean(axis=1)
    return ColorDifferenceRecord(float(d[0]), float(d[1]), float(d[2]), float(z_axial), int(framework))


def chroma_histograms(ycc, bins=64):
    """Normalised Cb and Cr histograms over [0, 255] of a (3, H, W) image."""
    if bins < 2:
        raise ValueError("bins must be >= 2")
    ycc = np.asarray(ycc, dtype=np.float64)
    edges = np.linspace(0.0, 255.0, bins + 1)
    out = []
    for c in (1, 2):
        h, _ = np.histogram(np.clip(ycc[c], 0, 255), bins=edges)
        out.append(h / h.sum())
    return out[0], out[1], edges


@dataclass
class TTestResult:
    t_statistic: float
    degrees_of_freedom: int
    p_value: float
    n_pairs: int

    def significant(self, alpha=0.05):
        return self.p_value < alpha


def student_t_sf(t, dof):
    """Upper-tail probability P(T > t) for Student's t with ``dof`` degrees of freedom."""
    if math.isinf(t):
        return 0.0 if t > 0 else 1.0
    x = dof / (dof + t * t)
    tail = 0.5 * special.betainc(dof / 2.0, 0.5, x)
    return float(tail if t >= 0 else 1.0 - tail)


def paired_upper_t_test(c1, c2):
    """Test H1: mean(c2) < mean(c1) on paired samples.

    Zero-variance differences give ``p = 0.5`` when their mean is zero and
    ``p = 0`` or ``1`` otherwise.
    """
    c1 = np.asarray(c1, dtype=np.float64)
    c2 = np.asarray(c2, dtype=np.float64)
    if c1.shape != c2.shape or c1.ndim != 1:
        raise ValueError("c1 and c2 must be 1-D and of equal length")
    n = c1.size
    if n < 2:
        raise ValueError("need at least two pairs")
    d = c1 - c2
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0:
        if mean == 0:
            return TTestResult(0.0, n - 1, 0.5, n)
        t = math.copysign(math.inf, mean)
    else:
        t = mean / (sd / math.sqrt(n))
    return TTestResult(float(t), n - 1, student_t_sf(t, n - 1), n)


METRIC_COLUMNS = ("fov_id", "framework", "z_axial_um", "psnr_db", "ssim", "msssim", "dY", "dCb", "dCr")
TTEST_COLUMNS = ("z_axial_um", "channel", "t", "dof", "p")


def write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in columns})
