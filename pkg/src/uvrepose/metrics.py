"""Reference-based image metrics: PSNR, SSIM, OKS, FaceSim and masked variants."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .errors import InputError

# identical images have no finite PSNR; reported as this sentinel and skipped by aggregation
PSNR_IDENTICAL = math.inf

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
OKS_K = 0.07


def _check_pair(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise InputError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def _pixel_mask(mask, shape):
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != tuple(shape[:2]):
        raise InputError(f"mask {mask.shape} does not match image {shape[:2]}")
    if not mask.any():
        raise InputError("mask selects no pixels")
    return mask


def psnr(a, b, mask=None):
    """10*log10(1/MSE) over (masked) pixels; +inf for identical inputs."""
    a, b = _check_pair(a, b)
    mask = _pixel_mask(mask, a.shape)
    sq = (a - b) ** 2
    if mask is not None:
        sq = sq[mask]
    mse = float(sq.mean())
    if mse == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img, g):
    out = correlate1d(correlate1d(img, g, axis=0, mode="constant"), g, axis=1, mode="constant")
    r = len(g) // 2
    return out[r : img.shape[0] - r, r : img.shape[1] - r]


def ssim_map(a, b):
    """Local SSIM for every window fully inside the image (grayscale = channel mean)."""
    a, b = _check_pair(a, b)
    if a.ndim == 3:
        a, b = a.mean(axis=2), b.mean(axis=2)
    if min(a.shape) < SSIM_WINDOW:
        raise InputError(f"image {a.shape} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = _gaussian_window()
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def ssim(a, b, mask=None):
    """Mean local SSIM; with a mask, only windows centred on masked pixels count."""
    smap = ssim_map(a, b)
    a = np.asarray(a)
    mask = _pixel_mask(mask, a.shape)
    if mask is None:
        return float(smap.mean())
    r = SSIM_WINDOW // 2
    centres = mask[r : a.shape[0] - r, r : a.shape[1] - r]
    if not centres.any():
        raise InputError("no SSIM window is centred inside the mask")
    return float(smap[centres].mean())


def oks(pred, gt, scale, k=OKS_K):
    """Object keypoint similarity: mean over visible gt keypoints of exp(-d^2 / (2 s^2 k^2)).

    `scale` is the object area s^2; `k` is a scalar or per-keypoint array.
    """
    if tuple(pred.names) != tuple(gt.names):
        raise InputError("keypoint names differ between prediction and ground truth")
    if not scale > 0:
        raise InputError(f"object scale must be positive, got {scale}")
    vis = np.asarray(gt.visible, dtype=bool)
    if not vis.any():
        raise InputError("ground truth has no visible keypoints")
    k = np.broadcast_to(np.asarray(k, dtype=float), vis.shape)
    d2 = ((np.asarray(pred.points) - np.asarray(gt.points)) ** 2).sum(axis=1)
    # a prediction with no location (nan) scores zero
    e = np.where(np.isfinite(d2), np.exp(-d2 / (2.0 * scale * k**2)), 0.0)
    return float(e[vis].mean())


def face_sim(e1, e2):
    from .idgraph import cosine_sim

    return cosine_sim(e1, e2)


@dataclass
class MetricReport:
    values: dict = field(default_factory=dict)  # name -> list of per-sample values
    masked: set = field(default_factory=set)

    def add(self, name, value, masked=False):
        self.values.setdefault(name, []).append(float(value))
        if masked:
            self.masked.add(name)

    @property
    def sample_count(self):
        return max((len(v) for v in self.values.values()), default=0)

    def summary(self):
        """Arithmetic means; infinite sentinels are skipped and counted."""
        out = {"samples": self.sample_count}
        for name, vals in self.values.items():
            arr = np.asarray(vals)
            finite = arr[np.isfinite(arr)]
            out[name] = float(finite.mean()) if len(finite) else None
            skipped = len(arr) - len(finite)
            if skipped:
                out[f"{name}_infinite"] = int(skipped)
        return out
