"""Small image utilities: area resampling, crops, PNG I/O."""

from __future__ import annotations

import numpy as np
from PIL import Image
from scipy.ndimage import binary_dilation


def _area_matrix(n_out, n_in):
    """Row-stochastic matrix whose entries are the overlap of output and input cells."""
    edges_out = np.arange(n_out + 1) * (n_in / n_out)
    lo = np.maximum(edges_out[:-1, None], np.arange(n_in)[None, :])
    hi = np.minimum(edges_out[1:, None], np.arange(1, n_in + 1)[None, :])
    m = np.clip(hi - lo, 0.0, None)
    return m / m.sum(axis=1, keepdims=True)


def resample_area(img, size):
    """Area-averaging resample of an (H,W) or (H,W,C) array to `size` (int or (h, w))."""
    h_out, w_out = (size, size) if np.isscalar(size) else size
    img = np.asarray(img, dtype=float)
    rows = _area_matrix(h_out, img.shape[0])
    cols = _area_matrix(w_out, img.shape[1])
    out = np.tensordot(rows, img, axes=(1, 0))  # (h_out, W, ...)
    out = np.tensordot(cols, out, axes=(1, 1))  # (w_out, h_out, ...)
    return np.swapaxes(out, 0, 1)


def crop_box(img, box):
    """Crop (r0, c0, r1, c1), padding with zeros outside the image."""
    r0, c0, r1, c1 = box
    h, w = img.shape[:2]
    out = np.zeros((r1 - r0, c1 - c0) + img.shape[2:], dtype=img.dtype)
    sr0, sc0, sr1, sc1 = max(r0, 0), max(c0, 0), min(r1, h), min(c1, w)
    if sr1 > sr0 and sc1 > sc0:
        out[sr0 - r0 : sr1 - r0, sc0 - c0 : sc1 - c0] = img[sr0:sr1, sc0:sc1]
    return out


def square_box(points, margin=0.15, min_size=8):
    """Integer square box around 2D points (x, y), grown by `margin` of its side."""
    pts = np.asarray(points, dtype=float)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    centre = (lo + hi) / 2.0
    side = max(float((hi - lo).max()) * (1 + 2 * margin), min_size)
    half = side / 2.0
    c0, r0 = int(np.floor(centre[0] - half)), int(np.floor(centre[1] - half))
    s = int(np.ceil(side))
    return r0, c0, r0 + s, c0 + s


def dilate(mask, pixels):
    if pixels <= 0:
        return np.asarray(mask, dtype=bool)
    return binary_dilation(mask, iterations=pixels)


def to_uint8(img):
    return np.round(np.clip(np.asarray(img, dtype=float), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path, img):
    arr = np.asarray(img)
    if arr.dtype == bool:
        arr = arr.astype(np.uint8) * 255
    elif arr.dtype != np.uint8:
        arr = to_uint8(arr)
    Image.fromarray(arr).save(path, format="PNG", optimize=False)


def load_png(path, mask=False):
    arr = np.asarray(Image.open(path))
    if mask:
        if arr.ndim == 3:
            arr = arr[..., 0]
        return arr > 127
    return arr.astype(np.float64) / 255.0


def save_texture_png(path, texture):
    """RGBA with alpha = visibility mask."""
    rgba = np.concatenate([to_uint8(texture.pixels), texture.mask[..., None].astype(np.uint8) * 255], axis=-1)
    Image.fromarray(rgba).save(path, format="PNG", optimize=False)


def load_texture_png(path):
    from .raster import TextureMap

    arr = np.asarray(Image.open(path))
    return TextureMap(arr[..., :3].astype(np.float64) / 255.0, arr[..., 3] > 127)
