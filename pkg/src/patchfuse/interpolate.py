"""Bilinear resampling with the half-pixel (corner alignment off) convention."""

from __future__ import annotations

import numpy as np


def _source_coords(out_n, in_n):
    # output pixel centers mapped into input pixel-center coordinates
    scale = in_n / out_n
    src = (np.arange(out_n) + 0.5) * scale - 0.5
    lo = np.floor(src).astype(np.int64)
    frac = src - lo
    lo0 = np.clip(lo, 0, in_n - 1)
    lo1 = np.clip(lo + 1, 0, in_n - 1)
    return lo0, lo1, frac


def bilinear_resize(image, out_h, out_w):
    """Resize an (H, W) or (H, W, C) float array to (out_h, out_w[, C]).

    Separable bilinear interpolation of pixel centers; edges clamp. Output
    values are convex combinations of inputs, so they stay inside the source
    value range. When the output size equals the input size the result is an
    exact copy.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim not in (2, 3):
        raise ValueError(f"bilinear_resize expects (H, W) or (H, W, C), got {image.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be >= 1, got {out_h}x{out_w}")
    h, w = image.shape[:2]
    y0, y1, fy = _source_coords(out_h, h)
    x0, x1, fx = _source_coords(out_w, w)
    if image.ndim == 3:
        fy = fy[:, None, None]
        fx = fx[None, :, None]
    else:
        fy = fy[:, None]
        fx = fx[None, :]
    top = image[y0][:, x0] * (1 - fx) + image[y0][:, x1] * fx
    bot = image[y1][:, x0] * (1 - fx) + image[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy
