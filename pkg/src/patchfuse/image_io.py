"""Image file I/O: 8-bit PNG and binary PPM (P6) for RGB, 16-bit PNG for maps.

Float images live in [0, 1]; files store them quantized (8- or 16-bit), and
loading divides back by the full-scale value.
"""

from __future__ import annotations

import numpy as np
from PIL import Image


def to_uint8(pixels):
    return np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)


def save_rgb(path, pixels):
    """Save an (H, W, 3) float image in [0, 1] as 8-bit PNG or P6 PPM by suffix."""
    arr = to_uint8(pixels)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {np.asarray(pixels).shape}")
    path = str(path)
    if path.endswith(".ppm"):
        h, w = arr.shape[:2]
        with open(path, "wb") as f:
            f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            f.write(arr.tobytes())
    else:
        Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_rgb(path):
    """Load an 8-bit PNG or P6 PPM into an (H, W, 3) float array in [0, 1]."""
    path = str(path)
    if path.endswith(".ppm"):
        with open(path, "rb") as f:
            blob = f.read()
        fields, pos = [], 0
        while len(fields) < 4:
            while pos < len(blob) and blob[pos : pos + 1].isspace():
                pos += 1
            if blob[pos : pos + 1] == b"#":
                while pos < len(blob) and blob[pos] != 0x0A:
                    pos += 1
                continue
            start = pos
            while pos < len(blob) and not blob[pos : pos + 1].isspace():
                pos += 1
            fields.append(blob[start:pos])
        pos += 1  # single whitespace after maxval
        if fields[0] != b"P6":
            raise ValueError(f"{path}: not a binary PPM (P6) file")
        w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
        arr = np.frombuffer(blob, dtype=np.uint8, count=h * w * 3, offset=pos)
        return arr.reshape(h, w, 3).astype(np.float64) / maxval
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.uint8)
    return arr.astype(np.float64) / 255.0


def save_mask(path, mask):
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path, format="PNG")


def load_mask(path):
    return np.asarray(Image.open(path).convert("L")) >= 128


def save_gray16(path, values):
    """Save a [0, 1] float map as 16-bit grayscale PNG: stored = round(65535*v)."""
    arr = np.clip(np.rint(np.asarray(values) * 65535.0), 0, 65535).astype(np.uint16)
    Image.fromarray(arr).save(path, format="PNG")


def load_gray16(path):
    arr = np.asarray(Image.open(path), dtype=np.uint16)
    return arr.astype(np.float64) / 65535.0
