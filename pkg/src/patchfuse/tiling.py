"""WSI ingestion: tiling into fixed patches, background filtering, downsampling.

A WSI is tiled into a non-overlapping grid of patch_size x patch_size cells.
Partial edge cells are zero-padded and the padded pixels count as background.
A patch is excluded when its background fraction is strictly greater than the
configured maximum (0.80); a fraction of exactly 0.80 is retained.

Background is defined here, not by the source imagery: a pixel is background
when its mean channel intensity is below a threshold (default 0.08) or when
an explicit mask marks it. Dark-field surfaces make the intensity rule a
reasonable default; the threshold is a config key, not a constant of nature.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import DimensionError, EmptyInputError
from .interpolate import bilinear_resize
from .validation import check_fitted

PATCH_SIZE = 400
BACKGROUND_MAX_FRACTION = 0.80
BACKGROUND_INTENSITY_THRESHOLD = 0.08


@dataclass
class WsiSample:
    """One whole-surface image with its label and background annotation.

    ``pixels`` is (H, W, 3) float in [0, 1]; ``background_mask`` is (H, W)
    bool with True marking background. ``patch_labels`` carries per-grid-cell
    labels when the image came from the synthetic generator.
    """

    id: str
    pixels: np.ndarray
    label: int
    background_mask: np.ndarray
    patch_labels: np.ndarray | None = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[-1] != 3:
            raise DimensionError(
                f"WsiSample pixels must be (H, W, 3), got {self.pixels.shape}"
            )
        if self.label not in (0, 1):
            raise ValueError(f"WsiSample label must be 0 or 1, got {self.label}")
        self.background_mask = np.asarray(self.background_mask, dtype=bool)
        if self.background_mask.shape != self.pixels.shape[:2]:
            raise DimensionError(
                f"background mask {self.background_mask.shape} does not match "
                f"pixels {self.pixels.shape[:2]}"
            )


@dataclass
class PatchRecord:
    """One grid cell of a tiled WSI.

    ``region`` is (top, left, height, width) in padded-WSI pixel coordinates;
    regions from one WSI are pairwise disjoint and grid-aligned. ``pixels``
    holds the raw (padded) patch; ``input`` holds the downsampled classifier
    input once attached.
    """

    wsi_id: str
    grid_row: int
    grid_col: int
    region: tuple[int, int, int, int]
    pixels: np.ndarray | None
    background_fraction: float
    label: int | None = None
    input: np.ndarray | None = field(default=None, repr=False)

    @property
    def patch_id(self):
        return f"{self.wsi_id}:r{self.grid_row:02d}c{self.grid_col:02d}"


def padded_dims(h, w, patch_size=PATCH_SIZE):
    """Smallest multiples of ``patch_size`` covering (h, w)."""
    gr = -(-h // patch_size)
    gc = -(-w // patch_size)
    return gr * patch_size, gc * patch_size


def compute_background_mask(pixels, intensity_threshold=BACKGROUND_INTENSITY_THRESHOLD):
    """Intensity rule: background where mean channel value < threshold."""
    pixels = np.asarray(pixels, dtype=np.float64)
    return pixels.mean(axis=-1) < intensity_threshold


def background_fraction(mask, region):
    """Fraction of background pixels inside ``region`` of a padded mask."""
    top, left, height, width = region
    if top < 0 or left < 0 or top + height > mask.shape[0] or left + width > mask.shape[1]:
        raise DimensionError(
            f"region {region} outside mask bounds {mask.shape}"
        )
    window = mask[top : top + height, left : left + width]
    return float(window.sum()) / float(height * width)


def tile(wsi, patch_size=PATCH_SIZE):
    """Tile a WSI into the full pre-filter grid of PatchRecords.

    Returns ceil(H/ps)*ceil(W/ps) records covering the padded image exactly
    once. Edge cells are zero-padded; padding counts as background in the
    recorded fraction. No filtering happens here.
    """
    if patch_size < 1:
        raise ValueError(f"patch_size must be >= 1, got {patch_size}")
    h, w = wsi.pixels.shape[:2]
    if h == 0 or w == 0:
        raise EmptyInputError(f"WSI {wsi.id} has empty pixel array {wsi.pixels.shape}")
    ph, pw = padded_dims(h, w, patch_size)
    padded = np.zeros((ph, pw, 3))
    padded[:h, :w] = wsi.pixels
    # padded area is background by definition
    mask = np.ones((ph, pw), dtype=bool)
    mask[:h, :w] = wsi.background_mask
    records = []
    for gr in range(ph // patch_size):
        for gc in range(pw // patch_size):
            top, left = gr * patch_size, gc * patch_size
            region = (top, left, patch_size, patch_size)
            label = None
            if wsi.patch_labels is not None:
                label = int(wsi.patch_labels[gr, gc])
            records.append(
                PatchRecord(
                    wsi_id=wsi.id,
                    grid_row=gr,
                    grid_col=gc,
                    region=region,
                    pixels=padded[top : top + patch_size, left : left + patch_size].copy(),
                    background_fraction=background_fraction(mask, region),
                    label=label,
                )
            )
    return records


def retained(records, max_fraction=BACKGROUND_MAX_FRACTION):
    """Keep records whose background fraction is not strictly above the cap."""
    return [r for r in records if r.background_fraction <= max_fraction]


def downsample(patch, target=224):
    """Bilinear resize of one patch to (target, target); identity if equal."""
    if target < 1:
        raise ValueError(f"downsample target must be >= 1, got {target}")
    patch = np.asarray(patch, dtype=np.float64)
    if patch.shape[0] == target and patch.shape[1] == target:
        return patch.copy()
    return bilinear_resize(patch, target, target)


def attach_inputs(records, target):
    """Fill record.input with the downsampled patch for each record."""
    for rec in records:
        rec.input = downsample(rec.pixels, target)
    return records


def patch_manifest(wsi, records, max_fraction=BACKGROUND_MAX_FRACTION):
    """One JSON-ready manifest per WSI listing every pre-filter record."""
    return {
        "wsi_id": wsi.id,
        "wsi_label": int(wsi.label),
        "height": int(wsi.pixels.shape[0]),
        "width": int(wsi.pixels.shape[1]),
        "patch_size": int(records[0].region[2]) if records else PATCH_SIZE,
        "background_max_fraction": max_fraction,
        "patches": [
            {
                "id": rec.patch_id,
                "grid_row": rec.grid_row,
                "grid_col": rec.grid_col,
                "region": list(rec.region),
                "background_fraction": rec.background_fraction,
                "label": rec.label,
                "retained": rec.background_fraction <= max_fraction,
            }
            for rec in records
        ],
    }


def write_patch_manifest(path, manifest):
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


class WsiTiler(BaseEstimator, TransformerMixin):
    """Stateless transformer: WsiSample -> retained PatchRecords with inputs.

    Follows the scikit-learn transformer protocol so it can sit at the front
    of a pipeline; fit only validates parameters.
    """

    def __init__(
        self,
        patch_size=PATCH_SIZE,
        downsample_to=224,
        background_max_fraction=BACKGROUND_MAX_FRACTION,
    ):
        self.patch_size = patch_size
        self.downsample_to = downsample_to
        self.background_max_fraction = background_max_fraction

    def fit(self, X=None, y=None):
        if self.patch_size < 1:
            raise ValueError(f"patch_size must be >= 1, got {self.patch_size}")
        if not 0.0 <= self.background_max_fraction <= 1.0:
            raise ValueError(
                f"background_max_fraction must be in [0, 1], "
                f"got {self.background_max_fraction}"
            )
        self.fitted_ = True
        return self

    def transform(self, X):
        """Tile each WsiSample; returns one list of retained records per WSI."""
        check_fitted(self, "fitted_")
        out = []
        for wsi in X:
            records = retained(
                tile(wsi, self.patch_size), self.background_max_fraction
            )
            attach_inputs(records, self.downsample_to)
            out.append(records)
        return out
