"""Saliency-weighted decision fusion of patch verdicts into a WSI label.

Patch predictions are remapped from {0, 1} to {-1, +1}. Patches whose mean
saliency score exceeds the threshold (strictly) form the retained set K; the
fused score is

    s = (1 / N) * sum_{j in K} r_j * y~_j

with N the count of all verdicts (the divisor cannot affect sign, so the
choice is documented rather than load-bearing). The label is sign(s) with
+1 -> malignant(1) and -1 or 0 -> benign(0); an empty K short-circuits to
benign, the "otherwise" branch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .exceptions import DimensionError, EmptyInputError


@dataclass(frozen=True)
class FusionConfig:
    """Threshold tau for saliency gating; labels: -1/0 -> benign, +1 -> malignant."""

    threshold: float = 0.30

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"threshold must be in [0, 1], got {self.threshold}")


@dataclass(frozen=True)
class PatchVerdict:
    """One patch's vote: predicted label, its signed remap, saliency score."""

    patch_id: str
    y_hat: int
    score: float

    def __post_init__(self):
        if self.y_hat not in (0, 1):
            raise ValueError(f"y_hat must be 0 or 1, got {self.y_hat}")

    @property
    def y_signed(self):
        return 2 * self.y_hat - 1


def remap_label(y_hat):
    """{0,1} -> {-1,+1} vote encoding."""
    if y_hat not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {y_hat}")
    return 2 * y_hat - 1


def unmap_label(y_signed):
    """{-1,+1} -> {0,1}; inverse of remap_label on its range."""
    if y_signed not in (-1, 1):
        raise ValueError(f"signed label must be -1 or +1, got {y_signed}")
    return (y_signed + 1) // 2


def patch_saliency_score(saliency_values, region):
    """Mean saliency over a patch region: r = (1/|A|) * sum of map values."""
    values = np.asarray(saliency_values, dtype=np.float64)
    top, left, height, width = region
    if (
        top < 0
        or left < 0
        or top + height > values.shape[0]
        or left + width > values.shape[1]
    ):
        raise DimensionError(f"region {region} outside map bounds {values.shape}")
    window = values[top : top + height, left : left + width]
    return float(window.mean())


@dataclass
class FusionResult:
    label: int
    s: float
    retained_ids: list
    n_verdicts: int


def fuse(verdicts, config=None):
    """Saliency-gated weighted vote; see the module docstring for conventions."""
    if config is None:
        config = FusionConfig()
    verdicts = list(verdicts)
    if not verdicts:
        raise EmptyInputError("fuse requires at least one verdict")
    retained = [v for v in verdicts if v.score > config.threshold]
    if not retained:
        return FusionResult(label=0, s=0.0, retained_ids=[], n_verdicts=len(verdicts))
    s = sum(v.score * v.y_signed for v in retained) / len(verdicts)
    label = 1 if s > 0.0 else 0
    return FusionResult(
        label=label,
        s=s,
        retained_ids=[v.patch_id for v in retained],
        n_verdicts=len(verdicts),
    )


def majority_vote(verdicts):
    """Unweighted baseline: malignant iff strictly more +1 votes than -1."""
    verdicts = list(verdicts)
    if not verdicts:
        raise EmptyInputError("majority_vote requires at least one verdict")
    total = sum(v.y_signed for v in verdicts)
    return 1 if total > 0 else 0


def fusion_report(wsi_id, verdicts, result, config=None):
    """JSON-ready per-WSI report with per-patch detail and the fused label."""
    if config is None:
        config = FusionConfig()
    retained = set(result.retained_ids)
    return {
        "wsi_id": wsi_id,
        "threshold": config.threshold,
        "patches": [
            {
                "id": v.patch_id,
                "y_hat": v.y_hat,
                "y_signed": v.y_signed,
                "score": v.score,
                "retained": v.patch_id in retained,
            }
            for v in verdicts
        ],
        "s": result.s,
        "fused_label": result.label,
    }


def write_fusion_report(path, report):
    with open(path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
