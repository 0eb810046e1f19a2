"""Synthetic dark-field WSI generator with exact, recomputable ground truth.

The surgical dataset this pipeline was designed around is private, so
experiments run on generated stand-ins: a noisy tissue field inside a dark
background margin ring, plus (for malignant samples) elliptical lesion
regions with a distinct mean color and noise level. No claim of visual
realism is made; the value is that every label is derivable from recorded
geometry.

Ground-truth conventions, all recorded in the dataset manifest:
  - WSI label: malignant samples carry >= 1 lesion, benign carry 0.
  - Patch label: a 400x400 grid cell is malignant iff at least
    ``malignant_coverage`` (default 30%) of its pixels lie inside a lesion.
    Pixel membership tests the pixel center (row + 0.5, col + 0.5) against
    the ellipse, so the rule is exactly recomputable from manifest geometry.
  - Background: the margin ring, marked in the explicit mask and rendered
    dark enough that the intensity rule (mean channel < 0.08) agrees.

Pixels are quantized to 8 bits before being returned, so in-memory samples
and PNG round-trips are bit-identical. Generation is deterministic for
(spec, label, seed); datasets derive one seed per WSI, making per-WSI
generation order-independent.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass

import numpy as np

from .exceptions import GeneratorSpecError
from .image_io import load_mask, load_rgb, save_mask, save_rgb
from .tiling import PATCH_SIZE, WsiSample

# Hard ceiling on rendered background intensity. 0.075 quantizes to at most
# 19/255 ~ 0.0745, strictly below the 0.08 background-intensity rule, so the
# explicit mask and the intensity rule agree on every ring pixel.
BACKGROUND_CEILING = 0.075

REDUCED_N_BENIGN = 12
REDUCED_N_MALIGNANT = 18

_SAMPLE_RETRIES = 100


@dataclass(frozen=True)
class Lesion:
    """Axis-aligned ellipse in pixel units: center (row, col), semi-axes (row, col)."""

    center: tuple[float, float]
    radii: tuple[float, float]

    def __post_init__(self):
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))
        object.__setattr__(self, "radii", (float(self.radii[0]), float(self.radii[1])))
        if min(self.radii) <= 0:
            raise GeneratorSpecError(f"lesion semi-axes must be positive, got {self.radii}")


@dataclass(frozen=True)
class GeneratorSpec:
    """Geometry, texture, and labeling parameters for one synthetic dataset.

    Dimensions must be positive multiples of the 400-pixel patch size so the
    label grid tiles the image exactly. ``lesions`` pins an explicit lesion
    set for malignant samples (placement tests); when None, each malignant
    sample draws ``lesion_count`` ellipses with semi-axes from
    ``lesion_radius``. ``class_ratio`` documents the benign:malignant mix the
    dataset defaults mirror.
    """

    height: int = 1200
    width: int = 1600
    margin: int = 100
    benign_color: tuple[float, float, float] = (0.30, 0.45, 0.62)
    lesion_color: tuple[float, float, float] = (0.78, 0.55, 0.22)
    noise_sigma: float = 0.04
    lesion_noise_sigma: float = 0.06
    background_level: float = 0.02
    lesion_count: tuple[int, int] = (1, 3)
    lesion_radius: tuple[float, float] = (180.0, 320.0)
    lesions: tuple[Lesion, ...] | None = None
    malignant_coverage: float = 0.30
    min_contrast: float = 0.20
    class_ratio: tuple[int, int] = (2, 3)
    seed: int = 0

    def __post_init__(self):
        for name in ("height", "width"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value <= 0 or value % PATCH_SIZE:
                raise GeneratorSpecError(
                    f"{name} must be a positive multiple of {PATCH_SIZE}, got {value!r}"
                )
        if not isinstance(self.margin, (int, np.integer)) or self.margin < 0:
            raise GeneratorSpecError(f"margin must be a non-negative int, got {self.margin!r}")
        tissue_h = self.height - 2 * self.margin
        tissue_w = self.width - 2 * self.margin
        if tissue_h <= 0 or tissue_w <= 0:
            raise GeneratorSpecError(
                f"margin {self.margin} leaves no tissue region in "
                f"{self.height}x{self.width}"
            )
        for name in ("benign_color", "lesion_color"):
            color = tuple(float(c) for c in getattr(self, name))
            if len(color) != 3 or not all(0.0 <= c <= 1.0 for c in color):
                raise GeneratorSpecError(f"{name} must be three values in [0, 1], got {color}")
            object.__setattr__(self, name, color)
        for name in ("noise_sigma", "lesion_noise_sigma", "min_contrast"):
            if getattr(self, name) < 0:
                raise GeneratorSpecError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0.0 <= self.background_level <= BACKGROUND_CEILING:
            raise GeneratorSpecError(
                f"background_level must be in [0, {BACKGROUND_CEILING}], "
                f"got {self.background_level}"
            )
        lo, hi = self.lesion_count
        if not (isinstance(lo, (int, np.integer)) and isinstance(hi, (int, np.integer))):
            raise GeneratorSpecError(f"lesion_count must be an int range, got {self.lesion_count}")
        if not 1 <= lo <= hi:
            raise GeneratorSpecError(
                f"lesion_count must satisfy 1 <= low <= high, got {self.lesion_count}"
            )
        object.__setattr__(self, "lesion_count", (int(lo), int(hi)))
        rlo, rhi = (float(r) for r in self.lesion_radius)
        if not 0 < rlo <= rhi:
            raise GeneratorSpecError(
                f"lesion_radius must satisfy 0 < low <= high, got {self.lesion_radius}"
            )
        object.__setattr__(self, "lesion_radius", (rlo, rhi))
        if 2 * rhi > min(tissue_h, tissue_w):
            raise GeneratorSpecError(
                f"lesion radius {rhi} cannot fit inside the "
                f"{tissue_h}x{tissue_w} tissue region"
            )
        if self.lesions is not None:
            lesions = tuple(self.lesions)
            if not lesions:
                raise GeneratorSpecError("explicit lesion list must be non-empty")
            for lesion in lesions:
                self._check_fit(lesion)
            object.__setattr__(self, "lesions", lesions)
        if not 0.0 < self.malignant_coverage <= 1.0:
            raise GeneratorSpecError(
                f"malignant_coverage must be in (0, 1], got {self.malignant_coverage}"
            )
        ratio = tuple(self.class_ratio)
        if len(ratio) != 2 or any(not isinstance(r, (int, np.integer)) or r <= 0 for r in ratio):
            raise GeneratorSpecError(f"class_ratio must be two positive ints, got {ratio}")
        object.__setattr__(self, "class_ratio", (int(ratio[0]), int(ratio[1])))
        if not isinstance(self.seed, (int, np.integer)) or self.seed < 0:
            raise GeneratorSpecError(f"seed must be a non-negative int, got {self.seed!r}")

    def _check_fit(self, lesion):
        (cy, cx), (ry, rx) = lesion.center, lesion.radii
        if (
            cy - ry < self.margin
            or cy + ry > self.height - self.margin
            or cx - rx < self.margin
            or cx + rx > self.width - self.margin
        ):
            raise GeneratorSpecError(
                f"lesion center={lesion.center} radii={lesion.radii} does not fit "
                f"inside the tissue region of a {self.height}x{self.width} image "
                f"with margin {self.margin}"
            )

    @property
    def grid(self):
        return self.height // PATCH_SIZE, self.width // PATCH_SIZE

    @property
    def n_patches(self):
        gh, gw = self.grid
        return gh * gw

    def to_dict(self):
        data = dataclasses.asdict(self)
        if self.lesions is not None:
            data["lesions"] = [
                {"center": list(lesion.center), "radii": list(lesion.radii)}
                for lesion in self.lesions
            ]
        return data

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        for key in ("benign_color", "lesion_color", "lesion_count", "lesion_radius", "class_ratio"):
            if key in data and data[key] is not None:
                data[key] = tuple(data[key])
        if data.get("lesions") is not None:
            data["lesions"] = tuple(
                Lesion(center=tuple(item["center"]), radii=tuple(item["radii"]))
                for item in data["lesions"]
            )
        return cls(**data)


def lesion_mask(lesions, height, width):
    """Boolean (H, W) union of ellipse interiors, tested at pixel centers."""
    mask = np.zeros((height, width), dtype=bool)
    rows = np.arange(height, dtype=np.float64)[:, None] + 0.5
    cols = np.arange(width, dtype=np.float64)[None, :] + 0.5
    for lesion in lesions:
        (cy, cx), (ry, rx) = lesion.center, lesion.radii
        mask |= ((rows - cy) / ry) ** 2 + ((cols - cx) / rx) ** 2 <= 1.0
    return mask


def _cell_means(mask, patch_size):
    gh = mask.shape[0] // patch_size
    gw = mask.shape[1] // patch_size
    return mask.reshape(gh, patch_size, gw, patch_size).mean(axis=(1, 3))


def patch_coverage(lesions, height, width, patch_size=PATCH_SIZE):
    """Per-grid-cell fraction of pixels inside any lesion.

    Dimensions must be multiples of ``patch_size``; generated images always
    are, so coverage needs no padding convention.
    """
    if height % patch_size or width % patch_size:
        raise GeneratorSpecError(
            f"coverage grid needs dimensions divisible by {patch_size}, "
            f"got {height}x{width}"
        )
    return _cell_means(lesion_mask(lesions, height, width), patch_size)


def patch_labels_from_lesions(lesions, height, width, patch_size=PATCH_SIZE, min_coverage=0.30):
    """Grid labels under the coverage convention: malignant iff coverage >= threshold."""
    coverage = patch_coverage(lesions, height, width, patch_size)
    return (coverage >= min_coverage).astype(np.int64)


def _sample_lesions(spec, rng):
    """Draw a lesion set that labels at least one patch malignant.

    A small ellipse centered on a grid corner can stay under the coverage
    threshold in all four cells, which would give a malignant WSI no
    malignant patch; such draws are rejected and redrawn.
    """
    count_lo, count_hi = spec.lesion_count
    radius_lo, radius_hi = spec.lesion_radius
    for _ in range(_SAMPLE_RETRIES):
        lesions = []
        for _ in range(int(rng.integers(count_lo, count_hi + 1))):
            ry = float(rng.uniform(radius_lo, radius_hi))
            rx = float(rng.uniform(radius_lo, radius_hi))
            cy = float(rng.uniform(spec.margin + ry, spec.height - spec.margin - ry))
            cx = float(rng.uniform(spec.margin + rx, spec.width - spec.margin - rx))
            lesions.append(Lesion((cy, cx), (ry, rx)))
        lesions = tuple(lesions)
        labels = patch_labels_from_lesions(
            lesions, spec.height, spec.width, min_coverage=spec.malignant_coverage
        )
        if labels.any():
            return lesions
    raise GeneratorSpecError(
        "no sampled lesion set labeled any patch malignant after "
        f"{_SAMPLE_RETRIES} draws; raise lesion_radius or lower malignant_coverage"
    )


def _render(spec, inside, rng):
    """Compose tissue field, lesion texture, and the dark margin ring."""
    h, w = spec.height, spec.width
    noise = rng.normal(0.0, 1.0, size=(h, w, 3))
    lesion_color = np.asarray(spec.lesion_color)
    benign_color = np.asarray(spec.benign_color)
    image = np.where(inside[..., None], lesion_color, benign_color)
    sigma = np.where(inside[..., None], spec.lesion_noise_sigma, spec.noise_sigma)
    image += sigma * noise
    ring = np.zeros((h, w), dtype=bool)
    if spec.margin:
        m = spec.margin
        ring[:m, :] = True
        ring[-m:, :] = True
        ring[:, :m] = True
        ring[:, -m:] = True
        # Background noise is halved and hard-clipped so every ring pixel
        # stays under the intensity rule even after quantization.
        background = spec.background_level + 0.5 * spec.noise_sigma * noise[ring]
        image[ring] = np.clip(background, 0.0, BACKGROUND_CEILING)
    quantized = np.rint(np.clip(image, 0.0, 1.0) * 255.0)
    return quantized / 255.0, ring


def _check_contrast(spec, pixels, inside, ring):
    """Generator self-check: rendered lesion/tissue mean colors must separate."""
    tissue = ~inside & ~ring
    if not inside.any() or not tissue.any():
        return
    gap = float(np.linalg.norm(pixels[inside].mean(axis=0) - pixels[tissue].mean(axis=0)))
    if gap < spec.min_contrast:
        raise GeneratorSpecError(
            f"lesion/tissue mean-color separation {gap:.4f} is below "
            f"min_contrast {spec.min_contrast}; texture parameters wash out"
        )


@dataclass(frozen=True)
class GeneratedWsi:
    """One generated sample plus the geometry its labels derive from."""

    sample: WsiSample
    lesions: tuple[Lesion, ...]
    seed: int


def generate_record(spec, label, seed=None, wsi_id="wsi"):
    """Generate one WSI and keep its lesion geometry for the manifest."""
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label!r}")
    seed = int(spec.seed if seed is None else seed)
    rng = np.random.default_rng(seed)
    if label == 0:
        lesions = ()
    elif spec.lesions is not None:
        lesions = spec.lesions
    else:
        lesions = _sample_lesions(spec, rng)
    inside = lesion_mask(lesions, spec.height, spec.width)
    pixels, ring = _render(spec, inside, rng)
    _check_contrast(spec, pixels, inside, ring)
    labels = (_cell_means(inside, PATCH_SIZE) >= spec.malignant_coverage).astype(np.int64)
    sample = WsiSample(
        id=wsi_id,
        pixels=pixels,
        label=int(label),
        background_mask=ring,
        patch_labels=labels,
    )
    return GeneratedWsi(sample=sample, lesions=lesions, seed=seed)


def generate_wsi(spec, label, seed=None, wsi_id="wsi"):
    """Deterministic single-WSI generation; see the module docstring for conventions."""
    return generate_record(spec, label, seed=seed, wsi_id=wsi_id).sample


@dataclass(frozen=True)
class WsiEntry:
    """Manifest row: identity, labels, and the geometry that produced them."""

    id: str
    label: int
    seed: int
    lesions: tuple[Lesion, ...]
    patch_labels: tuple[tuple[int, ...], ...]
    n_patches: int
    image_path: str | None = None
    mask_path: str | None = None

    def to_dict(self):
        return {
            "id": self.id,
            "label": self.label,
            "seed": self.seed,
            "lesions": [
                {"center": list(lesion.center), "radii": list(lesion.radii)}
                for lesion in self.lesions
            ],
            "patch_labels": [list(row) for row in self.patch_labels],
            "n_patches": self.n_patches,
            "image_path": self.image_path,
            "mask_path": self.mask_path,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            id=data["id"],
            label=int(data["label"]),
            seed=int(data["seed"]),
            lesions=tuple(
                Lesion(center=tuple(item["center"]), radii=tuple(item["radii"]))
                for item in data["lesions"]
            ),
            patch_labels=tuple(tuple(int(v) for v in row) for row in data["patch_labels"]),
            n_patches=int(data["n_patches"]),
            image_path=data.get("image_path"),
            mask_path=data.get("mask_path"),
        )


@dataclass(frozen=True)
class DatasetManifest:
    """Everything needed to reproduce or audit a generated dataset."""

    spec: GeneratorSpec
    seed: int
    n_benign: int
    n_malignant: int
    entries: tuple[WsiEntry, ...]

    @property
    def total_patches(self):
        return sum(entry.n_patches for entry in self.entries)

    def to_dict(self):
        return {
            "format": "patchfuse-dataset",
            "version": 1,
            "patch_label_rule": (
                "cell malignant iff lesion coverage >= "
                f"{self.spec.malignant_coverage:g} of its pixels"
            ),
            "spec": self.spec.to_dict(),
            "seed": self.seed,
            "n_benign": self.n_benign,
            "n_malignant": self.n_malignant,
            "total_patches": self.total_patches,
            "entries": [entry.to_dict() for entry in self.entries],
        }

    @classmethod
    def from_dict(cls, data):
        if data.get("format") != "patchfuse-dataset":
            raise ValueError(f"not a dataset manifest: format={data.get('format')!r}")
        return cls(
            spec=GeneratorSpec.from_dict(data["spec"]),
            seed=int(data["seed"]),
            n_benign=int(data["n_benign"]),
            n_malignant=int(data["n_malignant"]),
            entries=tuple(WsiEntry.from_dict(item) for item in data["entries"]),
        )

    def write(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def read(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


@dataclass
class GeneratedDataset:
    samples: list
    manifest: DatasetManifest


def _wsi_seed(base_seed, index):
    # One child stream per WSI; stable, recordable, order-independent.
    state = np.random.SeedSequence(entropy=(int(base_seed), int(index))).generate_state(
        1, dtype=np.uint64
    )
    return int(state[0])


def generate_dataset(n_benign=24, n_malignant=36, spec=None, seed=None, out_dir=None):
    """Generate a labeled dataset and its manifest; optionally persist it.

    With ``out_dir`` set, images and masks land in ``out_dir/wsis/`` as PNG
    and the manifest in ``out_dir/manifest.json``; entry paths are relative
    to ``out_dir``. Returned samples are identical either way because pixels
    are already 8-bit quantized.
    """
    if n_benign < 0 or n_malignant < 0:
        raise ValueError(f"counts must be >= 0, got n_benign={n_benign} n_malignant={n_malignant}")
    spec = GeneratorSpec() if spec is None else spec
    seed = int(spec.seed if seed is None else seed)
    if out_dir is not None:
        os.makedirs(os.path.join(out_dir, "wsis"), exist_ok=True)
    samples, entries = [], []
    total = int(n_benign) + int(n_malignant)
    for index in range(total):
        label = 0 if index < n_benign else 1
        wsi_id = f"wsi-{index:03d}"
        record = generate_record(spec, label, seed=_wsi_seed(seed, index), wsi_id=wsi_id)
        sample = record.sample
        image_path = mask_path = None
        if out_dir is not None:
            image_path = os.path.join("wsis", f"{wsi_id}.png")
            mask_path = os.path.join("wsis", f"{wsi_id}.mask.png")
            save_rgb(os.path.join(out_dir, image_path), sample.pixels)
            save_mask(os.path.join(out_dir, mask_path), sample.background_mask)
        entries.append(
            WsiEntry(
                id=wsi_id,
                label=sample.label,
                seed=record.seed,
                lesions=record.lesions,
                patch_labels=tuple(tuple(int(v) for v in row) for row in sample.patch_labels),
                n_patches=spec.n_patches,
                image_path=image_path,
                mask_path=mask_path,
            )
        )
        samples.append(sample)
    manifest = DatasetManifest(
        spec=spec,
        seed=seed,
        n_benign=int(n_benign),
        n_malignant=int(n_malignant),
        entries=tuple(entries),
    )
    if out_dir is not None:
        manifest.write(os.path.join(out_dir, "manifest.json"))
    return GeneratedDataset(samples=samples, manifest=manifest)


def load_dataset(root):
    """Rebuild a GeneratedDataset from a directory written by generate_dataset.

    Pixels come back bit-identical because the generator quantizes to 8 bits
    before saving. Raises FileNotFoundError when the manifest or any image it
    points at is missing, ValueError when an entry was never persisted.
    """
    manifest = DatasetManifest.read(os.path.join(root, "manifest.json"))
    samples = []
    for entry in manifest.entries:
        if entry.image_path is None or entry.mask_path is None:
            raise ValueError(f"entry {entry.id} has no stored image paths")
        samples.append(
            WsiSample(
                id=entry.id,
                pixels=load_rgb(os.path.join(root, entry.image_path)),
                label=entry.label,
                background_mask=load_mask(os.path.join(root, entry.mask_path)),
                patch_labels=np.asarray(entry.patch_labels, dtype=np.int64),
            )
        )
    return GeneratedDataset(samples=samples, manifest=manifest)


def reduced_preset():
    """Desk-scale experiment: 12 benign / 18 malignant at the default 1200x1600."""
    return GeneratorSpec(), REDUCED_N_BENIGN, REDUCED_N_MALIGNANT
