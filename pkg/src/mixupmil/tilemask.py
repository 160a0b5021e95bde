"""Informative-area detection and patch sampling on downscaled slide rasters.

Tissue is where the green channel is below a threshold. Optionally, cells
whose mean local grey-level entropy falls below a floor are dropped (blurry
areas). Kept cells are sampled uniformly with replacement.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from mixupmil.rng import RngStream

DOWNSCALE = 8
DEFAULT_GREEN_THRESHOLD = 200
DEFAULT_COVERAGE = 0.75
DEFAULT_ENTROPY_WINDOW = 32
DEFAULT_ENTROPY_MIN = 4.0


@dataclass(frozen=True, eq=False)
class RasterImage:
    pixels: np.ndarray  # height x width x 3, uint8

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] * px.shape[1] == 0:
            raise ValueError(f"expected a non-empty H x W x 3 image, got shape {px.shape}")
        if px.dtype != np.uint8:
            if np.any((px < 0) | (px > 255)):
                raise ValueError("channel values must lie in [0, 255]")
            px = px.astype(np.uint8)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True, eq=False)
class EntropyMap:
    values: np.ndarray  # one entry per non-overlapping window, in bits
    window: int


@dataclass(frozen=True, eq=False)
class PatchGrid:
    patch_size: int
    coordinates: np.ndarray  # K x 2 array of (x, y) top-left corners
    coverage: np.ndarray  # K tissue fractions

    def __len__(self) -> int:
        return len(self.coordinates)


def read_ppm(path: str | Path) -> RasterImage:
    with Image.open(path) as im:
        return RasterImage(np.asarray(im.convert("RGB")))


def write_ppm(img: RasterImage, path: str | Path) -> None:
    Image.fromarray(img.pixels, "RGB").save(path, format="PPM")


def mask_image(mask: np.ndarray) -> RasterImage:
    """Black tissue on white, for visual inspection."""
    px = np.where(mask[..., None], 0, 255).astype(np.uint8)
    return RasterImage(np.repeat(px, 3, axis=2))


def downscale(img: RasterImage, factor: int = DOWNSCALE) -> RasterImage:
    """Box-filter downsampling; trailing rows/columns that do not fill a block are dropped."""
    h, w = img.height // factor, img.width // factor
    if h == 0 or w == 0:
        raise ValueError(f"image {img.width}x{img.height} is smaller than the factor {factor}")
    blocks = img.pixels[: h * factor, : w * factor].astype(np.float64)
    mean = blocks.reshape(h, factor, w, factor, 3).mean(axis=(1, 3))
    return RasterImage(np.floor(mean + 0.5).astype(np.uint8))


def tissue_mask(img: RasterImage, green_threshold: int = DEFAULT_GREEN_THRESHOLD) -> np.ndarray:
    return img.pixels[:, :, 1] < green_threshold


def grayscale(img: RasterImage) -> np.ndarray:
    rgb = img.pixels.astype(np.float64)
    luma = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
    return np.clip(np.floor(luma + 0.5), 0, 255).astype(np.int64)


def entropy_map(img: RasterImage, window: int = DEFAULT_ENTROPY_WINDOW) -> EntropyMap:
    """Shannon entropy (bits) of the 256-bin grey histogram of each window."""
    if not 1 <= window <= min(img.width, img.height):
        raise ValueError(f"window {window} must lie in [1, {min(img.width, img.height)}]")
    gray = grayscale(img)
    rows, cols = img.height // window, img.width // window
    blocks = gray[: rows * window, : cols * window].reshape(rows, window, cols, window)
    blocks = blocks.transpose(0, 2, 1, 3).reshape(rows * cols, window * window)
    offsets = np.arange(rows * cols)[:, None] * 256
    hist = np.bincount((blocks + offsets).ravel(), minlength=rows * cols * 256).reshape(rows * cols, 256)
    p = hist / (window * window)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log2(p), 0.0)
    return EntropyMap(terms.sum(axis=1).reshape(rows, cols), window)


def _entropy_per_pixel(ent: EntropyMap, shape: tuple[int, int]) -> np.ndarray:
    full = np.full(shape, np.nan)
    expanded = np.repeat(np.repeat(ent.values, ent.window, axis=0), ent.window, axis=1)
    h, w = min(shape[0], expanded.shape[0]), min(shape[1], expanded.shape[1])
    full[:h, :w] = expanded[:h, :w]
    return full


def informative_grid(
    mask: np.ndarray,
    entropy: EntropyMap | None,
    patch_size: int,
    coverage_min: float = DEFAULT_COVERAGE,
    entropy_min: float = 0.0,
) -> PatchGrid:
    """Non-overlapping cells with enough tissue (and, if enabled, enough texture).

    A cell's entropy is the pixel-area mean of the entropy windows it
    overlaps. ``entropy_min = 0`` disables the entropy rule.
    """
    h, w = mask.shape
    if patch_size < 1 or patch_size > min(h, w):
        raise ValueError(f"patch size {patch_size} does not fit a {w}x{h} image")
    use_entropy = entropy_min > 0
    if use_entropy and entropy is None:
        raise ValueError("entropy_min > 0 needs an entropy map")
    per_pixel = _entropy_per_pixel(entropy, mask.shape) if use_entropy else None
    rows, cols = h // patch_size, w // patch_size
    cells = mask[: rows * patch_size, : cols * patch_size].reshape(rows, patch_size, cols, patch_size)
    coverage = cells.mean(axis=(1, 3))
    keep = coverage >= coverage_min
    if use_entropy:
        ent_cells = per_pixel[: rows * patch_size, : cols * patch_size].reshape(rows, patch_size, cols, patch_size)
        covered = np.isfinite(ent_cells).sum(axis=(1, 3))
        total = np.nansum(ent_cells, axis=(1, 3))
        # cells no entropy window reaches fail the rule
        cell_entropy = np.where(covered > 0, total / np.maximum(covered, 1), -np.inf)
        keep &= cell_entropy >= entropy_min
    r, c = np.nonzero(keep)
    coords = np.stack([c * patch_size, r * patch_size], axis=1).astype(np.int64)
    return PatchGrid(patch_size, coords.reshape(-1, 2), coverage[r, c])


def sample_coords(grid: PatchGrid, n: int, rng: RngStream) -> np.ndarray:
    """n cell corners (x, y) drawn uniformly with replacement."""
    if len(grid) == 0:
        raise ValueError("cannot sample from an empty grid")
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")
    return grid.coordinates[rng.integers(len(grid), size=n)]


def to_full_resolution(coords: np.ndarray, factor: int = DOWNSCALE) -> np.ndarray:
    return np.asarray(coords, dtype=np.int64) * factor
