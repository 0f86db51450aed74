"""Synthetic lesion masks (SLM) and patch-level lesion labels.

A lesion is a bright texture crop taken from the image itself, resized to a
random W x H canvas and multiplied by a soft oval ``exp(-(rho/gamma)^2)``. One
mask sums 1..4 lesions pasted at random offsets; the abnormal image is the
clipped sum of the normal image and the mask.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.ndimage import map_coordinates

from . import kernels
from .errors import ConfigurationError, DegenerateInputError, IntegrityError

REFERENCE_SIDE = 224
REFERENCE_SIZE_RANGE = (16, 64)


@dataclass(frozen=True)
class SLMConfig:
    r_min: int = 1
    r_max: int = 4
    # gamma ~ U[min(W,H) * lo, min(W,H) * hi]
    gamma_range: tuple = (0.25, 0.5)
    # explicit (lo, hi) lesion side range; None scales [16, 64] by image side / 224
    size_range: tuple | None = None

    def validate(self) -> None:
        if not 1 <= self.r_min <= self.r_max <= 4:
            raise ConfigurationError(f"need 1 <= r_min <= r_max <= 4, got {self.r_min}, {self.r_max}")
        lo, hi = self.gamma_range
        if not 0 < lo <= hi:
            raise ConfigurationError(f"bad gamma_range {self.gamma_range}")


def lesion_size_range(side: int, cfg: SLMConfig = SLMConfig()) -> tuple[int, int]:
    """Inclusive (lo, hi) range for lesion W and H on an image of the given side."""
    if cfg.size_range is not None:
        lo, hi = cfg.size_range
    elif side >= REFERENCE_SIDE:
        lo, hi = REFERENCE_SIZE_RANGE
    else:
        lo = int(round(side / 14))
        hi = int(round(side * REFERENCE_SIZE_RANGE[1] / REFERENCE_SIDE))
    lo = max(lo, 2)
    if hi < lo:
        raise ConfigurationError(f"empty lesion size range ({lo}, {hi}) for side {side}")
    return int(lo), int(hi)


def otsu_binarize(image: np.ndarray) -> tuple[float, np.ndarray]:
    """Otsu threshold over a 256-bin histogram and the ``>= threshold`` foreground."""
    image = np.asarray(image, dtype=np.float64)
    k, best = kernels.otsu_scan(kernels.histogram256(image))
    if best <= 0.0:
        raise DegenerateInputError("image has a single intensity level; Otsu is undefined")
    threshold = k / 256.0
    return threshold, image >= threshold


def _bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise DegenerateInputError("foreground is empty")
    return rows[0], rows[-1] + 1, cols[0], cols[-1] + 1


def resize_bilinear(patch: np.ndarray, height: int, width: int) -> np.ndarray:
    h, w = patch.shape
    r = np.clip((np.arange(height) + 0.5) * h / height - 0.5, 0, h - 1)
    c = np.clip((np.arange(width) + 0.5) * w / width - 0.5, 0, w - 1)
    rr, cc = np.meshgrid(r, c, indexing="ij")
    return map_coordinates(np.asarray(patch, dtype=np.float64), [rr, cc], order=1, mode="nearest")


class Texture(NamedTuple):
    eta: np.ndarray  # (H, W)
    crop: tuple  # (row0, row1, col0, col1), half-open


def sample_texture(
    image: np.ndarray, foreground: np.ndarray, rng: np.random.Generator, size: tuple[int, int] | None = None,
    cfg: SLMConfig = SLMConfig(),
) -> Texture:
    """Crop a random rectangle inside the foreground bounding box and resize it.

    ``size`` is ``(W, H)``; when omitted both are drawn uniformly from the lesion
    size range for this image.
    """
    r0, r1, c0, c1 = _bbox(np.asarray(foreground, dtype=bool))
    if r1 - r0 < 2 or c1 - c0 < 2:
        raise DegenerateInputError(f"foreground bounding box {r1 - r0}x{c1 - c0} is smaller than 2x2")
    if size is None:
        lo, hi = lesion_size_range(min(image.shape), cfg)
        size = (int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1)))
    w, h = size
    # two distinct edges along each axis, at least 2 pixels apart
    top = int(rng.integers(r0, r1 - 1))
    bottom = int(rng.integers(top + 2, r1 + 1))
    left = int(rng.integers(c0, c1 - 1))
    right = int(rng.integers(left + 2, c1 + 1))
    crop = np.asarray(image, dtype=np.float64)[top:bottom, left:right]
    return Texture(resize_bilinear(crop, h, w), (top, bottom, left, right))


def lesion_shape(width: int, height: int, gamma: float) -> np.ndarray:
    """Soft oval ``delta[h, w] = exp(-(rho / gamma)^2)`` centred at ``(W/2, H/2)``."""
    if gamma <= 0:
        raise ConfigurationError(f"gamma must be positive, got {gamma}")
    if width < 2 or height < 2:
        raise ConfigurationError(f"lesion must be at least 2x2, got {width}x{height}")
    hh, ww = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    rho = np.sqrt((ww - width / 2) ** 2 + (hh - height / 2) ** 2)
    return shape_value(rho, gamma)


def shape_value(rho, gamma: float):
    return np.exp(-((np.asarray(rho, dtype=np.float64) / gamma) ** 2))


class Lesion(NamedTuple):
    values: np.ndarray  # eta * delta, (H, W)
    row: int
    col: int


def draw_lesion(
    image: np.ndarray, foreground: np.ndarray, rng: np.random.Generator, cfg: SLMConfig = SLMConfig()
) -> Lesion:
    side_h, side_w = image.shape
    lo, hi = lesion_size_range(min(image.shape), cfg)
    w, h = int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1))
    if w > side_w or h > side_h:
        raise ConfigurationError(f"lesion {w}x{h} larger than image {side_w}x{side_h}")
    eta = sample_texture(image, foreground, rng, (w, h), cfg).eta
    g_lo, g_hi = cfg.gamma_range
    gamma = rng.uniform(min(w, h) * g_lo, min(w, h) * g_hi)
    row = int(rng.integers(0, side_h - h + 1))
    col = int(rng.integers(0, side_w - w + 1))
    return Lesion(eta * lesion_shape(w, h, gamma), row, col)


def compose_lesions(shape: tuple[int, int], lesions: Sequence[Lesion]) -> np.ndarray:
    """Sum lesions into a zero field; overlapping lesions add."""
    mask = np.zeros(shape, dtype=np.float64)
    for les in lesions:
        h, w = les.values.shape
        if les.row < 0 or les.col < 0 or les.row + h > shape[0] or les.col + w > shape[1]:
            raise ConfigurationError(f"lesion {h}x{w} at ({les.row}, {les.col}) leaves image {shape}")
        kernels.paste_add(mask, les.values, les.row, les.col)
    return mask


def compose_slm(
    image: np.ndarray, rng: np.random.Generator, r: int, cfg: SLMConfig = SLMConfig(),
    foreground: np.ndarray | None = None,
) -> np.ndarray:
    if not 1 <= r <= 4:
        raise ConfigurationError(f"R must lie in [1, 4], got {r}")
    image = np.asarray(image, dtype=np.float64)
    if foreground is None:
        foreground = otsu_binarize(image)[1]
    lesions = [draw_lesion(image, foreground, rng, cfg) for _ in range(r)]
    return compose_lesions(image.shape, lesions)


def draw_slm(
    image: np.ndarray, rng: np.random.Generator, cfg: SLMConfig = SLMConfig(),
    foreground: np.ndarray | None = None,
) -> np.ndarray:
    """One mask with ``R ~ U{r_min..r_max}`` lesions."""
    cfg.validate()
    r = int(rng.integers(cfg.r_min, cfg.r_max + 1))
    return compose_slm(image, rng, r, cfg, foreground)


def apply_slm(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if image.shape != mask.shape:
        raise IntegrityError(f"image {image.shape} and mask {mask.shape} differ in shape")
    return np.clip(image + mask, 0.0, 1.0)


def tokenize_mask(mask: np.ndarray, patch: int) -> np.ndarray:
    """Raster-order patch labels: True where the patch mean strictly exceeds the global mean."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape[0] % patch or mask.shape[1] % patch:
        raise IntegrityError(f"mask shape {mask.shape} not divisible by patch {patch}")
    means = kernels.patch_means(mask, patch).ravel()
    global_mean = means.mean()
    # ties (constant masks) must not count as exceedance despite rounding in the means
    tol = 1e-9 * max(abs(global_mean), np.finfo(np.float64).tiny)
    return means - global_mean > tol


class AugmentedPair(NamedTuple):
    x: np.ndarray
    x_aug: np.ndarray
    mask: np.ndarray
    labels: np.ndarray


def augment_sample(
    image: np.ndarray, rng: np.random.Generator, n: int, patch: int, cfg: SLMConfig = SLMConfig()
) -> list[AugmentedPair]:
    """``n`` independent SLM draws applied to one normal image."""
    if n < 1:
        raise ConfigurationError(f"N must be >= 1, got {n}")
    image = np.asarray(image, dtype=np.float64)
    foreground = otsu_binarize(image)[1]
    out = []
    for _ in range(n):
        mask = draw_slm(image, rng, cfg, foreground)
        out.append(AugmentedPair(image, apply_slm(image, mask), mask, tokenize_mask(mask, patch)))
    return out


def sample_rng(seed: int, image_index: int, draw: int) -> np.random.Generator:
    """Independent stream per (global seed, image, draw)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(image_index), int(draw), 0x51]))
