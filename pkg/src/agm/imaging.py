"""Pixel-space transforms: graying, head-shoulder cropping, resizing, augmentation.

All operations are pure functions on 8-bit images; none of them mutates its
input and all of them preserve identity and camera tags.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import ConfigError, DataError, ModalityError


class Modality(str, Enum):
    VISIBLE = "visible"
    INFRARED = "infrared"
    GRAYSCALE = "grayscale"


@dataclass(frozen=True)
class Image:
    """An H x W x 3 uint8 raster with a modality tag and identity label.

    Grayscale-tagged images must have all three channels equal at every
    pixel; that invariant is checked at construction time.
    """

    pixels: np.ndarray
    modality: Modality
    identity: int
    camera: int | None = None

    def __post_init__(self) -> None:
        px = self.pixels
        if px.ndim != 3 or px.shape[2] != 3:
            raise DataError(f"expected H x W x 3 pixels, got shape {px.shape}")
        if px.dtype != np.uint8:
            raise DataError(f"expected uint8 pixels, got dtype {px.dtype}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise DataError(f"degenerate image size {px.shape[:2]}")
        if self.identity < 0:
            raise DataError(f"identity label must be non-negative, got {self.identity}")
        if self.modality == Modality.GRAYSCALE:
            if not (
                np.array_equal(px[:, :, 0], px[:, :, 1])
                and np.array_equal(px[:, :, 0], px[:, :, 2])
            ):
                raise DataError("grayscale image must have equal channels at every pixel")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class GrayscaleCoeffs:
    """Channel weights for the visible-to-grayscale transform."""

    alpha1: float = 0.299
    alpha2: float = 0.587
    alpha3: float = 0.114

    def __post_init__(self) -> None:
        if min(self.alpha1, self.alpha2, self.alpha3) < 0:
            raise ConfigError("grayscale coefficients must be non-negative")


@dataclass(frozen=True)
class AugmentPolicy:
    """Parameters of the two training augmentations, plus the draw seed.

    The same (image, policy) pair always produces the same output; vary
    the seed to vary the augmentation.
    """

    crop_padding: int = 0
    erase_probability: float = 0.0
    erase_area_range: tuple[float, float] = (0.02, 0.2)
    erase_aspect_range: tuple[float, float] = (0.3, 3.3)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.crop_padding < 0:
            raise ConfigError("crop_padding must be non-negative")
        if not 0.0 <= self.erase_probability <= 1.0:
            raise ConfigError("erase_probability must lie in [0, 1]")
        for name, (lo, hi) in (
            ("erase_area_range", self.erase_area_range),
            ("erase_aspect_range", self.erase_aspect_range),
        ):
            if lo > hi or lo <= 0:
                raise ConfigError(f"{name} must be positive and ordered, got ({lo}, {hi})")


def grayscale_values(pixels: np.ndarray, coeffs: GrayscaleCoeffs) -> np.ndarray:
    """Weighted channel sum, rounded half-up and clamped to [0, 255]."""
    px = pixels.astype(np.float64)
    g = coeffs.alpha1 * px[:, :, 0] + coeffs.alpha2 * px[:, :, 1] + coeffs.alpha3 * px[:, :, 2]
    return np.clip(np.floor(g + 0.5), 0, 255).astype(np.uint8)


def to_grayscale(img: Image, coeffs: GrayscaleCoeffs | None = None) -> Image:
    """Convert a visible image to a three-channel grayscale image.

    Accepts grayscale input as well (the transform is then the identity),
    but rejects infrared images: they go through the GAN path instead.
    """
    if img.modality == Modality.INFRARED:
        raise ModalityError("to_grayscale expects a visible image, got infrared")
    coeffs = coeffs or GrayscaleCoeffs()
    g = grayscale_values(img.pixels, coeffs)
    return Image(
        pixels=np.repeat(g[:, :, None], 3, axis=2),
        modality=Modality.GRAYSCALE,
        identity=img.identity,
        camera=img.camera,
    )


def crop_head_shoulder(img: Image) -> Image:
    """Keep the upper third of the image (all columns, rows [0, H//3))."""
    if img.height < 3:
        raise DataError(f"image height {img.height} too small for a head-shoulder crop")
    rows = img.height // 3
    return replace(img, pixels=img.pixels[:rows].copy())


def resize(img: Image, out_h: int, out_w: int) -> Image:
    """Bilinear resize with half-pixel-centred sampling."""
    if out_h < 1 or out_w < 1:
        raise ConfigError(f"target size must be positive, got ({out_h}, {out_w})")
    if (out_h, out_w) == (img.height, img.width):
        return replace(img, pixels=img.pixels.copy())
    resized = _bilinear(img.pixels, out_h, out_w)
    return replace(img, pixels=resized)


def _bilinear(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    in_h, in_w = pixels.shape[:2]
    src_y = np.clip((np.arange(out_h) + 0.5) * in_h / out_h - 0.5, 0, in_h - 1)
    src_x = np.clip((np.arange(out_w) + 0.5) * in_w / out_w - 0.5, 0, in_w - 1)
    y0 = np.floor(src_y).astype(np.int64)
    x0 = np.floor(src_x).astype(np.int64)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (src_y - y0)[:, None, None]
    wx = (src_x - x0)[None, :, None]
    px = pixels.astype(np.float64)
    top = px[y0][:, x0] * (1 - wx) + px[y0][:, x1] * wx
    bot = px[y1][:, x0] * (1 - wx) + px[y1][:, x1] * wx
    out = top * (1 - wy) + bot * wy
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


def augment(img: Image, policy: AugmentPolicy) -> Image:
    """Random crop (zero-padded) then random erasing, seeded by the policy.

    A grayscale image stays grayscale: erase noise is drawn once per pixel
    and replicated over channels.
    """
    rng = np.random.default_rng(policy.seed)
    px = img.pixels
    h, w = px.shape[:2]

    if policy.crop_padding > 0:
        p = policy.crop_padding
        padded = np.zeros((h + 2 * p, w + 2 * p, 3), dtype=np.uint8)
        padded[p : p + h, p : p + w] = px
        top = int(rng.integers(0, 2 * p + 1))
        left = int(rng.integers(0, 2 * p + 1))
        px = padded[top : top + h, left : left + w]
    else:
        px = px.copy()

    if policy.erase_probability > 0 and rng.random() < policy.erase_probability:
        px = px.copy()
        _erase(px, rng, policy, grayscale=img.modality == Modality.GRAYSCALE)

    return replace(img, pixels=px)


def _erase(px: np.ndarray, rng: np.random.Generator, policy: AugmentPolicy, grayscale: bool) -> None:
    h, w = px.shape[:2]
    for _ in range(10):
        area = rng.uniform(*policy.erase_area_range) * h * w
        aspect = rng.uniform(*policy.erase_aspect_range)
        eh = int(round(np.sqrt(area * aspect)))
        ew = int(round(np.sqrt(area / aspect)))
        if 0 < eh <= h and 0 < ew <= w:
            top = int(rng.integers(0, h - eh + 1))
            left = int(rng.integers(0, w - ew + 1))
            if grayscale:
                noise = rng.integers(0, 256, size=(eh, ew, 1), dtype=np.uint8)
                noise = np.repeat(noise, 3, axis=2)
            else:
                noise = rng.integers(0, 256, size=(eh, ew, 3), dtype=np.uint8)
            px[top : top + eh, left : left + ew] = noise
            return
    # No rectangle fit inside the image: leave it untouched.


def load_image(path: str | Path, modality: Modality, identity: int, camera: int | None = None) -> Image:
    """Read a PNG from disk as a three-channel image."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"image file not found: {path}")
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return Image(pixels=arr, modality=modality, identity=identity, camera=camera)


def save_image(img: Image, path: str | Path) -> None:
    """Write an image as a three-channel PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(img.pixels, mode="RGB").save(path, format="PNG")
