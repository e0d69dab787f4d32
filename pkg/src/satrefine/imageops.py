"""Sprite keying, rotation, placement checks, and alpha compositing.

All pixel data is float in [0, 1]; 8-bit PNGs are divided by 255 on load.
Rotation is counter-clockwise in (x, y) pixel coordinates (y = row index),
about the sprite center, onto an expanded canvas. Multiples of 90 degrees
take an exact permutation path; everything else is resampled bilinearly on
alpha-premultiplied channels, which avoids dark fringes at sprite edges.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import ContractError, PlacementError, UnsupportedFormatError

_ALPHA_EPS = 1e-8


@dataclass
class ImagePatch:
    """H x W x C image, float32 pixels in [0, 1], C = 1 or 3."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim == 2:
            self.pixels = self.pixels[:, :, None]
        if self.pixels.ndim != 3 or self.pixels.shape[2] not in (1, 3):
            raise ContractError(f"ImagePatch needs HxWxC with C in (1, 3), got {self.pixels.shape}")
        if self.pixels.shape[0] < 1 or self.pixels.shape[1] < 1:
            raise ContractError("ImagePatch must be at least 1x1")

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def channels(self):
        return self.pixels.shape[2]


@dataclass
class Sprite:
    """RGB sprite with a per-pixel opacity mask, all values in [0, 1]."""

    rgb: np.ndarray
    alpha: np.ndarray

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float32)
        self.alpha = np.asarray(self.alpha, dtype=np.float32)
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise ContractError(f"Sprite rgb must be HxWx3, got {self.rgb.shape}")
        if self.alpha.shape != self.rgb.shape[:2]:
            raise ContractError("Sprite alpha must match rgb spatially")

    @property
    def height(self):
        return self.rgb.shape[0]

    @property
    def width(self):
        return self.rgb.shape[1]


@dataclass
class PlacementSpec:
    """Top-left offset of the (rotated) sprite bounding box, plus rotation."""

    x: int
    y: int
    angle: float = 0.0


def key_alpha(image: ImagePatch, key_color, tolerance: float) -> Sprite:
    """Derive a sprite by keying out pixels near ``key_color``.

    Pixels within Euclidean RGB distance ``tolerance`` of the key become
    fully transparent; everything else is fully opaque. RGB is copied as is.
    """
    if tolerance < 0:
        raise ContractError("tolerance must be >= 0")
    if image.channels != 3:
        raise UnsupportedFormatError("key_alpha needs a 3-channel image")
    key = np.asarray(key_color, dtype=np.float32).reshape(1, 1, 3)
    dist = np.sqrt(np.sum((image.pixels - key) ** 2, axis=2))
    alpha = (dist > tolerance).astype(np.float32)
    return Sprite(rgb=image.pixels.copy(), alpha=alpha)


def _rotate_exact_quarter(sprite: Sprite, quarter_turns: int) -> Sprite:
    # Positive angle turns left-edge content toward the top in (x, y-down)
    # coordinates, which is np.rot90 run backwards.
    k = (-quarter_turns) % 4
    return Sprite(rgb=np.rot90(sprite.rgb, k=k).copy(),
                  alpha=np.rot90(sprite.alpha, k=k).copy())


def rotate_sprite(sprite: Sprite, angle: float) -> Sprite:
    """Rotate counter-clockwise about the center onto the bounding-box canvas."""
    if not math.isfinite(angle):
        raise ContractError("angle must be finite")
    if sprite.width == 1 and sprite.height == 1:
        return Sprite(rgb=sprite.rgb.copy(), alpha=sprite.alpha.copy())
    angle = angle % 360.0
    if angle % 90.0 == 0.0:
        return _rotate_exact_quarter(sprite, int(angle // 90))

    h, w = sprite.alpha.shape
    theta = math.radians(angle)
    c, s = math.cos(theta), math.sin(theta)
    out_w = int(math.ceil(w * abs(c) + h * abs(s) - 1e-9))
    out_h = int(math.ceil(w * abs(s) + h * abs(c) - 1e-9))

    # Inverse mapping: rotate each output pixel center back into the source.
    ys, xs = np.mgrid[0:out_h, 0:out_w]
    dx = (xs + 0.5) - out_w / 2.0
    dy = (ys + 0.5) - out_h / 2.0
    src_x = c * dx + s * dy + w / 2.0 - 0.5
    src_y = -s * dx + c * dy + h / 2.0 - 0.5

    premul = np.concatenate(
        [sprite.rgb * sprite.alpha[:, :, None], sprite.alpha[:, :, None]], axis=2
    )
    sampled = _bilinear_sample(premul, src_x, src_y)
    alpha = np.clip(sampled[:, :, 3], 0.0, 1.0)
    rgb = np.zeros_like(sampled[:, :, :3])
    covered = alpha > _ALPHA_EPS
    rgb[covered] = sampled[:, :, :3][covered] / alpha[covered, None]
    return Sprite(rgb=np.clip(rgb, 0.0, 1.0), alpha=alpha)


def _bilinear_sample(channels: np.ndarray, src_x: np.ndarray, src_y: np.ndarray):
    """Sample HxWxK ``channels`` at fractional coords; outside contributes 0."""
    h, w = channels.shape[:2]
    x0 = np.floor(src_x).astype(np.int64)
    y0 = np.floor(src_y).astype(np.int64)
    fx = (src_x - x0).astype(np.float32)
    fy = (src_y - y0).astype(np.float32)
    out = np.zeros(src_x.shape + (channels.shape[2],), dtype=np.float32)
    for oy, wy in ((0, 1.0 - fy), (1, fy)):
        for ox, wx in ((0, 1.0 - fx), (1, fx)):
            xi = x0 + ox
            yi = y0 + oy
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            weight = (wx * wy)[valid]
            out[valid] += weight[:, None] * channels[yi[valid], xi[valid]]
    return out


def composite(background: ImagePatch, sprite: Sprite, placement: PlacementSpec) -> ImagePatch:
    """Alpha-blend the (rotated) sprite over the background at the placement."""
    placed = rotate_sprite(sprite, placement.angle) if placement.angle != 0.0 else sprite
    x, y = placement.x, placement.y
    if x < 0 or y < 0 or x + placed.width > background.width or y + placed.height > background.height:
        raise PlacementError(
            f"sprite {placed.width}x{placed.height} at ({x}, {y}) exceeds "
            f"background {background.width}x{background.height}"
        )
    out = background.pixels.copy()
    region = out[y : y + placed.height, x : x + placed.width]
    alpha = placed.alpha[:, :, None]
    if background.channels == 3:
        fg = placed.rgb
    else:
        fg = _luminance(placed.rgb)[:, :, None]
    region[:] = np.clip(alpha * fg + (1.0 - alpha) * region, 0.0, 1.0)
    return ImagePatch(pixels=out)


def enumerate_placements(background: ImagePatch, sprite: Sprite) -> list[PlacementSpec]:
    """All axis-aligned offsets keeping the sprite fully inside the background."""
    max_x = background.width - sprite.width
    max_y = background.height - sprite.height
    if max_x < 0 or max_y < 0:
        return []
    return [
        PlacementSpec(x=x, y=y, angle=0.0)
        for y in range(max_y + 1)
        for x in range(max_x + 1)
    ]


def _luminance(rgb: np.ndarray) -> np.ndarray:
    return (0.299 * rgb[:, :, 0] + 0.587 * rgb[:, :, 1] + 0.114 * rgb[:, :, 2]).astype(np.float32)


# -- PNG I/O --------------------------------------------------------------------


def load_image(path) -> ImagePatch:
    """Load an 8-bit PNG as a [0, 1] float patch (RGB or grayscale)."""
    with Image.open(path) as img:
        if img.mode in ("L", "I;16"):
            arr = np.asarray(img.convert("L"), dtype=np.float32) / 255.0
            return ImagePatch(pixels=arr[:, :, None])
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
        return ImagePatch(pixels=arr)


def load_sprite(path) -> Sprite:
    """Load a PNG as a sprite; an RGBA alpha channel is used directly."""
    with Image.open(path) as img:
        if img.mode == "RGBA" or "A" in img.getbands():
            arr = np.asarray(img.convert("RGBA"), dtype=np.float32) / 255.0
            return Sprite(rgb=arr[:, :, :3], alpha=arr[:, :, 3])
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
        return Sprite(rgb=arr, alpha=np.ones(arr.shape[:2], dtype=np.float32))


def save_image(path, patch: ImagePatch):
    arr = np.clip(np.rint(patch.pixels * 255.0), 0, 255).astype(np.uint8)
    if patch.channels == 1:
        Image.fromarray(arr[:, :, 0], mode="L").save(path, format="PNG")
    else:
        Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def save_sprite(path, sprite: Sprite):
    rgba = np.concatenate([sprite.rgb, sprite.alpha[:, :, None]], axis=2)
    arr = np.clip(np.rint(rgba * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGBA").save(path, format="PNG")
