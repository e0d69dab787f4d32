"""Feature sets, the SRFT binary feature-file format, and a built-in
fallback extractor.

The fallback extractor (grayscale, 16x16 area-average downsample, per-vector
z-normalization) lets the entire pipeline run without any external feature
model; an external fc6 exporter can drop in higher-dimensional features via
the same SRFT files because the dimension travels in the header.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    ContractError,
    FeatBadMagicError,
    FeatCorruptError,
    FeatVersionError,
)

SRFT_MAGIC = b"SRFT"
SRFT_VERSION = 1

FALLBACK_SIDE = 16
FALLBACK_DIM = FALLBACK_SIDE * FALLBACK_SIDE
_STD_FLOOR = 1e-8


@dataclass
class FeatureSet:
    """n x d float32 feature rows with a provenance role."""

    role: str
    matrix: np.ndarray
    source: str = "fallback"

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float32)
        if self.matrix.ndim != 2:
            raise ContractError(f"feature matrix must be 2-D, got {self.matrix.shape}")

    @property
    def n(self):
        return self.matrix.shape[0]

    @property
    def d(self):
        return self.matrix.shape[1]


# File layout: magic "SRFT" | u32 version=1 | u32 n | u32 d |
# n*d float32 little-endian values, row-major. Exactly 16 + 4*n*d bytes.


def write_feat(path, feature_set: FeatureSet):
    matrix = np.ascontiguousarray(feature_set.matrix, dtype="<f4")
    n, d = matrix.shape
    with open(path, "wb") as fh:
        fh.write(SRFT_MAGIC)
        fh.write(struct.pack("<III", SRFT_VERSION, n, d))
        fh.write(matrix.tobytes())


def read_feat(path, role: str = "unknown", source: str = "external-fc6") -> FeatureSet:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) < 4 or header[:4] != SRFT_MAGIC:
            raise FeatBadMagicError(f"bad feature-file magic {header[:4]!r}")
        if len(header) < 16:
            raise FeatCorruptError("feature file truncated in header")
        version, n, d = struct.unpack("<III", header[4:16])
        if version != SRFT_VERSION:
            raise FeatVersionError(f"unsupported feature-file version {version}")
        payload = fh.read()
    expected = 4 * n * d
    if len(payload) != expected:
        raise FeatCorruptError(
            f"feature payload is {len(payload)} bytes, header implies {expected}"
        )
    matrix = np.frombuffer(payload, dtype="<f4").reshape(n, d).copy()
    return FeatureSet(role=role, matrix=matrix, source=source)


def _area_average_weights(src: int, dst: int) -> np.ndarray:
    """dst x src weight matrix performing exact box-overlap averaging."""
    weights = np.zeros((dst, src), dtype=np.float64)
    scale = src / dst
    for r in range(dst):
        lo = r * scale
        hi = (r + 1) * scale
        first = int(np.floor(lo))
        last = int(np.ceil(hi))
        for s in range(first, min(last, src)):
            overlap = min(hi, s + 1) - max(lo, s)
            if overlap > 0:
                weights[r, s] = overlap / scale
    return weights


def area_average_resize(gray: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Box-filter resize of a 2-D array to (out_h, out_w)."""
    gray = np.asarray(gray, dtype=np.float64)
    row_w = _area_average_weights(gray.shape[0], out_h)
    col_w = _area_average_weights(gray.shape[1], out_w)
    return row_w @ gray @ col_w.T


def _to_gray(images: np.ndarray) -> np.ndarray:
    if images.shape[1] == 1:
        return images[:, 0]
    return (
        0.299 * images[:, 0] + 0.587 * images[:, 1] + 0.114 * images[:, 2]
    )


def fallback_extract(images, role: str | None = None) -> FeatureSet:
    """Grayscale 16x16 area-average thumbnails, flattened and z-normalized.

    Accepts a ``SampleSet`` or an (N, C, H, W) array. A constant image maps
    to the zero vector (std underflow rule).
    """
    if hasattr(images, "images"):
        role = role or images.role
        images = images.images
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim != 4:
        raise ContractError(f"expected NCHW images, got shape {arr.shape}")
    gray = _to_gray(arr)

    n, h, w = gray.shape
    row_w = _area_average_weights(h, FALLBACK_SIDE)
    col_w = _area_average_weights(w, FALLBACK_SIDE)
    thumbs = np.einsum("rh,nhw,cw->nrc", row_w, gray, col_w)
    flat = thumbs.reshape(n, FALLBACK_DIM)

    mean = flat.mean(axis=1, keepdims=True)
    std = flat.std(axis=1, keepdims=True)
    normed = np.where(std < _STD_FLOOR, 0.0, (flat - mean) / np.maximum(std, _STD_FLOOR))
    return FeatureSet(role=role or "unknown", matrix=normed.astype(np.float32),
                      source="fallback")
