"""Refiner and discriminator networks plus binary checkpoint serialization.

The refiner is a residual trunk with a global skip connection: the output is
``clamp01(x + trunk(x))``, so a zero-initialized exit layer makes it start as
the exact identity. The discriminator is a strided conv stack whose patch
logit map is averaged and squashed to a single fake-probability per image.
The probability is the probability the input is *refined/synthetic*; the
adversarial losses in ``trainer`` assume exactly this convention.
"""

from __future__ import annotations

import struct

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import (
    CheckpointBadMagicError,
    CheckpointCorruptError,
    CheckpointShapeError,
    CheckpointVersionError,
    ContractError,
    ShapeError,
)

CHECKPOINT_MAGIC = b"SRCK"
CHECKPOINT_VERSION = 1


def _uniform_fan_in(rng, shape, fan_in, dtype):
    s = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-s, s, size=shape).astype(dtype)


class Conv2d:
    """Conv parameters plus the fixed stride/padding they are applied with."""

    def __init__(self, in_ch, out_ch, kernel, stride, padding, rng, dtype, zero_init=False):
        self.stride = stride
        self.padding = padding
        if zero_init:
            w = np.zeros((out_ch, in_ch, kernel, kernel), dtype=dtype)
        else:
            w = _uniform_fan_in(rng, (out_ch, in_ch, kernel, kernel), in_ch * kernel * kernel, dtype)
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros((1, out_ch, 1, 1), dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.w, stride=self.stride, padding=self.padding) + self.b

    def params(self):
        return [self.w, self.b]


class RefinerNet:
    """Image-to-image refiner: entry conv, residual blocks, zero-init exit conv,
    global skip, clamp to [0, 1]."""

    def __init__(self, in_channels=3, base_channels=16, res_blocks=2, seed=0,
                 dtype=np.float32):
        if res_blocks < 1:
            raise ContractError("res_blocks must be >= 1")
        self.in_channels = in_channels
        self.base_channels = base_channels
        self.res_blocks = res_blocks
        rng = np.random.default_rng(seed)
        c = base_channels
        self.entry = Conv2d(in_channels, c, 3, 1, 1, rng, dtype)
        self.blocks = []
        for _ in range(res_blocks):
            conv_a = Conv2d(c, c, 3, 1, 1, rng, dtype)
            conv_b = Conv2d(c, c, 3, 1, 1, rng, dtype)
            self.blocks.append((conv_a, conv_b))
        self.exit = Conv2d(c, in_channels, 3, 1, 1, rng, dtype, zero_init=True)

    def forward(self, x: Tensor) -> Tensor:
        if x.data.ndim != 4 or x.data.shape[1] != self.in_channels:
            raise ShapeError(
                f"refiner expects NCHW with {self.in_channels} channels, got {x.shape}"
            )
        h = ad.leaky_relu(self.entry(x), slope=0.0)
        for conv_a, conv_b in self.blocks:
            h = h + conv_b(ad.leaky_relu(conv_a(h), slope=0.0))
        residual = self.exit(h)
        return ad.clamp01(x + residual)

    def named_params(self):
        named = {"entry.w": self.entry.w, "entry.b": self.entry.b}
        for i, (conv_a, conv_b) in enumerate(self.blocks):
            named[f"block{i}.a.w"] = conv_a.w
            named[f"block{i}.a.b"] = conv_a.b
            named[f"block{i}.b.w"] = conv_b.w
            named[f"block{i}.b.b"] = conv_b.b
        named["exit.w"] = self.exit.w
        named["exit.b"] = self.exit.b
        return named

    def params(self):
        return list(self.named_params().values())


class DiscriminatorNet:
    """Strided conv stack ending in a 1-channel patch logit map.

    The final projection is zero-initialized so the net starts out maximally
    uncertain (probability 0.5 everywhere).
    """

    def __init__(self, in_channels=3, base_channels=16, conv_layers=3, seed=0,
                 dtype=np.float32):
        if conv_layers < 1:
            raise ContractError("conv_layers must be >= 1")
        self.in_channels = in_channels
        self.base_channels = base_channels
        self.conv_layers = conv_layers
        rng = np.random.default_rng(seed)
        self.convs = []
        ch = in_channels
        out = base_channels
        for _ in range(conv_layers):
            self.convs.append(Conv2d(ch, out, 4, 2, 1, rng, dtype))
            ch = out
            out = min(out * 2, base_channels * 8)
        self.proj = Conv2d(ch, 1, 3, 1, 1, rng, dtype, zero_init=True)

    def logits(self, x: Tensor) -> Tensor:
        if x.data.ndim != 4 or x.data.shape[1] != self.in_channels:
            raise ShapeError(
                f"discriminator expects NCHW with {self.in_channels} channels, got {x.shape}"
            )
        h = x
        for conv in self.convs:
            h = ad.leaky_relu(conv(h), slope=0.2)
        return self.proj(h)

    def forward(self, x: Tensor) -> Tensor:
        """Per-image probability that the input is refined/synthetic, shape (B,)."""
        logit_map = self.logits(x)
        return ad.sigmoid(ad.tensor_mean(logit_map, axis=(1, 2, 3)))

    def named_params(self):
        named = {}
        for i, conv in enumerate(self.convs):
            named[f"conv{i}.w"] = conv.w
            named[f"conv{i}.b"] = conv.b
        named["proj.w"] = self.proj.w
        named["proj.b"] = self.proj.b
        return named

    def params(self):
        return list(self.named_params().values())


# -- checkpoint format ---------------------------------------------------------
#
# magic "SRCK" | u32 version=1 | u32 tensor count, then per tensor:
# u32 name length | UTF-8 name | u32 ndim | u32 dims[] | float32 LE data.
# All integers little-endian. Tensors are written sorted by name.


def write_tensors(path, named_arrays: dict):
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(named_arrays)))
        for name in sorted(named_arrays):
            arr = np.ascontiguousarray(named_arrays[name], dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointCorruptError(f"checkpoint truncated while reading {what}")
    return buf


def read_tensors(path) -> dict:
    named = {}
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointBadMagicError(f"bad checkpoint magic {magic!r}")
        version, count = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointVersionError(f"unsupported checkpoint version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4, "ndim"))
            dims = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, "dims"))
            n_values = int(np.prod(dims, dtype=np.int64)) if ndim else 1
            raw = _read_exact(fh, 4 * n_values, f"tensor {name!r} data")
            named[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
        trailing = fh.read(1)
        if trailing:
            raise CheckpointCorruptError("trailing bytes after last tensor")
    return named


def save_checkpoint(path, refiner: RefinerNet, disc: DiscriminatorNet,
                    optimizers: dict | None = None):
    """Serialize both nets (and optionally Adam moments) into one file."""
    named = {}
    named["meta.arch"] = np.array(
        [refiner.in_channels, refiner.base_channels, refiner.res_blocks,
         disc.base_channels, disc.conv_layers],
        dtype=np.float32,
    )
    for name, p in refiner.named_params().items():
        named[f"refiner.{name}"] = p.data
    for name, p in disc.named_params().items():
        named[f"disc.{name}"] = p.data
    if optimizers:
        for tag, opt in optimizers.items():
            if not hasattr(opt, "state_tensors"):
                continue
            for key, arr in opt.state_tensors().items():
                named[f"opt.{tag}.{key}"] = arr
    write_tensors(path, named)


def load_checkpoint(path, dtype=np.float32):
    """Rebuild (refiner, discriminator, raw tensor dict) from a checkpoint."""
    named = read_tensors(path)
    if "meta.arch" not in named:
        raise CheckpointCorruptError("checkpoint is missing the meta.arch record")
    in_ch, base_r, blocks, base_d, layers = (int(round(v)) for v in named["meta.arch"])
    refiner = RefinerNet(in_channels=in_ch, base_channels=base_r, res_blocks=blocks,
                         dtype=dtype)
    disc = DiscriminatorNet(in_channels=in_ch, base_channels=base_d,
                            conv_layers=layers, dtype=dtype)
    for prefix, net in (("refiner", refiner), ("disc", disc)):
        for name, p in net.named_params().items():
            key = f"{prefix}.{name}"
            if key not in named:
                raise CheckpointCorruptError(f"checkpoint is missing tensor {key!r}")
            arr = named[key]
            if arr.shape != p.data.shape:
                raise CheckpointShapeError(
                    f"tensor {key!r} has shape {arr.shape}, architecture wants {p.data.shape}"
                )
            p.data = arr.astype(dtype)
    return refiner, disc, named
