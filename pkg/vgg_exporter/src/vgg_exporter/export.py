"""VGG19 fc6 feature export.

Images are processed in lexicographic filename order, resized to 224x224 and
ImageNet-normalized, and pushed through VGG19 up to the first fully connected
layer (4096-dimensional). Post-ReLU activations are written by default. The
output is an SRFT file (magic "SRFT", u32 version=1, u32 n, u32 d, float32
little-endian row-major payload) plus a sidecar JSON listing the filenames in
row order and any skipped inputs.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SRFT_MAGIC = b"SRFT"
SRFT_VERSION = 1
FEATURE_DIM = 4096

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp"}


class ExportError(Exception):
    pass


@dataclass
class ExportJob:
    image_dir: str
    output_path: str
    batch_size: int = 8
    post_relu: bool = True
    weights: str | None = None
    random_init_seed: int | None = None
    device: str = "cpu"


@dataclass
class ExportResult:
    files: list
    skipped: list = field(default_factory=list)
    n: int = 0
    d: int = FEATURE_DIM


def write_srft(path, matrix: np.ndarray):
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    n, d = matrix.shape
    with open(path, "wb") as fh:
        fh.write(SRFT_MAGIC)
        fh.write(struct.pack("<III", SRFT_VERSION, n, d))
        fh.write(matrix.tobytes())


def build_fc6_model(weights: str | None, random_init_seed: int | None):
    """VGG19 truncated after fc6 (and its ReLU, applied separately).

    Weight resolution order: an explicit state-dict path, then torchvision's
    pretrained download/cache. ``random_init_seed`` opts into a seeded random
    initialization instead, for environments with no weight access; features
    from such a model are only useful for plumbing tests.
    """
    import torch
    from torchvision import models

    if random_init_seed is not None:
        torch.manual_seed(random_init_seed)
        net = models.vgg19(weights=None)
    elif weights is not None:
        net = models.vgg19(weights=None)
        state = torch.load(weights, map_location="cpu", weights_only=True)
        net.load_state_dict(state)
    else:
        try:
            net = models.vgg19(weights=models.VGG19_Weights.IMAGENET1K_V1)
        except Exception as exc:
            raise ExportError(
                "pretrained VGG19 weights are unavailable (no network access?); "
                "pass --weights PATH or use --random-init for plumbing tests"
            ) from exc

    fc6 = net.classifier[0]

    class Fc6(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.features = net.features
            self.avgpool = net.avgpool
            self.fc6 = fc6

        def forward(self, x):
            x = self.features(x)
            x = self.avgpool(x)
            return self.fc6(torch.flatten(x, 1))

    model = Fc6()
    model.eval()
    return model


def list_images(directory) -> list:
    directory = Path(directory)
    if not directory.is_dir():
        raise ExportError(f"not a directory: {directory}")
    return sorted(
        p for p in directory.iterdir()
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
    )


def load_image_tensor(path):
    import torch
    from PIL import Image

    with Image.open(path) as img:
        rgb = img.convert("RGB").resize((224, 224), Image.BILINEAR)
    arr = np.asarray(rgb, dtype=np.float32) / 255.0
    arr = (arr - np.asarray(IMAGENET_MEAN, np.float32)) / np.asarray(IMAGENET_STD, np.float32)
    return torch.from_numpy(arr.transpose(2, 0, 1).copy())


def export_features(job: ExportJob) -> ExportResult:
    import torch

    paths = list_images(job.image_dir)
    if not paths:
        raise ExportError(f"no images found in {job.image_dir}")

    tensors, kept, skipped = [], [], []
    for path in paths:
        try:
            tensors.append(load_image_tensor(path))
            kept.append(path.name)
        except Exception as exc:  # undecodable input: warn, record, continue
            print(f"warning: skipping {path.name}: {exc}")
            skipped.append(path.name)
    if not tensors:
        raise ExportError(f"no decodable images in {job.image_dir}")

    model = build_fc6_model(job.weights, job.random_init_seed)
    device = torch.device(job.device)
    model.to(device)

    rows = []
    with torch.no_grad():
        for start in range(0, len(tensors), job.batch_size):
            batch = torch.stack(tensors[start : start + job.batch_size]).to(device)
            out = model(batch)
            if job.post_relu:
                out = torch.relu(out)
            rows.append(out.cpu().numpy().astype(np.float32))
    matrix = np.concatenate(rows, axis=0)

    write_srft(job.output_path, matrix)
    sidecar = {
        "files": kept,
        "skipped": skipped,
        "layer": "fc6",
        "post_relu": job.post_relu,
        "n": int(matrix.shape[0]),
        "d": int(matrix.shape[1]),
    }
    sidecar_path = Path(job.output_path).with_suffix(".json")
    with open(sidecar_path, "w") as fh:
        json.dump(sidecar, fh, indent=2)
        fh.write("\n")
    return ExportResult(files=kept, skipped=skipped, n=matrix.shape[0], d=matrix.shape[1])
