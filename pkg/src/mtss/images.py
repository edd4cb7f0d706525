"""Image file I/O and conversion to model input tensors."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from .schema import DatasetManifest


def load_image(path) -> np.ndarray:
    """Decode an image file to an H x W x 3 float32 array in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return arr.astype(np.float32) / 255.0


def save_image(image: np.ndarray, path) -> None:
    """Write a float [0, 1] H x W x 3 array as a lossless 8-bit PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG", compress_level=6)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def load_manifest_images(manifest: DatasetManifest) -> np.ndarray:
    """Stack every record's image into an N x H x W x 3 uint8 array, in record order."""
    arrays = []
    for rec in manifest.records:
        with Image.open(manifest.image_file(rec)) as im:
            arrays.append(np.asarray(im.convert("RGB"), dtype=np.uint8))
    if not arrays:
        return np.zeros((0, 0, 0, 3), dtype=np.uint8)
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"images in manifest have mixed sizes: {sorted(shapes)}")
    return np.stack(arrays)


def to_tensor(images: np.ndarray | Sequence[np.ndarray]) -> torch.Tensor:
    """Convert HWC images (uint8 or float in [0, 1]) to an NCHW float32 tensor.

    A single H x W x 3 image becomes a batch of one.
    """
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValueError(f"expected (N,) H x W x 3 images, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        t = torch.from_numpy(arr.astype(np.float32) / 255.0)
    else:
        t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))
    return t.permute(0, 3, 1, 2).contiguous()
