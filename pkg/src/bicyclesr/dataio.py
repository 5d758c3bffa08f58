"""Image I/O (PNG only), seeded random patch cropping, and unpaired dataset
iteration. Real-LR patches are only ever cropped, never rescaled."""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field
from typing import Iterator, List, Optional

import numpy as np
from PIL import Image, UnidentifiedImageError

from .tensor import Tensor


@dataclass
class ImageBuffer:
    """8-bit RGB image plus lossless float [0,1] view."""

    pixels: np.ndarray  # HxWx3 uint8
    colorspace: str = "sRGB"

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3 or self.pixels.dtype != np.uint8:
            raise ValueError(f"ImageBuffer expects HxWx3 uint8, got {self.pixels.shape} {self.pixels.dtype}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def float_data(self) -> np.ndarray:
        return self.pixels.astype(np.float32) / 255.0

    @staticmethod
    def from_float(arr: np.ndarray) -> "ImageBuffer":
        if arr.ndim == 2:
            arr = np.stack([arr] * 3, axis=-1)
        q = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
        return ImageBuffer(q)


def load_image(path: str) -> ImageBuffer:
    if not os.path.exists(path):
        raise FileNotFoundError(f"image not found: {path}")
    if not path.lower().endswith(".png"):
        raise ValueError(f"unsupported container (PNG only): {path}")
    try:
        with Image.open(path) as im:
            rgb = im.convert("RGB")
            return ImageBuffer(np.asarray(rgb, dtype=np.uint8))
    except UnidentifiedImageError as e:
        raise ValueError(f"not a decodable image file: {path}") from e


def save_image(path: str, img: ImageBuffer):
    if not path.lower().endswith(".png"):
        raise ValueError(f"unsupported container (PNG only): {path}")
    Image.fromarray(img.pixels, mode="RGB").save(path, format="PNG")


def random_crop(img: ImageBuffer, h: int, w: int, rng: np.random.Generator) -> ImageBuffer:
    """Uniformly positioned h x w window; never rescales pixel values."""
    if img.height < h or img.width < w:
        raise ValueError(
            f"image {img.height}x{img.width} smaller than requested crop {h}x{w}"
        )
    top = int(rng.integers(0, img.height - h + 1))
    left = int(rng.integers(0, img.width - w + 1))
    return ImageBuffer(img.pixels[top : top + h, left : left + w].copy())


@dataclass
class DatasetManifest:
    """Deterministically ordered file list for one dataset role."""

    role: str  # hr | real_lr | eval_pair
    root: str
    files: List[str] = field(default_factory=list)

    def __post_init__(self):
        if self.role not in ("hr", "real_lr", "eval_pair"):
            raise ValueError(f"unknown dataset role {self.role!r}")
        if len(set(self.files)) != len(self.files):
            raise ValueError("manifest contains duplicate paths")
        self.files = sorted(self.files)

    @staticmethod
    def from_dir(role: str, root: str) -> "DatasetManifest":
        if not os.path.isdir(root):
            raise FileNotFoundError(f"dataset directory not found: {root}")
        files = [f for f in os.listdir(root) if f.lower().endswith(".png")]
        if not files:
            raise ValueError(f"no PNG files in dataset directory: {root}")
        return DatasetManifest(role, root, files)

    @staticmethod
    def from_file(role: str, root: str, manifest_path: str) -> "DatasetManifest":
        """Manifest file: UTF-8, one relative path per line, '#' comments."""
        files = []
        with open(manifest_path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                files.append(line)
        return DatasetManifest(role, root, files)

    def path(self, name: str) -> str:
        return os.path.join(self.root, name)


def to_tensor(images: List[np.ndarray]) -> Tensor:
    """Stack HWC float images into an NCHW tensor."""
    batch = np.stack([img.transpose(2, 0, 1) for img in images]).astype(np.float32)
    return Tensor(batch)


def batch_iterator(
    manifest: DatasetManifest,
    batch_size: int,
    patch: int,
    rng: np.random.Generator,
) -> Iterator[Tensor]:
    """One epoch of seeded random patches; order is a seeded permutation of the
    manifest and the last partial batch is dropped. Images smaller than the
    patch are excluded from the epoch with a warning."""
    usable = []
    for name in manifest.files:
        img = load_image(manifest.path(name))
        if img.height < patch or img.width < patch:
            warnings.warn(
                f"{name}: {img.height}x{img.width} smaller than patch {patch}, excluded"
            )
            continue
        usable.append((name, img))
    if not usable:
        raise ValueError(f"no image in {manifest.root} is at least {patch}x{patch}")
    order = rng.permutation(len(usable))
    batch = []
    for idx in order:
        _, img = usable[idx]
        crop = random_crop(img, patch, patch, rng)
        batch.append(crop.float_data())
        if len(batch) == batch_size:
            yield to_tensor(batch)
            batch = []


class EndlessPatchSampler:
    """Endless stream of seeded patch batches over a manifest (training use).

    Images are decoded once and kept in memory; every batch draws `batch_size`
    images uniformly (with replacement) and takes one random crop from each.
    """

    def __init__(self, manifest: DatasetManifest, batch_size: int, patch: int, seed: int):
        self.rng = np.random.default_rng(seed)
        self.batch_size = batch_size
        self.patch = patch
        self.images = []
        for name in manifest.files:
            img = load_image(manifest.path(name))
            if img.height < patch or img.width < patch:
                warnings.warn(
                    f"{name}: {img.height}x{img.width} smaller than patch {patch}, excluded"
                )
                continue
            self.images.append(img)
        if not self.images:
            raise ValueError(f"no image in {manifest.root} is at least {patch}x{patch}")

    def next_batch(self) -> Tensor:
        picks = self.rng.integers(0, len(self.images), size=self.batch_size)
        crops = [
            random_crop(self.images[i], self.patch, self.patch, self.rng).float_data()
            for i in picks
        ]
        return to_tensor(crops)
