"""Image batches, the built-in toy dataset and the directory adapter."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
from PIL import Image


class DatasetError(ValueError):
    pass


@dataclass
class ImageBatch:
    pixels: torch.Tensor  # [N, C, H, W] in [0, 1]
    labels: torch.Tensor  # [N] int64
    num_classes: int | None = None

    def __post_init__(self):
        if self.pixels.dim() != 4:
            raise DatasetError(f"pixels must be [N,C,H,W], got {tuple(self.pixels.shape)}")
        if self.labels.shape != (self.pixels.shape[0],):
            raise DatasetError("labels length must equal batch size")
        if self.pixels.numel() and (self.pixels.min() < 0 or self.pixels.max() > 1):
            raise DatasetError("pixel values outside [0, 1]")
        if self.num_classes is not None and self.labels.numel():
            if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
                raise DatasetError("label outside [0, Y-1]")

    def __len__(self):
        return self.pixels.shape[0]

    def __getitem__(self, idx) -> "ImageBatch":
        if isinstance(idx, int):
            idx = slice(idx, idx + 1)
        return ImageBatch(self.pixels[idx], self.labels[idx], self.num_classes)

    def with_pixels(self, pixels: torch.Tensor) -> "ImageBatch":
        return ImageBatch(pixels, self.labels, self.num_classes)

    def batches(self, batch_size: int) -> Iterator["ImageBatch"]:
        for start in range(0, len(self), batch_size):
            yield self[start:start + batch_size]

    def of_class(self, c: int) -> "ImageBatch":
        return self[self.labels == c]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.pixels.contiguous().numpy().tobytes())
        h.update(self.labels.contiguous().numpy().tobytes())
        return h.hexdigest()

    @staticmethod
    def concat(parts: list["ImageBatch"]) -> "ImageBatch":
        return ImageBatch(torch.cat([p.pixels for p in parts]),
                          torch.cat([p.labels for p in parts]),
                          parts[0].num_classes)


# ---------------------------------------------------------------------------
# toy dataset

TOY_CLASSES = ("normal", "lesion", "opacity")


def _smooth_field(rng, n, size, n_waves=4):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    field = np.zeros((n, size, size))
    for _ in range(n_waves):
        fx, fy = rng.uniform(0.3, 2.0, (2, n, 1, 1))
        phase = rng.uniform(0, 2 * np.pi, (n, 1, 1))
        amp = rng.uniform(0.5, 1.0, (n, 1, 1))
        field += amp * np.cos(2 * np.pi * (fx * xx + fy * yy) + phase)
    return field / n_waves


def _blobs(rng, n, size, count_range, radius_range, amp_range):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    out = np.zeros((n, size, size))
    for i in range(n):
        for _ in range(rng.integers(*count_range, endpoint=True)):
            cy, cx = rng.uniform(5, size - 5, 2)
            r = rng.uniform(*radius_range)
            out[i] += rng.uniform(*amp_range) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
    return out


def make_toy(n: int, seed: int, size: int = 32, num_classes: int = 3) -> ImageBatch:
    """Synthetic grayscale scans: 0 normal, 1 small bright lesions, 2 diffuse dark opacity.

    Images are quantized to 8 bits so they behave like decoded image files.
    """
    if not 2 <= num_classes <= len(TOY_CLASSES):
        raise DatasetError(f"toy dataset supports 2..{len(TOY_CLASSES)} classes")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2
    vignette = -0.15 * ((yy - c) ** 2 + (xx - c) ** 2) / c ** 2
    img = 0.5 + vignette + 0.06 * _smooth_field(rng, n, size)
    img += rng.normal(0, 0.03, (n, size, size))  # sensor texture

    lesion = labels == 1
    img[lesion] += _blobs(rng, int(lesion.sum()), size, (2, 4), (2.0, 2.8), (0.45, 0.6))
    opaque = labels == 2
    img[opaque] -= _blobs(rng, int(opaque.sum()), size, (1, 2), (4.0, 6.0), (0.28, 0.38))

    img = np.clip(img, 0, 1)
    img = np.round(img * 255) / 255
    pixels = torch.from_numpy(img[:, None].astype(np.float32))
    return ImageBatch(pixels, torch.from_numpy(labels.astype(np.int64)), num_classes)


# ---------------------------------------------------------------------------
# directory adapter

def read_manifest(root: Path, manifest: str = "manifest.txt") -> list[tuple[Path, int]]:
    entries = []
    path = Path(root) / manifest
    if not path.exists():
        raise DatasetError(f"missing manifest {path}")
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 2:
            raise DatasetError(f"{path}:{lineno}: expected '<relative-path> <label>'")
        try:
            label = int(parts[1])
        except ValueError:
            raise DatasetError(f"{path}:{lineno}: label must be an integer") from None
        entries.append((Path(root) / parts[0], label))
    return entries


def load_directory(root, num_classes: int, size: int = 32, channels: int = 1,
                   manifest: str = "manifest.txt") -> ImageBatch:
    mode = {1: "L", 3: "RGB"}.get(channels)
    if mode is None:
        raise DatasetError("directory adapter supports 1 or 3 channels")
    images, labels = [], []
    for path, label in read_manifest(root, manifest):
        if not 0 <= label < num_classes:
            raise DatasetError(f"label {label} outside [0, {num_classes - 1}] for {path}")
        try:
            with Image.open(path) as im:
                im = im.convert(mode).resize((size, size), Image.BILINEAR)
                arr = np.asarray(im, dtype=np.float32) / 255.0
        except (OSError, SyntaxError) as e:
            raise DatasetError(f"corrupt image {path}: {e}") from e
        images.append(arr[None] if channels == 1 else arr.transpose(2, 0, 1))
        labels.append(label)
    pixels = torch.from_numpy(np.stack(images)) if images else torch.zeros(0, channels, size, size)
    return ImageBatch(pixels, torch.tensor(labels, dtype=torch.int64), num_classes)


# ---------------------------------------------------------------------------
# registry

@dataclass
class IngestionConfig:
    batch_size: int = 64
    seed: int = 0
    shuffle: bool = False
    size: int = 32
    num_classes: int = 3
    n_train: int = 6000
    n_test: int = 1500
    root: str | None = None  # directory datasets
    channels: int = 1


def _toy(split, cfg):
    # disjoint generator seeds per split
    if split == "train":
        return make_toy(cfg.n_train, seed=1000 + cfg.seed, size=cfg.size, num_classes=cfg.num_classes)
    return make_toy(cfg.n_test, seed=2000 + cfg.seed, size=cfg.size, num_classes=cfg.num_classes)


def _directory(split, cfg):
    if cfg.root is None:
        raise DatasetError("directory dataset needs config.root")
    root = Path(cfg.root)
    sub = root / split
    return load_directory(sub if sub.is_dir() else root, cfg.num_classes, cfg.size, cfg.channels)


DATASETS = {"toy": _toy, "directory": _directory}


def load_split(name: str, split: str, config: IngestionConfig | None = None) -> ImageBatch:
    cfg = config or IngestionConfig()
    if name not in DATASETS:
        raise DatasetError(f"unknown dataset id {name!r}; known: {sorted(DATASETS)}")
    if split not in ("train", "test"):
        raise DatasetError(f"unknown split {split!r}")
    data = DATASETS[name](split, cfg)
    if cfg.shuffle:
        g = torch.Generator().manual_seed(cfg.seed)
        data = data[torch.randperm(len(data), generator=g)]
    return data


def load_dataset(name: str, split: str, config: IngestionConfig | None = None) -> Iterator[ImageBatch]:
    cfg = config or IngestionConfig()
    yield from load_split(name, split, cfg).batches(cfg.batch_size)
