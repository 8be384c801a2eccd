"""Manifest datasets, joint transforms and the synthetic two-domain corpus.

A corpus directory holds ``manifest.csv`` (columns ``image,label,split``,
paths relative to the manifest), ``class_names.txt`` (one name per line,
line number = class id) and the image/label PNGs.  Labels are 8-bit with
255 as the ignore value.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch
from PIL import Image

from famix.encoders import normalize_images
from famix.errors import ConfigurationError
from famix.stats import IGNORE_INDEX, SeedLike, as_rng

log = logging.getLogger(__name__)

DESK_CLASSES = ("road", "building", "vegetation", "sky")


def read_class_names(path) -> list:
    names = [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not names:
        raise ConfigurationError(f"no class names in {path}")
    return names


def write_class_names(names: Sequence[str], path) -> None:
    Path(path).write_text("\n".join(names) + "\n", encoding="utf-8")


@dataclass
class SegmentationSet:
    """An in-memory split: ``images`` float32 ``(N, 3, H, W)`` in [0, 1], ``labels`` uint8 ``(N, H, W)``."""

    images: np.ndarray
    labels: np.ndarray
    name: str = ""

    def __len__(self):
        return len(self.images)


def read_manifest(path) -> list:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"manifest not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or not {"image", "label", "split"} <= set(rows[0]):
        raise ConfigurationError(f"{path}: manifest needs image,label,split columns")
    return rows


def load_split(manifest, split: str) -> SegmentationSet:
    manifest = Path(manifest)
    rows = [r for r in read_manifest(manifest) if r["split"] == split]
    if not rows:
        raise ConfigurationError(f"split {split!r} is empty in {manifest}")
    root = manifest.parent
    images, labels = [], []
    for r in rows:
        img = np.asarray(Image.open(root / r["image"]).convert("RGB"), dtype=np.float32) / 255.0
        lab = np.asarray(Image.open(root / r["label"]), dtype=np.uint8)
        if lab.shape != img.shape[:2]:
            raise ConfigurationError(f"{r['label']}: label size {lab.shape} != image size {img.shape[:2]}")
        images.append(img.transpose(2, 0, 1))
        labels.append(lab)
    return SegmentationSet(np.stack(images), np.stack(labels), split)


def splits_in(manifest) -> list:
    return sorted({r["split"] for r in read_manifest(manifest)})


# transforms


def hflip(image: np.ndarray, label: np.ndarray):
    return image[..., ::-1].copy(), label[..., ::-1].copy()


def color_jitter(image: np.ndarray, rng: np.random.Generator, brightness=0.0, contrast=0.0,
                 saturation=0.0) -> np.ndarray:
    """Random brightness, contrast and saturation factors in ``[1 - s, 1 + s]``."""
    x = image
    if brightness:
        x = x * rng.uniform(1 - brightness, 1 + brightness)
    gray = (0.299 * x[0] + 0.587 * x[1] + 0.114 * x[2])[None]
    if contrast:
        c = rng.uniform(1 - contrast, 1 + contrast)
        x = (x - gray.mean()) * c + gray.mean()
    if saturation:
        s = rng.uniform(1 - saturation, 1 + saturation)
        gray = (0.299 * x[0] + 0.587 * x[1] + 0.114 * x[2])[None]
        x = (x - gray) * s + gray
    return np.clip(x, 0.0, 1.0).astype(np.float32)


@dataclass
class JointTransform:
    """Random crop and horizontal flip applied to image and label together, jitter to the image only."""

    crop: Optional[int] = None
    flip: bool = True
    jitter: tuple = (0.0, 0.0, 0.0)

    def __call__(self, image, label, rng: np.random.Generator):
        h, w = label.shape
        if self.crop and (self.crop < h or self.crop < w):
            top = int(rng.integers(h - self.crop + 1))
            left = int(rng.integers(w - self.crop + 1))
            image = image[:, top:top + self.crop, left:left + self.crop]
            label = label[top:top + self.crop, left:left + self.crop]
        if self.flip and rng.random() < 0.5:
            image, label = hflip(image, label)
        if any(self.jitter):
            image = color_jitter(image, rng, *self.jitter)
        return np.ascontiguousarray(image), np.ascontiguousarray(label)


def train_batches(data: SegmentationSet, batch_size: int, seed: SeedLike,
                  transform: Optional[JointTransform] = None) -> Iterator:
    """Endless seed-ordered stream of ``(images, labels)`` tensors over shuffled epochs."""
    rng = as_rng(seed)
    while True:
        order = rng.permutation(len(data))
        for start in range(0, len(order) - batch_size + 1, batch_size):
            idx = order[start:start + batch_size]
            pairs = [(data.images[i], data.labels[i]) for i in idx]
            if transform is not None:
                pairs = [transform(img, lab, rng) for img, lab in pairs]
            images = torch.from_numpy(np.stack([p[0] for p in pairs]))
            labels = torch.from_numpy(np.stack([p[1] for p in pairs]).astype(np.int64))
            yield normalize_images(images), labels
        if len(order) < batch_size:
            raise ConfigurationError(f"split has {len(order)} images, fewer than batch size {batch_size}")


def eval_batches(data: SegmentationSet, batch_size: int = 16) -> Iterator:
    for start in range(0, len(data), batch_size):
        images = torch.from_numpy(data.images[start:start + batch_size])
        labels = torch.from_numpy(data.labels[start:start + batch_size].astype(np.int64))
        yield normalize_images(images), labels


# synthetic corpus

_SOURCE_COLORS = np.array([
    [0.45, 0.45, 0.45],  # road: grey
    [0.70, 0.35, 0.25],  # building: brick
    [0.25, 0.60, 0.25],  # vegetation: green
    [0.45, 0.65, 0.90],  # sky: light blue
], dtype=np.float32)


def _texture(k: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Class-specific luminance pattern in [0, 1], randomly phased."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    phase = rng.uniform(0, 2 * np.pi)
    if k == 0:  # horizontal stripes
        t = 0.5 + 0.5 * np.sign(np.sin(2 * np.pi * yy / 8 + phase))
    elif k == 1:  # checkerboard
        off = rng.integers(0, 8)
        t = (((xx + off) // 6 + (yy + off) // 6) % 2).astype(np.float32)
    elif k == 2:  # speckle
        t = (rng.random((size, size)) > 0.5).astype(np.float32)
    else:  # smooth vertical ramp
        t = yy / size * 0.6 + 0.2 + 0.05 * np.sin(xx / 9 + phase)
    return t.astype(np.float32)


def _layout(size: int, num_classes: int, rng: np.random.Generator, regions: int = 5) -> np.ndarray:
    """Voronoi label map with a one-pixel ignore seam between cells."""
    pts = rng.uniform(0, size, size=(regions, 2))
    cls = rng.integers(0, num_classes, size=regions)
    cls[: min(regions, num_classes)] = rng.permutation(num_classes)[: min(regions, num_classes)]
    yy, xx = np.mgrid[0:size, 0:size]
    d = (yy[..., None] - pts[:, 0]) ** 2 + (xx[..., None] - pts[:, 1]) ** 2
    cell = d.argmin(-1)
    label = cls[cell].astype(np.uint8)
    seam = np.zeros_like(label, dtype=bool)
    seam[:, 1:] |= label[:, 1:] != label[:, :-1]
    seam[1:, :] |= label[1:, :] != label[:-1, :]
    label[seam] = IGNORE_INDEX
    return label


def render_source(label: np.ndarray, rng: np.random.Generator, num_classes: int = 4) -> np.ndarray:
    size = label.shape[0]
    image = np.zeros((3, size, size), dtype=np.float32)
    fill = np.where(label == IGNORE_INDEX, 0, label)
    for k in range(num_classes):
        tex = _texture(k, size, rng)
        color = _SOURCE_COLORS[k % len(_SOURCE_COLORS)]
        shade = color[:, None, None] * (0.55 + 0.45 * tex[None])
        mask = fill == k
        image[:, mask] = shade[:, mask]
    image += rng.normal(0, 0.02, size=image.shape).astype(np.float32)
    return np.clip(image, 0, 1)


def shift_domain(image: np.ndarray, rng: np.random.Generator, severity: float = 1.0,
                 permute: bool = False) -> np.ndarray:
    """Recolour (per-channel tint, optional channel permutation) and change contrast/brightness.

    ``severity`` scales the tint, contrast and brightness ranges.
    """
    x = image
    if permute:
        perm = rng.permutation(3)
        while np.array_equal(perm, np.arange(3)):
            perm = rng.permutation(3)
        x = x[perm]
    tint = 1 + severity * rng.uniform(-0.4, 0.4, size=(3, 1, 1)).astype(np.float32)
    x = x * tint
    contrast = np.exp(severity * rng.uniform(-0.7, 0.5))
    x = (x - x.mean()) * contrast + x.mean() + severity * rng.uniform(-0.15, 0.15)
    return np.clip(x, 0, 1).astype(np.float32)


def make_synthetic_corpus(out_dir, n_train: int = 64, n_val: int = 16, size: int = 64, seed: int = 0,
                          class_names: Sequence[str] = DESK_CLASSES, severity: float = 1.0,
                          permute: bool = False) -> Path:
    """Write a two-domain toy corpus: ``train``/``val`` in the source look, ``shifted`` recoloured ``val``.

    Returns the manifest path.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    K = len(class_names)
    rows = []

    def save(name, image, label, split):
        Image.fromarray((image.transpose(1, 2, 0) * 255).round().astype(np.uint8)).save(out / "images" / name)
        Image.fromarray(label).save(out / "labels" / name)
        rows.append({"image": f"images/{name}", "label": f"labels/{name}", "split": split})

    for i in range(n_train):
        label = _layout(size, K, rng)
        save(f"train_{i:04d}.png", render_source(label, rng, K), label, "train")
    for i in range(n_val):
        label = _layout(size, K, rng)
        image = render_source(label, rng, K)
        save(f"val_{i:04d}.png", image, label, "val")
        save(f"shifted_{i:04d}.png", shift_domain(image, rng, severity, permute), label, "shifted")
    with open(out / "manifest.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["image", "label", "split"])
        w.writeheader()
        w.writerows(rows)
    write_class_names(class_names, out / "class_names.txt")
    return out / "manifest.csv"
