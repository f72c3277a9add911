"""Dataset ingestion (MVTec/VisA directory layout) and preprocessing.

Expected tree per category::

    <root>/<category>/train/good/*.png
    <root>/<category>/test/<defect or good>/*.png
    <root>/<category>/ground_truth/<defect>/<stem>_mask.png

All file listings are lexicographically sorted so scans, shot sampling,
and downstream manifests are reproducible from (tree, seed) alone.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import Tensor

from .errors import InputError

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}

# channel statistics of the pretraining corpus, applied after scaling to [0, 1]
CHANNEL_MEAN = (0.48145466, 0.4578275, 0.40821073)
CHANNEL_STD = (0.26862954, 0.26130258, 0.27577711)


@dataclass(frozen=True)
class PreprocessSpec:
    """Bicubic short-edge resize, center crop to square, standardize."""

    image_size: int = 240
    mean: tuple[float, float, float] = CHANNEL_MEAN
    std: tuple[float, float, float] = CHANNEL_STD


@dataclass
class TestItem:
    path: Path
    is_anomaly: bool
    label: str
    mask_path: Path | None = None


@dataclass
class CategorySpec:
    name: str
    root: Path
    train_normals: list[Path]
    test_items: list[TestItem]
    anomaly_labels: list[str] = field(default_factory=list)


def _list_images(directory: Path) -> list[Path]:
    return sorted(
        p for p in directory.iterdir()
        if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
    )


def _find_mask(ground_truth: Path, label: str, image: Path) -> Path | None:
    label_dir = ground_truth / label
    if not label_dir.is_dir():
        return None
    for candidate in (
        label_dir / f"{image.stem}_mask{image.suffix}",
        label_dir / f"{image.stem}_mask.png",
        label_dir / f"{image.stem}{image.suffix}",
        label_dir / f"{image.stem}.png",
    ):
        if candidate.exists():
            return candidate
    return None


def scan_category(root: str | Path, name: str) -> CategorySpec:
    """Scan one category tree into a deterministic CategorySpec.

    Anomalous test images lacking a mask while a ground-truth directory
    exists are kept for image-level evaluation but flagged with a
    warning; they carry no mask and are excluded from pixel metrics.
    """
    root = Path(root) / name
    train_dir = root / "train" / "good"
    if not train_dir.is_dir():
        raise InputError(f"missing train/good directory under {root}")
    train_normals = _list_images(train_dir)
    if not train_normals:
        raise InputError(f"no training images in {train_dir}")

    test_dir = root / "test"
    if not test_dir.is_dir():
        raise InputError(f"missing test directory under {root}")
    label_dirs = sorted(d for d in test_dir.iterdir() if d.is_dir())
    if not label_dirs or not any(_list_images(d) for d in label_dirs):
        raise InputError(f"test directory {test_dir} contains no images")

    ground_truth = root / "ground_truth"
    test_items: list[TestItem] = []
    anomaly_labels: list[str] = []
    for label_dir in label_dirs:
        label = label_dir.name
        is_anomaly = label != "good"
        if is_anomaly:
            anomaly_labels.append(label)
        for image in _list_images(label_dir):
            mask = _find_mask(ground_truth, label, image) if is_anomaly else None
            if is_anomaly and mask is None and ground_truth.is_dir():
                warnings.warn(
                    f"anomalous test image {image} has no mask; "
                    "excluded from pixel-level metrics",
                    stacklevel=2,
                )
            test_items.append(
                TestItem(path=image, is_anomaly=is_anomaly, label=label, mask_path=mask)
            )
    return CategorySpec(
        name=name,
        root=root,
        train_normals=train_normals,
        test_items=test_items,
        anomaly_labels=anomaly_labels,
    )


def scan_dataset(root: str | Path) -> list[str]:
    """Category names under a dataset root (any directory with train/good)."""
    root = Path(root)
    if not root.is_dir():
        raise InputError(f"dataset root not found: {root}")
    names = sorted(
        d.name for d in root.iterdir() if (d / "train" / "good").is_dir()
    )
    if not names:
        raise InputError(f"no categories found under {root}")
    return names


def _resize_short_edge(image: Image.Image, target: int, resample: int) -> Image.Image:
    width, height = image.size
    scale = target / min(width, height)
    new_size = (max(target, round(width * scale)), max(target, round(height * scale)))
    return image.resize(new_size, resample)


def _center_crop(image: Image.Image, size: int) -> Image.Image:
    width, height = image.size
    left = (width - size) // 2
    top = (height - size) // 2
    return image.crop((left, top, left + size, top + size))


def preprocess(path: str | Path, spec: PreprocessSpec = PreprocessSpec()) -> Tensor:
    """Decode, resize (bicubic), center-crop, and standardize an image.

    Returns a float32 (3, S, S) tensor with S = spec.image_size.
    """
    try:
        image = Image.open(path).convert("RGB")
    except Exception as exc:
        raise InputError(f"cannot decode image {path}: {exc}") from exc
    image = _resize_short_edge(image, spec.image_size, Image.BICUBIC)
    image = _center_crop(image, spec.image_size)
    array = np.asarray(image, dtype=np.float32) / 255.0
    mean = np.asarray(spec.mean, dtype=np.float32)
    std = np.asarray(spec.std, dtype=np.float32)
    array = (array - mean) / std
    return torch.from_numpy(array).permute(2, 0, 1).contiguous()


def preprocess_mask(path: str | Path, spec: PreprocessSpec = PreprocessSpec()) -> Tensor:
    """Load a binary mask with the image's geometry but nearest-neighbor
    resampling, binarized at 0.5.  Returns a float32 (S, S) tensor in {0, 1}."""
    try:
        mask = Image.open(path).convert("L")
    except Exception as exc:
        raise InputError(f"cannot decode mask {path}: {exc}") from exc
    mask = _resize_short_edge(mask, spec.image_size, Image.NEAREST)
    mask = _center_crop(mask, spec.image_size)
    array = (np.asarray(mask, dtype=np.float32) / 255.0) > 0.5
    return torch.from_numpy(array.astype(np.float32))


def sample_k_shot(spec: CategorySpec, k: int, seed: int) -> list[Path]:
    """Uniform sample of k training normals without replacement,
    deterministic per (seed, sorted listing); output keeps listing order."""
    if k < 1:
        raise InputError(f"k must be >= 1, got {k}")
    if k > len(spec.train_normals):
        raise InputError(
            f"requested {k} shots but category {spec.name!r} has only "
            f"{len(spec.train_normals)} training normals"
        )
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(spec.train_normals), size=k, replace=False)
    return [spec.train_normals[i] for i in sorted(chosen.tolist())]
