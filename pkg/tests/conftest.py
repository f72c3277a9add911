"""Shared fixtures: a tiny randomly initialized encoder and a synthetic
dataset tree shaped like the MVTec layout.

The tiny model (32 px input, 8 px patches, two blocks per tower) keeps
structural and property tests fast; nothing here needs pretrained
weights.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image

from fewad.backbone import DualEncoder, ModelDims, TwoTowerModel

TINY_DIMS = ModelDims(
    embed_dim=16,
    image_size=32,
    patch_size=8,
    vision_width=32,
    vision_layers=3,
    vision_heads=2,
    context_length=16,
    vocab_size=64,
    text_width=16,
    text_heads=2,
    text_layers=2,
)


def make_tiny_model(seed: int = 0) -> TwoTowerModel:
    torch.manual_seed(seed)
    return TwoTowerModel(TINY_DIMS)


@pytest.fixture(scope="session")
def tiny_model() -> TwoTowerModel:
    return make_tiny_model()


@pytest.fixture(scope="session")
def tiny_encoder(tiny_model) -> DualEncoder:
    return DualEncoder(tiny_model, "tiny@random0", tap_layers=(1, 2))


def _write_image(path: Path, rng: np.random.Generator, defect: bool) -> np.ndarray:
    """64x64 RGB image; defects get a bright square whose mask is returned."""
    base = rng.integers(90, 110, size=(64, 64, 3), dtype=np.uint8)
    mask = np.zeros((64, 64), dtype=np.uint8)
    if defect:
        top = int(rng.integers(8, 40))
        left = int(rng.integers(8, 40))
        base[top : top + 14, left : left + 14] = 245
        mask[top : top + 14, left : left + 14] = 255
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(base).save(path)
    return mask


def make_dataset_tree(
    root: Path,
    category: str = "widget",
    n_train: int = 6,
    n_good_test: int = 3,
    defects: dict[str, int] | None = None,
    with_masks: bool = True,
    seed: int = 0,
) -> Path:
    defects = defects if defects is not None else {"scratch": 3, "dent_mark": 2}
    rng = np.random.default_rng(seed)
    cat = root / category
    for i in range(n_train):
        _write_image(cat / "train" / "good" / f"{i:03d}.png", rng, defect=False)
    for i in range(n_good_test):
        _write_image(cat / "test" / "good" / f"{i:03d}.png", rng, defect=False)
    for label, count in defects.items():
        for i in range(count):
            mask = _write_image(cat / "test" / label / f"{i:03d}.png", rng, defect=True)
            if with_masks:
                mask_path = cat / "ground_truth" / label / f"{i:03d}_mask.png"
                mask_path.parent.mkdir(parents=True, exist_ok=True)
                Image.fromarray(mask).save(mask_path)
    return root


@pytest.fixture()
def dataset_root(tmp_path) -> Path:
    return make_dataset_tree(tmp_path / "data")


@pytest.fixture(scope="session")
def tiny_checkpoint(tmp_path_factory) -> Path:
    """Checkpoint file for the tiny model, with explicit dims metadata."""
    path = tmp_path_factory.mktemp("ckpt") / "tiny.pt"
    torch.save({"state_dict": make_tiny_model().state_dict(), "dims": TINY_DIMS.__dict__}, path)
    return path


def make_run_config(dataset_root: Path, output_dir: Path, checkpoint: Path, **overrides):
    """RunConfig sized for the tiny model and synthetic dataset."""
    from fewad.config import RunConfig

    data = {
        "dataset_root": str(dataset_root),
        "output_dir": str(output_dir),
        "categories": ["widget"],
        "k": 2,
        "seeds": [0],
        "backbone": {"checkpoint": str(checkpoint), "tap_layers": [1, 2]},
        "train": {"steps": 3},
        "preprocess": {"image_size": 32},
        "score": {"smooth_sigma": 1.0},
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(data.get(key), dict):
            data[key].update(value)
        else:
            data[key] = value
    return RunConfig.model_validate(data)


def unit_vectors(rng: np.random.Generator, count: int, dim: int) -> torch.Tensor:
    vecs = torch.from_numpy(rng.standard_normal((count, dim))).float()
    return vecs / vecs.norm(dim=1, keepdim=True)
