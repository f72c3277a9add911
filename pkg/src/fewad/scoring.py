"""Prompt-guided scoring, harmonic fusion, and final score assembly.

Score orientation: everything here follows "larger means more
anomalous".  The prompt score is therefore the anomaly side of the
two-way softmax between the normal and anomaly prototypes; the vision
map already has that orientation by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import Tensor

from .backbone import DualEncoderOutput
from .errors import InputError, StructuralError
from .memory import FeatureMemory, vision_score_map
from .prompts import Prototypes
from .training import TrainedModel

FUSE_EPS = 1e-12


@dataclass
class ScoreBundle:
    """Scores for one query image with branch provenance.

    prompt_* fields are None when prompt scoring is disabled, vision_map
    is None when the memory branch is disabled.  pixel_map is always at
    the preprocessed image resolution.
    """

    image_score: float
    pixel_map: Tensor
    prompt_image_score: float | None
    prompt_map: Tensor | None
    vision_map: Tensor | None
    provenance: str  # "fused" | "prompt-only" | "vision-only"


def prompt_score(z: Tensor, protos: Prototypes, tau: float) -> Tensor:
    """Anomaly probability of one feature under the two-way prototype softmax."""
    logits = torch.stack([z @ protos.normal, z @ protos.anomaly]) / tau
    logits = logits - logits.max()
    expd = torch.exp(logits)
    return expd[1] / (expd[0] + expd[1])


def prompt_score_map(patch_map: Tensor, protos: Prototypes, tau: float) -> Tensor:
    """Cell-wise prompt score over a (h, w, dim) unit-norm feature grid."""
    h, w, dim = patch_map.shape
    flat = patch_map.reshape(-1, dim)
    logits = torch.stack([flat @ protos.normal, flat @ protos.anomaly], dim=1) / tau
    logits = logits - logits.max(dim=1, keepdim=True).values
    expd = torch.exp(logits)
    return (expd[:, 1] / expd.sum(dim=1)).reshape(h, w)


def fuse(a: Tensor | float, b: Tensor | float) -> Tensor:
    """Harmonic fusion a*b/(a+b), biased toward the smaller input.

    The epsilon in the denominator defines the limit at zero: any zero
    input yields exactly zero, and fuse(x, y) <= min(x, y) holds for all
    nonnegative inputs.
    """
    a = _as_float_tensor(a)
    b = _as_float_tensor(b)
    if a.shape != b.shape:
        raise StructuralError(f"fuse shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return a * b / (a + b + FUSE_EPS)


def _as_float_tensor(x: Tensor | float) -> Tensor:
    if isinstance(x, Tensor):
        return x if x.dtype.is_floating_point else x.to(torch.get_default_dtype())
    return torch.as_tensor(x, dtype=torch.float64)


def gaussian_kernel1d(sigma: float, max_radius: int | None = None) -> Tensor:
    radius = max(1, int(math.ceil(4.0 * sigma)))
    if max_radius is not None:
        radius = min(radius, max_radius)
    x = torch.arange(-radius, radius + 1, dtype=torch.get_default_dtype())
    kernel = torch.exp(-0.5 * (x / sigma) ** 2)
    return kernel / kernel.sum()


def upsample_and_smooth(grid: Tensor, out_size: int, sigma: float) -> Tensor:
    """Bilinear upsample to (out_size, out_size) then separable Gaussian blur.

    The kernel is normalized and the borders reflected, so values stay
    inside the input range; [0, 1] maps remain [0, 1] maps.
    """
    x = grid.unsqueeze(0).unsqueeze(0)
    x = F.interpolate(x, size=(out_size, out_size), mode="bilinear", align_corners=False)
    if sigma > 0:
        # reflect padding requires the kernel radius to stay below the map size
        kernel = gaussian_kernel1d(sigma, max_radius=out_size - 1).to(x.dtype)
        pad = kernel.numel() // 2
        x = F.pad(x, (pad, pad, 0, 0), mode="reflect")
        x = F.conv2d(x, kernel.reshape(1, 1, 1, -1))
        x = F.pad(x, (0, 0, pad, pad), mode="reflect")
        x = F.conv2d(x, kernel.reshape(1, 1, -1, 1))
    return x[0, 0].clamp_(0.0, 1.0)


def score_image(
    query: DualEncoderOutput,
    model: TrainedModel | None,
    memory: FeatureMemory | None,
    out_size: int,
    smooth_sigma: float = 4.0,
) -> ScoreBundle:
    """Score one query against the trained prototypes and/or feature memory.

    With both branches available the pixel map is the smoothed upsampled
    harmonic fusion of the vision and prompt maps, and the image score
    fuses the vision map's peak with the prompt image score.  Single
    branches pass through unfused.
    """
    has_prompts = model is not None and model.image is not None and model.pixel is not None
    if not has_prompts and memory is None:
        raise InputError("scoring needs prompt prototypes, a feature memory, or both")

    vision = vision_score_map(query, memory) if memory is not None else None
    if has_prompts:
        s_prompt = prompt_score(query.cls_feature, model.image.prototypes, model.temperature)
        m_prompt = prompt_score_map(query.patch_map, model.pixel.prototypes, model.temperature)
    else:
        s_prompt = None
        m_prompt = None

    if vision is not None and m_prompt is not None:
        pixel = fuse(vision, m_prompt)
        image_score = fuse(vision.max(), s_prompt)
        provenance = "fused"
    elif m_prompt is not None:
        pixel = m_prompt
        image_score = s_prompt
        provenance = "prompt-only"
    else:
        pixel = vision
        image_score = vision.max()
        provenance = "vision-only"

    return ScoreBundle(
        image_score=float(image_score),
        pixel_map=upsample_and_smooth(pixel, out_size, smooth_sigma),
        prompt_image_score=None if s_prompt is None else float(s_prompt),
        prompt_map=m_prompt,
        vision_map=vision,
        provenance=provenance,
    )


# --- heatmap export ---------------------------------------------------------

_COLOR_STOPS = [(0.0, (0, 0, 96)), (0.5, (255, 64, 0)), (1.0, (255, 255, 0))]


def _colorize(scores: np.ndarray) -> np.ndarray:
    out = np.zeros((*scores.shape, 3), dtype=np.float64)
    for (lo, lo_rgb), (hi, hi_rgb) in zip(_COLOR_STOPS, _COLOR_STOPS[1:]):
        span = (scores >= lo) & (scores <= hi)
        t = (scores[span] - lo) / (hi - lo)
        for c in range(3):
            out[..., c][span] = lo_rgb[c] + t * (hi_rgb[c] - lo_rgb[c])
    return out.round().astype(np.uint8)


def save_heatmap(pixel_map: Tensor, path: str | Path) -> None:
    """Write a 16-bit grayscale PNG, linear mapping of [0, 1]."""
    arr = (pixel_map.detach().cpu().numpy().clip(0.0, 1.0) * 65535.0).round().astype(np.uint16)
    image = Image.fromarray(arr)  # uint16 array maps to 16-bit grayscale
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    image.save(path)


def save_overlay(pixel_map: Tensor, base_image: Image.Image, path: str | Path,
                 alpha: float = 0.5) -> None:
    """Blend a colorized heatmap over the (resized) source image."""
    scores = pixel_map.detach().cpu().numpy().clip(0.0, 1.0)
    heat = _colorize(scores)
    base = base_image.convert("RGB").resize(scores.shape[::-1], Image.BILINEAR)
    blended = (np.asarray(base, dtype=np.float64) * (1 - alpha) + heat * alpha).round()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(blended.astype(np.uint8)).save(path)
