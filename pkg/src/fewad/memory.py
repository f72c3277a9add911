"""Normal patch-feature memory and the vision-guided score map.

The memory is a flat bag of unit-norm patch vectors per tapped encoder
layer, harvested from the k-shot normal images.  A query patch scores
half its cosine distance to the nearest stored vector; per-layer maps
are averaged into the final vision-guided map.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .backbone import DualEncoderOutput
from .errors import InputError, StructuralError


@dataclass
class FeatureMemory:
    """layer index -> (count, feature_dim) unit-norm rows."""

    layers: dict[int, Tensor]

    def count(self, layer: int) -> int:
        return self.layers[layer].shape[0]


def build_memory(shots: list[DualEncoderOutput]) -> FeatureMemory:
    """Flatten and normalize every tap of every shot; no deduplication."""
    if not shots:
        raise InputError("memory needs at least one normal shot")
    layer_ids = sorted(shots[0].layer_taps)
    if not layer_ids:
        raise StructuralError("shots carry no layer taps")
    layers: dict[int, Tensor] = {}
    for layer in layer_ids:
        rows = []
        for shot in shots:
            if layer not in shot.layer_taps:
                raise StructuralError(f"shot missing tap for layer {layer}")
            tap = shot.layer_taps[layer]
            rows.append(tap.reshape(-1, tap.shape[-1]))
        stacked = torch.cat(rows, dim=0)
        layers[layer] = stacked / stacked.norm(dim=-1, keepdim=True)
    return FeatureMemory(layers=layers)


def vision_score_map(query: DualEncoderOutput, memory: FeatureMemory) -> Tensor:
    """Min-distance score map in [0, 1], averaged over memory layers.

    Per layer: score_ij = min over stored r of (1 - cos(F_ij, r)) / 2,
    comparing raw tap features after normalization in their native
    layer dimension.
    """
    maps = []
    for layer, bank in memory.layers.items():
        if layer not in query.layer_taps:
            raise StructuralError(f"query has no tap for memory layer {layer}")
        tap = query.layer_taps[layer]
        h, w, dim = tap.shape
        if dim != bank.shape[1]:
            raise StructuralError(
                f"layer {layer}: query feature dim {dim} vs memory dim {bank.shape[1]}"
            )
        flat = tap.reshape(-1, dim)
        flat = flat / flat.norm(dim=-1, keepdim=True)
        best_cos = (flat @ bank.T).max(dim=1).values
        maps.append((0.5 * (1.0 - best_cos)).reshape(h, w))
    stacked = torch.stack(maps)
    return stacked.mean(dim=0).clamp_(0.0, 1.0)
