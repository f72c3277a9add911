"""Prompt training: contrastive, anomaly-margin, and alignment losses.

Only the bank's prefix and learned-suffix blocks receive gradients; the
encoder stays frozen.  Each step re-encodes every prompt so prototypes
track the live parameters.  The per-step objective is

    mean_z [ contrastive(z) + margin(z) ] + alignment

where the alignment term (already scaled by its weight) is applied once
per step and the margin/alignment terms can be toggled for ablations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Protocol

import torch
import torch.nn.functional as F
from torch import Tensor

from .errors import InputError, TrainingDivergedError
from .prompts import (
    PromptBank,
    PromptFeature,
    PromptKind,
    Prototypes,
    assemble_embeddings,
    compute_prototypes,
)


@dataclass
class TrainConfig:
    lr: float = 0.002
    momentum: float = 0.9
    weight_decay: float = 0.0005
    align_weight: float = 0.001
    steps: int = 1000
    use_margin: bool = True
    use_align: bool = True

    def __post_init__(self) -> None:
        if self.align_weight < 0:
            raise InputError("align_weight must be >= 0")
        if self.steps < 0:
            raise InputError("steps must be >= 0")


def clip_contrastive_loss(z: Tensor, normal_proto: Tensor, anomaly_features: Tensor,
                          tau: float) -> Tensor:
    """One-positive InfoNCE: the normal prototype against every anomaly feature.

    ``z`` may be a single vector or a (batch, dim) stack; the batch mean
    is returned.  Logits are shifted by their maximum before
    exponentiation, so large 1/tau values stay finite.
    """
    if anomaly_features.numel() == 0:
        raise InputError("contrastive loss needs at least one anomaly feature")
    if z.dim() == 1:
        z = z.unsqueeze(0)
    pos = z @ normal_proto  # (B,)
    neg = z @ anomaly_features.T  # (B, K)
    logits = torch.cat([pos.unsqueeze(1), neg], dim=1) / tau
    shift = logits.max(dim=1, keepdim=True).values.detach()
    logits = logits - shift
    loss = -logits[:, 0] + torch.log(torch.exp(logits).sum(dim=1))
    return loss.mean()


def eam_loss(z: Tensor, normal_unit: Tensor, anomaly_unit: Tensor) -> Tensor:
    """Hinge on the distance gap: normal features must sit closer to the
    normal prototype than to the anomaly prototype (zero margin).

    All inputs are expected unit-norm.  The subgradient at the hinge
    kink is zero.
    """
    if z.dim() == 1:
        z = z.unsqueeze(0)
    d_normal = (z - normal_unit).norm(dim=-1)
    d_anomaly = (z - anomaly_unit).norm(dim=-1)
    return F.relu(d_normal - d_anomaly).mean()


def align_loss(manual_unit: Tensor, learned_unit: Tensor, weight: float) -> Tensor:
    """Squared l2 gap between the manual and learned anomaly means,
    scaled by the alignment weight."""
    return weight * (manual_unit - learned_unit).pow(2).sum()


class PromptFeatureEncoder(Protocol):
    def encode(self, bank: PromptBank) -> list[PromptFeature]: ...


class TokenMeanPromptEncoder:
    """Degenerate text encoder: a prompt's feature is the normalized mean
    of its token embeddings.

    Frozen ids look up a fixed random table; learnable blocks enter the
    mean directly.  Exists for closed-system training checks where the
    real text tower would only obscure the optimization behaviour.
    """

    def __init__(self, vocab_size: int, width: int, seed: int = 0):
        generator = torch.Generator().manual_seed(seed)
        self.table = torch.empty(vocab_size, width).normal_(std=0.02, generator=generator)

    def _embed(self, ids: list[int]) -> Tensor:
        return self.table[torch.tensor(ids, dtype=torch.long)]

    def encode(self, bank: PromptBank) -> list[PromptFeature]:
        out = []
        for prompt in assemble_embeddings(bank, self._embed):
            mean = prompt.embeddings.mean(dim=0)
            out.append(
                PromptFeature(
                    prompt_id=prompt.prompt_id,
                    kind=prompt.kind,
                    feature=mean / mean.norm(),
                )
            )
        return out


@dataclass
class BankTrainResult:
    prototypes: Prototypes
    prompt_features: list[PromptFeature]
    loss_trace: list[float]


@dataclass
class TrainedModel:
    """Frozen outcome of prompt training for one (category, seed) run.

    Two independent banks: the image-level one trained on global
    features, the pixel-level one on patch features.  Either may be
    None when the corresponding branch is ablated away.
    """

    image: BankTrainResult | None
    pixel: BankTrainResult | None
    temperature: float
    config: TrainConfig = field(default_factory=TrainConfig)


def _detach_prototypes(protos: Prototypes) -> Prototypes:
    def det(t: Tensor | None) -> Tensor | None:
        return None if t is None else t.detach().clone()

    return Prototypes(
        normal_raw=det(protos.normal_raw),
        anomaly_raw=det(protos.anomaly_raw),
        manual_raw=det(protos.manual_raw),
        learned_raw=det(protos.learned_raw),
        anomaly_features=det(protos.anomaly_features),
    )


def train_bank(
    bank: PromptBank,
    normal_features: Iterable[Tensor],
    encoder: PromptFeatureEncoder,
    cfg: TrainConfig,
    tau: float,
) -> BankTrainResult:
    """Optimize the bank's learnable blocks against normal visual features.

    The full feature set is one batch per step (k-shot sets are tiny).
    Raises TrainingDivergedError with the step index and loss trace if
    the objective stops being finite.
    """
    feature_list = [f.detach() for f in normal_features]
    if not feature_list:
        raise InputError("training needs at least one normal feature")
    batch = torch.stack(feature_list)

    optimizer = torch.optim.SGD(
        bank.learnable_parameters(),
        lr=cfg.lr,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
    )
    trace: list[float] = []
    for step in range(cfg.steps):
        features = encoder.encode(bank)
        protos = compute_prototypes(features)
        loss = clip_contrastive_loss(batch, protos.normal, protos.anomaly_features, tau)
        if cfg.use_margin:
            loss = loss + eam_loss(batch, protos.normal, protos.anomaly)
        if cfg.use_align and protos.manual is not None and protos.learned is not None:
            loss = loss + align_loss(protos.manual, protos.learned, cfg.align_weight)
        trace.append(float(loss.detach()))
        if not torch.isfinite(loss):
            raise TrainingDivergedError(step, trace)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

    with torch.no_grad():
        features = [
            PromptFeature(f.prompt_id, f.kind, f.feature.detach().clone())
            for f in encoder.encode(bank)
        ]
    return BankTrainResult(
        prototypes=_detach_prototypes(compute_prototypes(features)),
        prompt_features=features,
        loss_trace=trace,
    )
