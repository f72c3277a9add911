"""Frozen two-tower contrastive encoder with a parallel V-V attention branch.

The visual tower runs two streams through the same frozen blocks:

* the *original* stream is the untouched pretrained forward pass; its
  final CLS token (projected to the joint space) is the global image
  feature;
* the *value-value* stream replaces query/key with the value projection
  (attention weights become ``softmax(V V^T * scale)``) and accumulates
  only attention residuals.  Its patch tokens carry the local features
  used for localization.

Both streams start from the same patch-embedding output.  No weight is
ever updated here; prompt parameters live in :mod:`fewad.prompts` and
flow through :meth:`TextTower.forward_embeddings`, which is fully
differentiable with respect to its input embeddings.

State-dict naming follows the de-facto convention of open contrastive
checkpoints (``visual.transformer.resblocks.N.attn.in_proj_weight`` and
friends), so pretrained weights load without key translation.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import InputError, StructuralError
from .tokenizer import BpeTokenizer, HashTokenizer, Tokenizer


@dataclass(frozen=True)
class ModelDims:
    """Static architecture description of one two-tower model."""

    embed_dim: int
    image_size: int
    patch_size: int
    vision_width: int
    vision_layers: int
    vision_heads: int
    context_length: int
    vocab_size: int
    text_width: int
    text_heads: int
    text_layers: int
    activation: str = "gelu"  # "gelu" | "quick_gelu"

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size


# ViT-B/16+ at 240 px: the default backbone family for this package.
ARCHITECTURES: dict[str, ModelDims] = {
    "vit-b16-plus-240": ModelDims(
        embed_dim=640,
        image_size=240,
        patch_size=16,
        vision_width=896,
        vision_layers=12,
        vision_heads=14,
        context_length=77,
        vocab_size=49408,
        text_width=640,
        text_heads=10,
        text_layers=12,
    ),
}


@dataclass(frozen=True)
class EncoderConfig:
    """Resolved encoder configuration exposed to the rest of the pipeline."""

    architecture_id: str
    num_blocks: int
    tap_layers: tuple[int, ...]
    joint_dim: int
    temperature: float

    def __post_init__(self) -> None:
        if not self.tap_layers:
            raise InputError("at least one tap layer is required")
        for layer in self.tap_layers:
            if not 1 <= layer <= self.num_blocks:
                raise InputError(
                    f"tap layer {layer} outside valid range [1, {self.num_blocks}]"
                )
        if self.temperature <= 0:
            raise InputError(f"temperature must be positive, got {self.temperature}")


@dataclass
class DualEncoderOutput:
    """Per-image features from both streams.

    cls_feature: (D,) unit-norm global feature, original stream.
    patch_map: (h, w, D) unit-norm local features, V-V stream final layer.
    layer_taps: tap layer -> (h, w, width) raw intermediate V-V features;
        normalization is deferred to comparison time.
    """

    cls_feature: Tensor
    patch_map: Tensor
    layer_taps: dict[int, Tensor] = field(default_factory=dict)

    @property
    def grid_hw(self) -> tuple[int, int]:
        return self.patch_map.shape[0], self.patch_map.shape[1]


class QuickGELU(nn.Module):
    def forward(self, x: Tensor) -> Tensor:
        return x * torch.sigmoid(1.702 * x)


class ResidualAttentionBlock(nn.Module):
    """One pre-norm transformer block plus the value-value side path."""

    def __init__(self, width: int, heads: int, activation: str = "gelu"):
        super().__init__()
        self.attn = nn.MultiheadAttention(width, heads)
        self.ln_1 = nn.LayerNorm(width)
        self.mlp = nn.Sequential()
        self.mlp.add_module("c_fc", nn.Linear(width, width * 4))
        self.mlp.add_module("gelu", QuickGELU() if activation == "quick_gelu" else nn.GELU())
        self.mlp.add_module("c_proj", nn.Linear(width * 4, width))
        self.ln_2 = nn.LayerNorm(width)
        self.heads = heads

    def _attention(self, x: Tensor, attn_mask: Tensor | None) -> Tensor:
        return self.attn(x, x, x, need_weights=False, attn_mask=attn_mask)[0]

    def forward(self, x: Tensor, attn_mask: Tensor | None = None) -> Tensor:
        x = x + self._attention(self.ln_1(x), attn_mask)
        x = x + self.mlp(self.ln_2(x))
        return x

    def vv_attention(self, x_ori: Tensor, return_weights: bool = False):
        """Value-value attention fed by the original stream.

        The value projection is applied to ``ln_1(x_ori)`` (the same
        input path the frozen attention sublayer sees) and then used as
        query, key, and value.  Only the attention output projection
        follows; the MLP does not participate in this branch.
        """
        seq_len, batch, width = x_ori.shape
        head_dim = width // self.heads
        qkv = F.linear(self.ln_1(x_ori), self.attn.in_proj_weight, self.attn.in_proj_bias)
        v = qkv[..., 2 * width :]
        v = v.reshape(seq_len, batch * self.heads, head_dim).transpose(0, 1)
        weights = torch.softmax(v @ v.transpose(-2, -1) * head_dim**-0.5, dim=-1)
        out = weights @ v
        out = out.transpose(0, 1).reshape(seq_len, batch, width)
        out = self.attn.out_proj(out)
        if return_weights:
            return out, weights
        return out

    def forward_dual(self, z_ori_prev: Tensor, z_prev: Tensor) -> tuple[Tensor, Tensor]:
        """Advance both streams one block: (z_ori, z).

        z_ori is exactly ``forward(z_ori_prev)``; z accumulates only the
        V-V attention residual computed from z_ori_prev.
        """
        if z_ori_prev.shape != z_prev.shape:
            raise StructuralError(
                f"stream shape mismatch: {tuple(z_ori_prev.shape)} vs {tuple(z_prev.shape)}"
            )
        z = z_prev + self.vv_attention(z_ori_prev)
        z_ori = self.forward(z_ori_prev)
        return z_ori, z


class Transformer(nn.Module):
    def __init__(self, width: int, layers: int, heads: int, activation: str = "gelu"):
        super().__init__()
        self.resblocks = nn.ModuleList(
            [ResidualAttentionBlock(width, heads, activation) for _ in range(layers)]
        )

    def forward(self, x: Tensor, attn_mask: Tensor | None = None) -> Tensor:
        for block in self.resblocks:
            x = block(x, attn_mask)
        return x


class VisionTower(nn.Module):
    def __init__(self, dims: ModelDims):
        super().__init__()
        self.dims = dims
        width = dims.vision_width
        self.conv1 = nn.Conv2d(3, width, kernel_size=dims.patch_size, stride=dims.patch_size, bias=False)
        scale = width**-0.5
        self.class_embedding = nn.Parameter(scale * torch.randn(width))
        self.positional_embedding = nn.Parameter(scale * torch.randn(dims.grid_size**2 + 1, width))
        self.ln_pre = nn.LayerNorm(width)
        self.transformer = Transformer(width, dims.vision_layers, dims.vision_heads, dims.activation)
        self.ln_post = nn.LayerNorm(width)
        self.proj = nn.Parameter(scale * torch.randn(width, dims.embed_dim))

    def _embed(self, x: Tensor) -> tuple[Tensor, tuple[int, int]]:
        """Patch-embed an image batch into a (tokens, batch, width) sequence."""
        x = self.conv1(x)
        grid_h, grid_w = x.shape[2], x.shape[3]
        if grid_h * grid_w + 1 != self.positional_embedding.shape[0]:
            raise StructuralError(
                f"input yields {grid_h}x{grid_w} patches but positional embedding "
                f"expects {self.positional_embedding.shape[0] - 1}"
            )
        x = x.flatten(2).permute(0, 2, 1)
        cls = self.class_embedding.to(x.dtype).expand(x.shape[0], 1, -1)
        x = torch.cat([cls, x], dim=1) + self.positional_embedding
        x = self.ln_pre(x)
        return x.permute(1, 0, 2), (grid_h, grid_w)

    def forward(self, x: Tensor) -> Tensor:
        """Unmodified pretrained forward pass; returns the projected CLS."""
        tokens, _ = self._embed(x)
        tokens = self.transformer(tokens)
        tokens = tokens.permute(1, 0, 2)
        return self.ln_post(tokens[:, 0, :]) @ self.proj

    def forward_dual(
        self, x: Tensor, tap_layers: tuple[int, ...]
    ) -> tuple[Tensor, Tensor, dict[int, Tensor], tuple[int, int]]:
        """Run both streams; returns (cls, patch_tokens, taps, grid).

        The original stream goes through the exact op sequence of
        :meth:`forward`; taps are raw V-V stream patch tokens recorded
        after each requested block's residual output (1-indexed).
        """
        tokens, grid = self._embed(x)
        z_ori = tokens
        z = tokens
        taps: dict[int, Tensor] = {}
        for index, block in enumerate(self.transformer.resblocks, start=1):
            z_ori, z = block.forward_dual(z_ori, z)
            if index in tap_layers:
                taps[index] = z[1:].permute(1, 0, 2)  # (batch, patches, width)
        z_ori = z_ori.permute(1, 0, 2)
        z = z.permute(1, 0, 2)
        cls = self.ln_post(z_ori[:, 0, :]) @ self.proj
        patches = self.ln_post(z[:, 1:, :]) @ self.proj
        return cls, patches, taps, grid


class TwoTowerModel(nn.Module):
    """Contrastive image/text model; field names match open checkpoints.

    The text tower's components live directly on this module (not nested
    under a ``text.`` prefix) so pretrained state dicts load strictly.
    """

    def __init__(self, dims: ModelDims):
        super().__init__()
        self.dims = dims
        self.visual = VisionTower(dims)
        width = dims.text_width
        self.token_embedding = nn.Embedding(dims.vocab_size, width)
        self.positional_embedding = nn.Parameter(
            torch.empty(dims.context_length, width).normal_(std=0.01)
        )
        self.transformer = Transformer(width, dims.text_layers, dims.text_heads, dims.activation)
        self.ln_final = nn.LayerNorm(width)
        self.text_projection = nn.Parameter(
            torch.empty(width, dims.embed_dim).normal_(std=width**-0.5)
        )
        self.logit_scale = nn.Parameter(torch.tensor(math.log(1 / 0.07)))

    @property
    def temperature(self) -> float:
        return float(1.0 / self.logit_scale.exp())

    @staticmethod
    def _causal_mask(length: int, dtype: torch.dtype) -> Tensor:
        mask = torch.full((length, length), float("-inf"), dtype=dtype)
        return mask.triu_(1)

    def encode_text_embeddings(self, embeddings: Tensor, eot_indices: Tensor) -> Tensor:
        """Encode pre-built token embeddings to unit-norm joint features.

        embeddings: (batch, seq, width) with seq <= context length.  The
        pass keeps the autograd graph alive so learnable prompt tokens
        can be trained through the frozen weights.
        """
        batch, seq_len, _ = embeddings.shape
        if seq_len > self.dims.context_length:
            raise InputError(
                f"sequence length {seq_len} exceeds text context length "
                f"{self.dims.context_length}"
            )
        x = embeddings + self.positional_embedding[:seq_len]
        x = x.permute(1, 0, 2)
        x = self.transformer(x, self._causal_mask(seq_len, x.dtype))
        x = x.permute(1, 0, 2)
        x = self.ln_final(x)
        feats = x[torch.arange(batch), eot_indices] @ self.text_projection
        return feats / feats.norm(dim=-1, keepdim=True)


def dims_from_state_dict(state: dict[str, Tensor]) -> ModelDims:
    """Infer architecture hyper-parameters from checkpoint tensor shapes."""
    try:
        vision_width = state["visual.conv1.weight"].shape[0]
        patch_size = state["visual.conv1.weight"].shape[-1]
        tokens = state["visual.positional_embedding"].shape[0] - 1
        image_size = int(round(math.sqrt(tokens))) * patch_size
        vision_layers = 1 + max(
            int(k.split(".")[3]) for k in state if k.startswith("visual.transformer.resblocks.")
        )
        text_width = state["ln_final.weight"].shape[0]
        text_layers = 1 + max(
            int(k.split(".")[2])
            for k in state
            if k.startswith("transformer.resblocks.")
        )
        return ModelDims(
            embed_dim=state["text_projection"].shape[1],
            image_size=image_size,
            patch_size=patch_size,
            vision_width=vision_width,
            vision_layers=vision_layers,
            vision_heads=max(1, vision_width // 64),
            context_length=state["positional_embedding"].shape[0],
            vocab_size=state["token_embedding.weight"].shape[0],
            text_width=text_width,
            text_heads=max(1, text_width // 64),
            text_layers=text_layers,
        )
    except KeyError as exc:
        raise InputError(f"checkpoint is missing expected tensor {exc}") from exc


def load_checkpoint(path: str | Path) -> tuple[ModelDims, dict[str, Tensor]]:
    """Read a checkpoint: either a bare state dict (dims inferred from
    tensor shapes, 64-dim heads assumed) or a ``{"state_dict": ...,
    "dims": {...}}`` wrapper with explicit architecture fields."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    explicit_dims = None
    if isinstance(payload, dict) and "state_dict" in payload:
        if "dims" in payload:
            try:
                explicit_dims = ModelDims(**payload["dims"])
            except TypeError as exc:
                raise InputError(f"checkpoint dims block is malformed: {exc}") from exc
        payload = payload["state_dict"]
    # scalar metadata tensors present in some published files are not weights
    metadata_keys = {"input_resolution", "context_length", "vocab_size"}
    state = {
        k.removeprefix("module."): v
        for k, v in payload.items()
        if k not in metadata_keys
    }
    return explicit_dims or dims_from_state_dict(state), state


class FeatureCache:
    """Disk cache of encoded features keyed by (image path, architecture)."""

    VERSION = 1

    def __init__(self, directory: str | Path, architecture_id: str):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.architecture_id = architecture_id

    def _entry(self, image_path: str | Path) -> Path:
        key = hashlib.sha256(f"{self.architecture_id}|{image_path}".encode()).hexdigest()
        return self.directory / f"{key}.pt"

    def get(self, image_path: str | Path) -> DualEncoderOutput | None:
        entry = self._entry(image_path)
        if not entry.exists():
            return None
        payload = torch.load(entry, map_location="cpu", weights_only=True)
        if payload.get("version") != self.VERSION:
            return None
        return DualEncoderOutput(
            cls_feature=payload["cls_feature"],
            patch_map=payload["patch_map"],
            layer_taps={int(k): v for k, v in payload["layer_taps"].items()},
        )

    def put(self, image_path: str | Path, output: DualEncoderOutput) -> None:
        payload = {
            "version": self.VERSION,
            "cls_feature": output.cls_feature,
            "patch_map": output.patch_map,
            "layer_taps": {str(k): v for k, v in output.layer_taps.items()},
        }
        tmp = self._entry(image_path).with_suffix(".tmp")
        torch.save(payload, tmp)
        tmp.replace(self._entry(image_path))


class DualEncoder:
    """Frozen encoder facade: images to dual-stream features, prompts to text features."""

    def __init__(
        self,
        model: TwoTowerModel,
        architecture_id: str,
        tap_layers: tuple[int, ...] = (3, 8),
        temperature: float | None = None,
        tokenizer: Tokenizer | None = None,
        cache: FeatureCache | None = None,
    ):
        model.eval()
        for param in model.parameters():
            param.requires_grad_(False)
        self.model = model
        self.config = EncoderConfig(
            architecture_id=architecture_id,
            num_blocks=model.dims.vision_layers,
            tap_layers=tuple(tap_layers),
            joint_dim=model.dims.embed_dim,
            temperature=temperature if temperature is not None else model.temperature,
        )
        self.tokenizer = tokenizer if tokenizer is not None else HashTokenizer(model.dims.vocab_size)
        self.cache = cache

    @property
    def dims(self) -> ModelDims:
        return self.model.dims

    @property
    def temperature(self) -> float:
        return self.config.temperature

    def encode_image(self, image: Tensor) -> DualEncoderOutput:
        """Encode one preprocessed (3, H, W) image tensor."""
        if image.dim() != 3:
            raise StructuralError(f"expected a (3, H, W) tensor, got shape {tuple(image.shape)}")
        with torch.no_grad():
            cls, patches, taps, (grid_h, grid_w) = self.model.visual.forward_dual(
                image.unsqueeze(0), self.config.tap_layers
            )
        cls = cls[0]
        cls = cls / cls.norm()
        patches = patches[0]
        patches = patches / patches.norm(dim=-1, keepdim=True)
        return DualEncoderOutput(
            cls_feature=cls,
            patch_map=patches.reshape(grid_h, grid_w, -1),
            layer_taps={
                layer: tap[0].reshape(grid_h, grid_w, -1) for layer, tap in taps.items()
            },
        )

    def encode_image_path(self, image_path: str | Path, preprocess_fn) -> DualEncoderOutput:
        """Encode an image file, consulting the feature cache when configured."""
        if self.cache is not None:
            hit = self.cache.get(image_path)
            if hit is not None:
                return hit
        output = self.encode_image(preprocess_fn(image_path))
        if self.cache is not None:
            self.cache.put(image_path, output)
        return output

    def encode_text(self, embeddings: Tensor, eot_indices: Tensor) -> Tensor:
        return self.model.encode_text_embeddings(embeddings, eot_indices)

    def token_embeddings(self, token_ids: list[int]) -> Tensor:
        ids = torch.tensor(token_ids, dtype=torch.long)
        return self.model.token_embedding(ids)


def build_encoder(
    architecture: str = "vit-b16-plus-240",
    checkpoint: str | Path | None = None,
    bpe_vocab: str | Path | None = None,
    tap_layers: tuple[int, ...] = (3, 8),
    temperature: float | None = None,
    cache_dir: str | Path | None = None,
    init_seed: int = 0,
) -> DualEncoder:
    """Construct a frozen DualEncoder from a checkpoint or random init.

    Without a checkpoint the model is randomly initialized (seeded); that
    mode exists for structural tests and smoke runs, not detection quality.
    """
    if checkpoint is not None:
        dims, state = load_checkpoint(checkpoint)
        model = TwoTowerModel(dims)
        model.load_state_dict(state)
        arch_id = f"{architecture}@{hashlib.sha256(str(checkpoint).encode()).hexdigest()[:12]}"
    else:
        if architecture not in ARCHITECTURES:
            raise InputError(
                f"unknown architecture {architecture!r}; known: {sorted(ARCHITECTURES)}"
            )
        torch.manual_seed(init_seed)
        model = TwoTowerModel(ARCHITECTURES[architecture])
        arch_id = f"{architecture}@random{init_seed}"
    tokenizer: Tokenizer
    if bpe_vocab is not None:
        tokenizer = BpeTokenizer(bpe_vocab)
        if tokenizer.vocab_size != model.dims.vocab_size:
            raise InputError(
                f"BPE vocab size {tokenizer.vocab_size} does not match model "
                f"vocab size {model.dims.vocab_size}"
            )
    else:
        tokenizer = HashTokenizer(model.dims.vocab_size)
    cache = None
    if cache_dir is not None:
        # cache identity covers everything that changes the encoded features
        taps = ",".join(str(t) for t in tap_layers)
        cache = FeatureCache(cache_dir, f"{arch_id}|taps={taps}|in={model.dims.image_size}")
    return DualEncoder(
        model,
        architecture_id=arch_id,
        tap_layers=tap_layers,
        temperature=temperature,
        tokenizer=tokenizer,
        cache=cache,
    )
