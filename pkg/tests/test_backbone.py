"""Encoder structure: dual streams, V-V attention, text tower, checkpoints."""

from __future__ import annotations

import pytest
import torch
import torch.nn.functional as F

from fewad.backbone import (
    ARCHITECTURES,
    DualEncoder,
    EncoderConfig,
    FeatureCache,
    ModelDims,
    TwoTowerModel,
    build_encoder,
    load_checkpoint,
)
from fewad.errors import InputError, StructuralError

from conftest import TINY_DIMS


class TestSurgeryPreservation:
    def test_original_stream_bit_identical(self, tiny_model):
        """The surgically modified forward must not perturb the original
        branch: same floating-point op sequence, same bits."""
        torch.manual_seed(3)
        for _ in range(10):
            x = torch.randn(2, 3, 32, 32)
            with torch.no_grad():
                plain = tiny_model.visual(x)
                cls_dual, _, _, _ = tiny_model.visual.forward_dual(x, (1, 2))
            assert torch.equal(plain, cls_dual)

    def test_streams_share_embedding(self, tiny_model):
        """With zero blocks of processing the streams are the same tensor."""
        x = torch.randn(1, 3, 32, 32)
        tokens, _ = tiny_model.visual._embed(x)
        assert tokens is not None  # single embedding feeds both streams


class TestVVAttention:
    def test_row_sums_one(self, tiny_model):
        block = tiny_model.visual.transformer.resblocks[0]
        x = torch.randn(9, 2, TINY_DIMS.vision_width)
        _, weights = block.vv_attention(x, return_weights=True)
        sums = weights.sum(dim=-1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)

    def test_single_token_passthrough(self, tiny_model):
        """One token: the softmax over a single element is 1, so the branch
        reduces to out_proj(V) plus the residual."""
        block = tiny_model.visual.transformer.resblocks[0]
        width = TINY_DIMS.vision_width
        x = torch.randn(1, 1, width)
        z_prev = torch.randn(1, 1, width)
        qkv = F.linear(block.ln_1(x), block.attn.in_proj_weight, block.attn.in_proj_bias)
        expected = block.attn.out_proj(qkv[..., 2 * width :]) + z_prev
        _, z = block.forward_dual(x, z_prev)
        assert torch.allclose(z, expected, atol=1e-6)

    def test_original_output_matches_plain_block(self, tiny_model):
        block = tiny_model.visual.transformer.resblocks[1]
        x = torch.randn(5, 2, TINY_DIMS.vision_width)
        z_ori, _ = block.forward_dual(x, x.clone())
        assert torch.equal(z_ori, block(x))

    def test_shape_mismatch_raises(self, tiny_model):
        block = tiny_model.visual.transformer.resblocks[0]
        x = torch.randn(5, 1, TINY_DIMS.vision_width)
        with pytest.raises(StructuralError):
            block.forward_dual(x, x[:4])

    def test_deterministic(self, tiny_model):
        block = tiny_model.visual.transformer.resblocks[0]
        x = torch.randn(6, 1, TINY_DIMS.vision_width)
        z = torch.randn_like(x)
        first = block.forward_dual(x, z)
        second = block.forward_dual(x, z)
        assert torch.equal(first[0], second[0]) and torch.equal(first[1], second[1])


class TestEncodeImage:
    def test_grid_arithmetic(self, tiny_encoder):
        out = tiny_encoder.encode_image(torch.randn(3, 32, 32))
        assert out.patch_map.shape == (4, 4, TINY_DIMS.embed_dim)
        assert out.grid_hw == (4, 4)

    def test_default_architecture_grid(self):
        dims = ARCHITECTURES["vit-b16-plus-240"]
        assert dims.grid_size == 15  # 240 / 16
        assert dims.grid_size**2 == 225

    def test_unit_norms(self, tiny_encoder):
        out = tiny_encoder.encode_image(torch.randn(3, 32, 32))
        assert abs(out.cls_feature.norm().item() - 1.0) < 1e-5
        patch_norms = out.patch_map.reshape(-1, TINY_DIMS.embed_dim).norm(dim=1)
        assert (patch_norms - 1.0).abs().max().item() < 1e-5

    def test_tap_layers_exact_keys(self, tiny_model):
        encoder = DualEncoder(tiny_model, "tiny@taps", tap_layers=(1, 3))
        out = encoder.encode_image(torch.randn(3, 32, 32))
        assert set(out.layer_taps) == {1, 3}
        assert out.layer_taps[1].shape == (4, 4, TINY_DIMS.vision_width)

    def test_deterministic(self, tiny_encoder):
        image = torch.randn(3, 32, 32)
        first = tiny_encoder.encode_image(image)
        second = tiny_encoder.encode_image(image.clone())
        assert torch.equal(first.cls_feature, second.cls_feature)
        assert torch.equal(first.patch_map, second.patch_map)

    def test_incompatible_size_raises(self, tiny_encoder):
        with pytest.raises(StructuralError):
            tiny_encoder.encode_image(torch.randn(3, 48, 48))


class TestEncodeText:
    def test_unit_norm_and_determinism(self, tiny_encoder):
        torch.manual_seed(11)
        emb = torch.randn(3, 10, TINY_DIMS.text_width)
        eot = torch.tensor([9, 9, 9])
        first = tiny_encoder.encode_text(emb, eot)
        second = tiny_encoder.encode_text(emb.clone(), eot)
        assert torch.equal(first, second)
        assert (first.norm(dim=1) - 1.0).abs().max().item() < 1e-5

    def test_context_length_enforced(self, tiny_encoder):
        emb = torch.randn(1, TINY_DIMS.context_length + 1, TINY_DIMS.text_width)
        with pytest.raises(InputError):
            tiny_encoder.encode_text(emb, torch.tensor([0]))

    def test_gradient_matches_finite_differences(self, tiny_encoder):
        """Differentiability contract: analytic d(output)/d(embedding)
        matches central differences on well-scaled coordinates (fp32)."""
        torch.manual_seed(5)
        emb = torch.randn(1, 8, TINY_DIMS.text_width, requires_grad=True)
        eot = torch.tensor([7])
        out = tiny_encoder.encode_text(emb, eot)
        scalar = out[0, 2]
        grad = torch.autograd.grad(scalar, emb)[0][0]

        flat = grad.reshape(-1)
        top = flat.abs().topk(3).indices
        h = 1e-2
        for idx in top.tolist():
            offset = torch.zeros_like(emb)
            offset.reshape(-1)[idx] = h
            with torch.no_grad():
                hi = tiny_encoder.encode_text(emb + offset, eot)[0, 2].item()
                lo = tiny_encoder.encode_text(emb - offset, eot)[0, 2].item()
            fd = (hi - lo) / (2 * h)
            analytic = flat[idx].item()
            assert abs(fd - analytic) / max(abs(fd), abs(analytic)) < 1e-3


class TestEncoderConfig:
    def test_tap_range_validated(self):
        with pytest.raises(InputError):
            EncoderConfig("x", num_blocks=4, tap_layers=(0,), joint_dim=8, temperature=0.1)
        with pytest.raises(InputError):
            EncoderConfig("x", num_blocks=4, tap_layers=(5,), joint_dim=8, temperature=0.1)

    def test_temperature_positive(self):
        with pytest.raises(InputError):
            EncoderConfig("x", num_blocks=4, tap_layers=(1,), joint_dim=8, temperature=0.0)

    def test_default_temperature_from_logit_scale(self, tiny_model):
        encoder = DualEncoder(tiny_model, "tiny@temp", tap_layers=(1,))
        assert encoder.temperature == pytest.approx(1.0 / tiny_model.logit_scale.exp().item())


class TestCheckpointIO:
    def test_state_dict_is_exactly_the_open_key_set(self, tiny_model):
        """A pretrained checkpoint must load with strict=True, so the
        module may register nothing beyond the canonical key set."""

        def block_keys(prefix: str, layers: int) -> set[str]:
            keys = set()
            for i in range(layers):
                base = f"{prefix}.resblocks.{i}"
                keys |= {
                    f"{base}.attn.in_proj_weight", f"{base}.attn.in_proj_bias",
                    f"{base}.attn.out_proj.weight", f"{base}.attn.out_proj.bias",
                    f"{base}.ln_1.weight", f"{base}.ln_1.bias",
                    f"{base}.ln_2.weight", f"{base}.ln_2.bias",
                    f"{base}.mlp.c_fc.weight", f"{base}.mlp.c_fc.bias",
                    f"{base}.mlp.c_proj.weight", f"{base}.mlp.c_proj.bias",
                }
            return keys

        expected = {
            "logit_scale", "positional_embedding", "text_projection",
            "token_embedding.weight", "ln_final.weight", "ln_final.bias",
            "visual.conv1.weight", "visual.class_embedding",
            "visual.positional_embedding", "visual.proj",
            "visual.ln_pre.weight", "visual.ln_pre.bias",
            "visual.ln_post.weight", "visual.ln_post.bias",
        }
        expected |= block_keys("visual.transformer", TINY_DIMS.vision_layers)
        expected |= block_keys("transformer", TINY_DIMS.text_layers)
        assert set(tiny_model.state_dict()) == expected

    def test_roundtrip_with_explicit_dims(self, tiny_model, tmp_path):
        path = tmp_path / "model.pt"
        torch.save(
            {"state_dict": tiny_model.state_dict(), "dims": TINY_DIMS.__dict__},
            path,
        )
        dims, state = load_checkpoint(path)
        assert dims == TINY_DIMS
        rebuilt = TwoTowerModel(dims)
        rebuilt.load_state_dict(state)
        x = torch.randn(1, 3, 32, 32)
        with torch.no_grad():
            assert torch.equal(rebuilt.visual(x), tiny_model.visual(x))

    def test_dims_inferred_from_bare_state_dict(self, tmp_path):
        torch.manual_seed(0)
        dims = ModelDims(
            embed_dim=32, image_size=32, patch_size=8, vision_width=64,
            vision_layers=2, vision_heads=1, context_length=12, vocab_size=50,
            text_width=64, text_heads=1, text_layers=2,
        )
        model = TwoTowerModel(dims)
        path = tmp_path / "bare.pt"
        torch.save(model.state_dict(), path)
        inferred, _ = load_checkpoint(path)
        assert inferred == dims

    def test_missing_checkpoint_raises(self, tmp_path):
        with pytest.raises(InputError):
            load_checkpoint(tmp_path / "nope.pt")

    def test_build_encoder_from_checkpoint(self, tiny_model, tmp_path):
        path = tmp_path / "model.pt"
        torch.save({"state_dict": tiny_model.state_dict(), "dims": TINY_DIMS.__dict__}, path)
        encoder = build_encoder(checkpoint=path, tap_layers=(1, 2))
        out = encoder.encode_image(torch.randn(3, 32, 32))
        assert out.patch_map.shape == (4, 4, TINY_DIMS.embed_dim)

    def test_unknown_architecture(self):
        with pytest.raises(InputError):
            build_encoder(architecture="does-not-exist")


class TestFeatureCache:
    def test_roundtrip(self, tiny_encoder, tmp_path):
        cache = FeatureCache(tmp_path / "cache", "tiny@random0")
        out = tiny_encoder.encode_image(torch.randn(3, 32, 32))
        cache.put("some/image.png", out)
        loaded = cache.get("some/image.png")
        assert loaded is not None
        assert torch.equal(loaded.cls_feature, out.cls_feature)
        assert torch.equal(loaded.patch_map, out.patch_map)
        assert set(loaded.layer_taps) == set(out.layer_taps)

    def test_miss_returns_none(self, tmp_path):
        cache = FeatureCache(tmp_path / "cache", "tiny@random0")
        assert cache.get("unseen.png") is None

    def test_key_depends_on_architecture(self, tiny_encoder, tmp_path):
        first = FeatureCache(tmp_path / "cache", "arch-a")
        second = FeatureCache(tmp_path / "cache", "arch-b")
        out = tiny_encoder.encode_image(torch.randn(3, 32, 32))
        first.put("img.png", out)
        assert second.get("img.png") is None
