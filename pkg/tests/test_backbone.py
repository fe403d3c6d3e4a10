import dataclasses

import numpy as np
import pytest
import torch

from forgelab.backbone import (
    InjectionViT,
    load_checkpoint,
    parameter_partition,
    save_checkpoint,
)
from forgelab.config import BackboneConfig


class TestConfigValidation:
    def test_indivisible_image_rejected(self):
        with pytest.raises(ValueError):
            BackboneConfig(image_size=64, patch_size=7, embed_dim=32,
                           num_layers=4, num_heads=2)

    def test_indivisible_heads_rejected(self):
        with pytest.raises(ValueError):
            BackboneConfig(image_size=64, patch_size=8, embed_dim=30,
                           num_layers=4, num_heads=4)

    def test_too_shallow_rejected(self):
        with pytest.raises(ValueError):
            BackboneConfig(image_size=64, patch_size=8, embed_dim=32,
                           num_layers=2, num_heads=2)


class TestPatchEmbedding:
    def test_64px_patch8_token_count(self):
        config = BackboneConfig(image_size=64, patch_size=8, embed_dim=64,
                                num_layers=4, num_heads=4, mlp_ratio=2.0)
        model = InjectionViT(config)
        features = model.embed(torch.rand(2, 64, 64, 3))
        assert features.tokens.shape == (2, 1 + 64, 64)
        assert features.layer_index == 0

    def test_224px_patch16_token_count(self):
        config = BackboneConfig(image_size=224, patch_size=16, embed_dim=16,
                                num_layers=3, num_heads=2, mlp_ratio=1.0)
        model = InjectionViT(config)
        features = model.embed(torch.rand(1, 224, 224, 3))
        assert features.tokens.shape == (1, 1 + 196, 16)

    def test_wrong_size_rejected(self, tiny_config):
        model = InjectionViT(tiny_config)
        with pytest.raises(ValueError):
            model.embed(torch.rand(1, 32, 31, 3))


class TestForward:
    def test_zero_injection_identity(self, tiny_config):
        for seed in range(5):
            torch.manual_seed(seed)
            model = InjectionViT(tiny_config)
            images = torch.rand(3, 32, 32, 3)
            base = model(images, mode="baseline")
            injected = model(images, mode="injected")
            assert (base.logits - injected.logits).abs().max() <= 1e-6

    def test_correlation_shapes(self, tiny_config):
        model = InjectionViT(tiny_config)
        out = model(torch.rand(2, 32, 32, 3), mode="injected")
        assert len(out.correlations) == tiny_config.num_layers
        t = tiny_config.num_tokens
        for index, corr in enumerate(out.correlations):
            assert corr.matrix.shape == (2, tiny_config.num_heads, t, t)
            assert corr.layer_index == index

    def test_baseline_mode_collects_no_correlations(self, tiny_config):
        model = InjectionViT(tiny_config)
        out = model(torch.rand(1, 32, 32, 3), mode="baseline")
        assert out.correlations == []

    def test_deterministic_logits(self, tiny_config):
        model = InjectionViT(tiny_config)
        images = torch.rand(2, 32, 32, 3)
        first = model(images, mode="injected").logits
        second = model(images, mode="injected").logits
        assert torch.equal(first, second)

    def test_unknown_mode_rejected(self, tiny_config):
        model = InjectionViT(tiny_config)
        with pytest.raises(ValueError):
            model(torch.rand(1, 32, 32, 3), mode="hybrid")

    def test_localize_without_branch_rejected(self, tiny_config):
        model = InjectionViT(tiny_config)
        with pytest.raises(ValueError):
            model(torch.rand(1, 32, 32, 3), mode="injected", localize=True)

    def test_nonfinite_activations_name_the_layer(self, tiny_config):
        model = InjectionViT(tiny_config)
        with torch.no_grad():
            model.blocks[2].mlp[2].bias.fill_(float("nan"))
        with pytest.raises(FloatingPointError, match="layer 2"):
            model(torch.rand(1, 32, 32, 3), mode="injected")

    def test_token_count_invariant_across_layers(self, tiny_config):
        model = InjectionViT(tiny_config)
        out = model(torch.rand(2, 32, 32, 3), mode="injected")
        t = tiny_config.num_tokens
        assert out.features.tokens.shape == (2, t, tiny_config.embed_dim)
        assert all(c.matrix.shape[-1] == t for c in out.correlations)


class TestParameterPartition:
    def test_one_knowledge_query_per_layer(self, tiny_config):
        model = InjectionViT(tiny_config)
        partition = parameter_partition(model)
        qbar = [n for n in partition.trainable if "w_qbar" in n]
        assert len(qbar) == tiny_config.num_layers

    def test_class_token_and_norms_trainable(self, tiny_config):
        model = InjectionViT(tiny_config)
        partition = parameter_partition(model)
        assert "cls_token" in partition.trainable
        norm_names = [n for n, _ in model.named_parameters() if "norm" in n]
        assert norm_names
        assert all(n in partition.trainable for n in norm_names)

    def test_classification_patch_embed_frozen(self, tiny_config):
        partition = parameter_partition(InjectionViT(tiny_config))
        assert "patch_embed.proj.weight" in partition.frozen
        assert "patch_embed.proj.bias" in partition.frozen
        assert "pos_embed" in partition.frozen

    def test_partition_covers_everything_disjointly(self, tiny_config):
        model = InjectionViT(tiny_config, with_localization=True)
        partition = parameter_partition(model)
        names = {n for n, _ in model.named_parameters()}
        assert partition.trainable | partition.frozen == names
        assert not partition.trainable & partition.frozen

    def test_localization_branch_trainable(self, tiny_config):
        partition = parameter_partition(InjectionViT(tiny_config, with_localization=True))
        loc = [n for n in partition.trainable if n.startswith("localization.")]
        assert any("patch_embed" in n for n in loc)
        assert any("w_kbar" in n for n in loc)
        assert any("head" in n for n in loc)

    def test_unknown_parameter_rejected(self, tiny_config):
        model = InjectionViT(tiny_config)
        model.register_parameter("mystery", torch.nn.Parameter(torch.zeros(3)))
        with pytest.raises(ValueError, match="mystery"):
            parameter_partition(model)

    def test_frozen_parameters_receive_no_gradient(self, tiny_config):
        model = InjectionViT(tiny_config)
        model.freeze_for_injection()
        out = model(torch.rand(2, 32, 32, 3), mode="injected")
        out.logits.sum().backward()
        partition = parameter_partition(model)
        for name, p in model.named_parameters():
            if name in partition.frozen:
                assert p.grad is None


class TestCheckpoint:
    def test_round_trip(self, tiny_config, tmp_path):
        model = InjectionViT(tiny_config, with_localization=True)
        for block in model.blocks:
            torch.nn.init.normal_(block.attn.w_qbar.weight, std=0.05)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model, epoch=7)
        bundle = load_checkpoint(path)
        assert bundle.epoch == 7
        images = torch.rand(2, 32, 32, 3)
        assert torch.equal(model(images).logits, bundle.model(images).logits)

    def test_config_mismatch_rejected(self, tiny_config, tmp_path):
        model = InjectionViT(tiny_config)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model)
        other = dataclasses.replace(tiny_config, embed_dim=64, num_heads=4)
        with pytest.raises(ValueError, match="config"):
            load_checkpoint(path, expected_config=other)

    def test_bad_version_rejected(self, tiny_config, tmp_path):
        model = InjectionViT(tiny_config)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model)
        payload = torch.load(path, weights_only=False)
        payload["format_version"] = 99
        torch.save(payload, path)
        with pytest.raises(ValueError, match="version"):
            load_checkpoint(path)


def test_frozen_weights_unchanged_by_optimizer_steps(tiny_config):
    model = InjectionViT(tiny_config, with_localization=True)
    model.freeze_for_injection()
    partition = parameter_partition(model)
    initial = {n: p.detach().clone() for n, p in model.named_parameters()}
    optimizer = torch.optim.AdamW(model.trainable_parameters(), lr=1e-2, weight_decay=0.01)
    rng = np.random.default_rng(0)
    for _ in range(5):
        images = torch.tensor(rng.random((2, 32, 32, 3)), dtype=torch.float32)
        labels = torch.tensor(rng.integers(0, 2, size=2))
        out = model(images, mode="injected", localize=True)
        loss = torch.nn.functional.cross_entropy(out.logits, labels)
        loss = loss + out.patch_scores.mean()
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    for name, p in model.named_parameters():
        if name in partition.frozen:
            assert torch.equal(p, initial[name]), name
        else:
            pass  # trainable weights are expected to move
