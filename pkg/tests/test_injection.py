import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from forgelab.backbone import InjectionViT
from forgelab.injection import (
    authenticity_correlation,
    gradient_symmetry_probe,
    injected_attention_head,
    knowledge_query,
    symmetry_disruption_probe,
)

from .oracles import loop_attention, loop_correlation, loop_matmul


def _rand(*shape, seed=0):
    rng = np.random.default_rng(seed)
    return torch.tensor(rng.normal(size=shape))


class TestKnowledgeQuery:
    def test_zero_projection(self):
        h = _rand(5, 8)
        w = torch.zeros(8, 4, dtype=torch.float64)
        assert torch.all(knowledge_query(h, w) == 0)

    def test_identity_projection(self):
        h = torch.eye(6, dtype=torch.float64)
        w = torch.eye(6, dtype=torch.float64)
        assert torch.equal(knowledge_query(h, w), h)

    def test_matches_triple_loop_oracle(self):
        h = _rand(5, 7, seed=1)
        w = _rand(7, 3, seed=2)
        expected = torch.tensor(loop_matmul(h.tolist(), w.tolist()), dtype=torch.float64)
        assert torch.allclose(knowledge_query(h, w), expected, atol=1e-10, rtol=0)

    def test_width_mismatch_rejected(self):
        with pytest.raises(ValueError):
            knowledge_query(_rand(5, 7), _rand(8, 3))


class TestAuthenticityCorrelation:
    def test_zero_queries_give_zero_matrix(self):
        qbar = torch.zeros(4, 3, dtype=torch.float64)
        k = _rand(4, 3)
        assert torch.all(authenticity_correlation(qbar, k, 3) == 0)

    def test_single_token_value(self):
        qbar = torch.tensor([[2.0]])
        k = torch.tensor([[3.0]])
        corr = authenticity_correlation(qbar, k, 1)
        assert corr.shape == (1, 1)
        assert corr.item() == pytest.approx(6.0, abs=0)

    def test_matches_loop_oracle(self):
        qbar = _rand(4, 5, seed=3)
        k = _rand(4, 5, seed=4)
        expected = torch.tensor(loop_correlation(qbar.tolist(), k.tolist(), 5), dtype=torch.float64)
        assert torch.allclose(authenticity_correlation(qbar, k, 5), expected,
                              atol=1e-10, rtol=0)

    def test_nonpositive_dk_rejected(self):
        with pytest.raises(ValueError):
            authenticity_correlation(_rand(2, 2), _rand(2, 2), 0)


class TestInjectedAttentionHead:
    def test_zero_correlation_is_standard_attention(self):
        q, k, v = _rand(4, 6, seed=5), _rand(4, 6, seed=6), _rand(4, 6, seed=7)
        zero = torch.zeros(4, 4, dtype=torch.float64)
        out = injected_attention_head(q, k, v, zero, 6)
        std = (q @ k.T / math.sqrt(6)).softmax(-1) @ v
        assert torch.allclose(out, std, atol=1e-12, rtol=0)

    def test_saturated_entry_routes_attention(self):
        q, k, v = _rand(3, 4, seed=8), _rand(3, 4, seed=9), _rand(3, 4, seed=10)
        corr = torch.zeros(3, 3, dtype=torch.float64)
        corr[0, 2] = 1e4
        out = injected_attention_head(q, k, v, corr, 4)
        assert torch.allclose(out[0], v[2], atol=1e-6, rtol=0)

    def test_matches_scalar_loop_oracle(self):
        q, k, v = _rand(3, 4, seed=11), _rand(3, 4, seed=12), _rand(3, 4, seed=13)
        corr = _rand(3, 3, seed=14)
        expected = torch.tensor(
            loop_attention(q.tolist(), k.tolist(), v.tolist(), corr.tolist(), 4),
            dtype=torch.float64,
        )
        out = injected_attention_head(q, k, v, corr, 4)
        assert torch.allclose(out, expected, atol=1e-8, rtol=0)

    def test_softmax_rows_sum_to_one(self):
        q, k = _rand(5, 4, seed=15), _rand(5, 4, seed=16)
        corr = _rand(5, 5, seed=17)
        logits = q @ k.T / math.sqrt(4) + corr
        rows = logits.softmax(-1).sum(-1)
        assert torch.allclose(rows, torch.ones(5, dtype=torch.float64), atol=1e-6)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            injected_attention_head(_rand(3, 4), _rand(3, 4), _rand(3, 4),
                                    torch.zeros(2, 2, dtype=torch.float64), 4)

    def test_nonfinite_logits_fault(self):
        corr = torch.full((3, 3), math.inf, dtype=torch.float64)
        with pytest.raises(FloatingPointError):
            injected_attention_head(_rand(3, 4), _rand(3, 4), _rand(3, 4), corr, 4)


@settings(deadline=None, max_examples=20)
@given(seed=st.integers(0, 10_000))
def test_additivity_reformulation(seed):
    """Adding the correlation to the logits equals attention with the summed
    query projections, for any weights."""
    rng = np.random.default_rng(seed)
    h = torch.tensor(rng.normal(size=(6, 8)))
    w_q = torch.tensor(rng.normal(size=(8, 8)) * 0.3)
    w_qbar = torch.tensor(rng.normal(size=(8, 8)) * 0.3)
    k = torch.tensor(rng.normal(size=(6, 8)))
    v = torch.tensor(rng.normal(size=(6, 8)))
    q = knowledge_query(h, w_q)
    qbar = knowledge_query(h, w_qbar)
    corr = authenticity_correlation(qbar, k, 8)
    injected = injected_attention_head(q, k, v, corr, 8)
    merged_q = knowledge_query(h, w_q + w_qbar)
    merged = injected_attention_head(merged_q, k, v, torch.zeros(6, 6, dtype=torch.float64), 8)
    assert torch.allclose(injected, merged, atol=1e-8, rtol=0)


def _randomized_model(config, seed, with_localization=False):
    torch.manual_seed(seed)
    model = InjectionViT(config, with_localization=with_localization).double()
    for block in model.blocks:
        torch.nn.init.normal_(block.attn.w_qbar.weight, std=0.02)
    return model


class TestGradientSymmetry:
    def test_probe_is_at_numerical_noise(self, tiny_config):
        for seed in range(5):
            model = _randomized_model(tiny_config, seed)
            rng = np.random.default_rng(seed)
            images = torch.tensor(rng.random((4, 32, 32, 3)))
            labels = torch.tensor(rng.integers(0, 2, size=4))
            deviations = gradient_symmetry_probe(model, images, labels)
            assert len(deviations) == tiny_config.num_layers
            assert max(deviations) <= 1e-9

    def test_probe_rejects_localization_model(self, tiny_config):
        model = _randomized_model(tiny_config, 0, with_localization=True)
        images = torch.rand(2, 32, 32, 3, dtype=torch.float64)
        labels = torch.tensor([0, 1])
        with pytest.raises(ValueError):
            gradient_symmetry_probe(model, images, labels)

    def test_localization_branch_breaks_symmetry(self, tiny_config):
        model = _randomized_model(tiny_config, 3, with_localization=True)
        rng = np.random.default_rng(3)
        images = torch.tensor(rng.random((4, 32, 32, 3)))
        labels = torch.tensor([0, 1, 0, 1])
        patch_labels = torch.tensor(rng.random((4, tiny_config.num_patches)))
        deviations = symmetry_disruption_probe(model, images, labels, patch_labels)
        assert all(d > 0 for d in deviations)

    def test_disruption_probe_requires_branch(self, tiny_config):
        model = _randomized_model(tiny_config, 0)
        with pytest.raises(ValueError):
            symmetry_disruption_probe(
                model,
                torch.rand(2, 32, 32, 3, dtype=torch.float64),
                torch.tensor([0, 1]),
                torch.rand(2, tiny_config.num_patches, dtype=torch.float64),
            )
