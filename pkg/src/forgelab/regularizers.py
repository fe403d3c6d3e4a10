"""Layer-wise suppression and contrast losses over the correlation activations."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor

from .injection import AuthenticityCorrelation


@dataclass
class ActivationProfile:
    """Per-layer, per-sample mean absolute correlation activation."""

    per_layer: list[Tensor]   # each (batch,), entries >= 0

    @property
    def layer_count(self) -> int:
        return len(self.per_layer)

    @property
    def batch_size(self) -> int:
        return int(self.per_layer[0].shape[0]) if self.per_layer else 0

    def subset(self, index) -> "ActivationProfile":
        return ActivationProfile(per_layer=[a[index] for a in self.per_layer])


def activation_value(matrix) -> Tensor:
    """Mean absolute entry of one sample's correlation matrix (all heads)."""
    if isinstance(matrix, AuthenticityCorrelation):
        matrix = matrix.matrix
    if not isinstance(matrix, Tensor):
        matrix = torch.as_tensor(matrix, dtype=torch.float64)
    return matrix.abs().mean()


def activation_profile(correlations) -> ActivationProfile:
    """Per-sample activation values for every layer's correlation matrices.

    Accepts the (batch, heads, tokens, tokens) matrices collected by the
    model forward; heads and token rows/columns, class token included, are
    averaged together.
    """
    per_layer = []
    for corr in correlations:
        matrix = corr.matrix if isinstance(corr, AuthenticityCorrelation) else corr
        if matrix.ndim != 4:
            raise ValueError(f"expected (B, heads, T, T) matrices, got {tuple(matrix.shape)}")
        per_layer.append(matrix.abs().mean(dim=(1, 2, 3)))
    return ActivationProfile(per_layer=per_layer)


def suppression_loss(profile: ActivationProfile, beta: float, shallow_cutoff: int) -> Tensor:
    """Batch-mean hinge above ``beta``, summed over layers 0..shallow_cutoff."""
    if beta <= 0:
        raise ValueError("beta must be > 0")
    if not 0 <= shallow_cutoff < profile.layer_count:
        raise ValueError(
            f"shallow_cutoff {shallow_cutoff} out of range for {profile.layer_count} layers"
        )
    total = None
    for a in profile.per_layer[: shallow_cutoff + 1]:
        term = F.relu(a - beta).mean()
        total = term if total is None else total + term
    return total


def contrast_loss(
    profile_real: ActivationProfile,
    profile_fake: ActivationProfile,
    mu: float,
    deep_layers,
) -> Tensor:
    """Pairwise margin hinge between fake and real activations on deep layers.

    Real and fake samples must be paired one-to-one within the batch; the
    hinge vanishes only when every real activation exceeds its paired fake
    activation by at least ``mu``.
    """
    if mu < 0:
        raise ValueError("mu must be >= 0")
    if profile_real.layer_count != profile_fake.layer_count:
        raise ValueError("real and fake profiles cover different layer counts")
    if profile_real.batch_size != profile_fake.batch_size:
        raise ValueError(
            f"unpaired batch: {profile_real.batch_size} real vs {profile_fake.batch_size} fake"
        )
    deep_layers = tuple(deep_layers)
    if not deep_layers:
        raise ValueError("deep_layers must not be empty")
    if any(l < 0 or l >= profile_real.layer_count for l in deep_layers):
        raise ValueError(f"deep_layers {deep_layers} out of range")
    total = None
    for l in deep_layers:
        term = F.relu(profile_fake.per_layer[l] - profile_real.per_layer[l] + mu).mean()
        total = term if total is None else total + term
    return total


def regularizer_gradients(model, images_real: Tensor, images_fake: Tensor,
                          beta: float, mu: float, shallow_cutoff: int, deep_layers):
    """Suppression-plus-contrast loss and its gradients on the knowledge-query maps.

    Returns (loss_suppression, loss_contrast, grads) where ``grads`` holds one
    tensor per layer, aligned with ``model.blocks``.
    """
    if images_real.shape != images_fake.shape:
        raise ValueError("real and fake batches must pair one-to-one")
    images = torch.cat([images_real, images_fake], dim=0)
    out = model(images, mode="injected")
    profile = activation_profile(out.correlations)
    b = images_real.shape[0]
    loss_s = suppression_loss(profile, beta, shallow_cutoff)
    loss_d = contrast_loss(profile.subset(slice(0, b)), profile.subset(slice(b, 2 * b)),
                           mu, deep_layers)
    weights = [block.attn.w_qbar.weight for block in model.blocks]
    grads = torch.autograd.grad(loss_s + loss_d, weights, allow_unused=True)
    grads = [torch.zeros_like(w) if g is None else g for w, g in zip(weights, grads)]
    return loss_s.detach(), loss_d.detach(), grads
