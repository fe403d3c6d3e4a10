"""Injection attention: frozen QKV attention plus a trainable knowledge-query
pathway whose patch correlation matrix is added to the attention logits."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn


@dataclass
class AuthenticityCorrelation:
    """Per-layer correlation matrix produced by the injection pathway.

    ``matrix`` has shape (batch, heads, tokens, tokens) and the same shape as
    the standard attention-logit matrix of its layer.
    """

    matrix: Tensor
    layer_index: int


def knowledge_query(tokens: Tensor, w_qbar: Tensor) -> Tensor:
    """Project token features through the trainable knowledge-query map."""
    if tokens.shape[-1] != w_qbar.shape[0]:
        raise ValueError(
            f"token width {tokens.shape[-1]} does not match projection input {w_qbar.shape[0]}"
        )
    return tokens @ w_qbar


def authenticity_correlation(qbar: Tensor, k: Tensor, d_k: int) -> Tensor:
    """Scaled product of the knowledge queries with the standard keys."""
    if d_k <= 0:
        raise ValueError(f"d_k must be positive, got {d_k}")
    if qbar.shape[-2] != k.shape[-2] or qbar.shape[-1] != k.shape[-1]:
        raise ValueError(
            f"query/key shapes differ: {tuple(qbar.shape)} vs {tuple(k.shape)}"
        )
    return qbar @ k.transpose(-2, -1) / math.sqrt(d_k)


def injected_attention_head(q: Tensor, k: Tensor, v: Tensor, corr: Tensor, d_k: int) -> Tensor:
    """One attention head with the correlation matrix added to its logits."""
    logits = q @ k.transpose(-2, -1) / math.sqrt(d_k)
    if corr.shape != logits.shape:
        raise ValueError(
            f"correlation shape {tuple(corr.shape)} does not match logits {tuple(logits.shape)}"
        )
    logits = logits + corr
    if not torch.isfinite(logits).all():
        raise FloatingPointError("non-finite attention logits")
    return logits.softmax(dim=-1) @ v


class InjectionAttention(nn.Module):
    """Multi-head self-attention with an additive trainable correlation pathway.

    The knowledge-query projection starts at zero so a fresh model reproduces
    the plain backbone exactly; the QKV projections are bias-free.
    """

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads != 0:
            raise ValueError(f"dim {dim} not divisible by num_heads {num_heads}")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.w_q = nn.Linear(dim, dim, bias=False)
        self.w_k = nn.Linear(dim, dim, bias=False)
        self.w_v = nn.Linear(dim, dim, bias=False)
        self.w_qbar = nn.Linear(dim, dim, bias=False)
        self.proj = nn.Linear(dim, dim)
        # fan-scaled init keeps activations healthy when the backbone starts
        # from random weights instead of a pre-trained checkpoint; the query
        # and key maps get half gain so the frozen logits stay soft enough
        # for the additive correlation pathway to steer attention early
        nn.init.xavier_uniform_(self.w_q.weight, gain=0.5)
        nn.init.xavier_uniform_(self.w_k.weight, gain=0.5)
        nn.init.xavier_uniform_(self.w_v.weight)
        nn.init.zeros_(self.w_qbar.weight)
        nn.init.xavier_uniform_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def _split(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        return x.view(b, t, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(self, x: Tensor, inject: bool) -> tuple[Tensor, Tensor | None]:
        b, t, d = x.shape
        q = self._split(self.w_q(x))
        k = self._split(self.w_k(x))
        v = self._split(self.w_v(x))
        scale = 1.0 / math.sqrt(self.head_dim)
        logits = q @ k.transpose(-2, -1) * scale
        corr = None
        if inject:
            qbar = self._split(self.w_qbar(x))
            corr = qbar @ k.transpose(-2, -1) * scale
            logits = logits + corr
        attn = logits.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, d)
        return self.proj(out), corr


def _query_gradients(model, compute_loss) -> list[tuple[Tensor, Tensor]]:
    """Gradient pairs (dL/dW_Q, dL/dW_Qbar) per layer.

    The frozen query projections get their grad flags enabled before the loss
    is evaluated (they are diagnostic here, never updated) and restored after.
    """
    w_q = [block.attn.w_q.weight for block in model.blocks]
    w_qbar = [block.attn.w_qbar.weight for block in model.blocks]
    saved = [p.requires_grad for p in w_q + w_qbar]
    for p in w_q + w_qbar:
        p.requires_grad_(True)
    try:
        loss = compute_loss()
        grads = torch.autograd.grad(loss, w_q + w_qbar)
    finally:
        for p, flag in zip(w_q + w_qbar, saved):
            p.requires_grad_(flag)
    n = len(w_q)
    return list(zip(grads[:n], grads[n:]))


def _max_relative_deviation(pairs, eps: float) -> list[float]:
    return [
        float(((g_q - g_qbar).abs() / (g_q.abs() + eps)).max())
        for g_q, g_qbar in pairs
    ]


def gradient_symmetry_probe(model, images: Tensor, labels: Tensor, eps: float = 1e-12) -> list[float]:
    """Per-layer max relative deviation between the cross-entropy gradients of
    the frozen query projection and the knowledge-query projection.

    Valid only for a classification-only model; the statistic sits at
    numerical noise because both projections act additively on the same
    attention logits. Raises if the model carries a localization branch,
    whose extra loss path breaks the equality.
    """
    if getattr(model, "localization", None) is not None:
        raise ValueError("gradient symmetry probe requires a model without the localization branch")

    def compute_loss():
        out = model(images, mode="injected")
        return F.cross_entropy(out.logits, labels)

    return _max_relative_deviation(_query_gradients(model, compute_loss), eps)


def symmetry_disruption_probe(
    model,
    images: Tensor,
    labels: Tensor,
    patch_labels: Tensor,
    dice_smooth: float = 1.0,
    eps: float = 1e-12,
) -> list[float]:
    """Same per-layer statistic with the localization dice loss added.

    The dice term reaches the knowledge-query weights through the correlation
    matrices but never touches the frozen query projection, so the deviation
    becomes strictly positive.
    """
    from .localization import dice_loss

    if getattr(model, "localization", None) is None:
        raise ValueError("symmetry disruption probe requires the localization branch")

    def compute_loss():
        out = model(images, mode="injected", localize=True)
        ce = F.cross_entropy(out.logits, labels)
        return ce + dice_loss(out.patch_scores, patch_labels, smooth=dice_smooth).mean()

    return _max_relative_deviation(_query_gradients(model, compute_loss), eps)
