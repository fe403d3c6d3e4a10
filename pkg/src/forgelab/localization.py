"""Training-only coarse forgery localization: a per-patch feature stream mixed
by the correlation matrices, coarse patch labels, and the dice loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .config import BackboneConfig
from .embedding import PatchEmbed, sinusoidal_grid_encoding


@dataclass
class LocalizationFeatures:
    """Per-patch feature stream (no class token)."""

    tokens: Tensor   # (batch, patches, dim)
    layer_index: int


@dataclass
class PatchLabelMap:
    """Soft per-patch authenticity labels on the patch grid, values in [0, 1]."""

    labels: np.ndarray          # (N,) row-major over the grid
    grid_shape: tuple[int, int]

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.labels.min() < 0.0 or self.labels.max() > 1.0:
            raise ValueError("patch labels must lie in [0, 1]")
        if self.grid_shape[0] * self.grid_shape[1] != self.labels.size:
            raise ValueError("grid_shape does not match label count")


def coarse_patch_labels(
    outer_face_mask: np.ndarray,
    patch_size: int,
    gamma0: float,
    gamma1: float,
) -> PatchLabelMap:
    """Per-patch labels from the fraction of unmanipulated pixels.

    A patch whose unmanipulated fraction falls below ``gamma0`` is labeled 0,
    above ``gamma1`` labeled 1, and in between it keeps the raw fraction
    (boundary region).
    """
    if not 0.0 <= gamma0 < gamma1 <= 1.0:
        raise ValueError(f"need 0 <= gamma0 < gamma1 <= 1, got {gamma0}, {gamma1}")
    mask = np.asarray(outer_face_mask)
    h, w = mask.shape
    if h % patch_size != 0 or w % patch_size != 0:
        raise ValueError(f"mask {h}x{w} not divisible by patch_size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    counts = (mask != 0).reshape(gh, patch_size, gw, patch_size).sum(axis=(1, 3))
    frac = counts / float(patch_size * patch_size)
    labels = np.where(frac < gamma0, 0.0, np.where(frac > gamma1, 1.0, frac))
    return PatchLabelMap(labels=labels.reshape(-1), grid_shape=(gh, gw))


def update_localization_features(
    tokens: Tensor,
    corr: Tensor,
    pe: Tensor,
    w_kbar: Tensor,
) -> Tensor:
    """Advance the localization stream one layer.

    The head-averaged patch block of the correlation matrix is row-softmaxed
    and mixes the layer-normalized, position-encoded tokens, which are then
    projected through the trainable key-style map. The layer norm carries no
    affine parameters.
    """
    if tokens.ndim != 3:
        raise ValueError(f"expected (B, N, D) tokens, got {tuple(tokens.shape)}")
    b, n, d = tokens.shape
    if corr.ndim != 4 or corr.shape[-1] != n + 1 or corr.shape[-2] != n + 1:
        raise ValueError(
            f"expected correlation (B, heads, {n + 1}, {n + 1}), got {tuple(corr.shape)}"
        )
    patch_corr = corr.mean(dim=1)[:, 1:, 1:]
    normed = F.layer_norm(tokens + pe, (d,))
    return patch_corr.softmax(dim=-1) @ normed @ w_kbar


class LocalizationBranch(nn.Module):
    """Parallel per-patch stream consuming the per-layer correlation matrices.

    Patch embedding follows the classification path but with separate
    parameters; a fixed sinusoidal grid encoding is folded into every update;
    a two-layer MLP head scores each final patch token.
    """

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        self.patch_embed = PatchEmbed(config)
        d = config.embed_dim
        self.w_kbar = nn.ParameterList(
            [nn.Parameter(torch.empty(d, d)) for _ in range(config.num_layers)]
        )
        # fan-scaled init: the stream passes through one of these per layer,
        # so a tiny init would collapse deep features toward zero
        for w in self.w_kbar:
            nn.init.xavier_uniform_(w)
        self.head = nn.Sequential(
            nn.Linear(d, d),
            nn.GELU(),
            nn.Linear(d, 1),
        )
        nn.init.xavier_uniform_(self.head[0].weight)
        nn.init.zeros_(self.head[0].bias)
        # small output init: scores start near 0.5 so the head cannot saturate
        # before the correlation stream carries per-patch signal, yet the dice
        # gradient path into the injection weights stays open from step one
        nn.init.xavier_uniform_(self.head[2].weight, gain=0.1)
        nn.init.zeros_(self.head[2].bias)
        grid = config.grid_size
        self.register_buffer(
            "pos_encoding", sinusoidal_grid_encoding(grid, grid, d), persistent=False
        )

    def initial_features(self, images: Tensor) -> Tensor:
        return self.patch_embed(images)

    def patch_scores(self, tokens: Tensor) -> Tensor:
        return torch.sigmoid(self.head(tokens).squeeze(-1))

    def forward(self, images: Tensor, correlations: list[Tensor]) -> Tensor:
        """Per-patch forgery scores in [0, 1], shape (B, N). Label 1 means
        unmanipulated, matching the coarse patch labels."""
        if len(correlations) != self.config.num_layers:
            raise ValueError(
                f"expected {self.config.num_layers} correlation matrices, got {len(correlations)}"
            )
        tokens = self.initial_features(images)
        pe = self.pos_encoding.to(tokens.dtype)
        for corr, w in zip(correlations, self.w_kbar):
            tokens = update_localization_features(tokens, corr, pe, w)
        return self.patch_scores(tokens)


def dice_loss(pred: Tensor, target: Tensor, smooth: float = 1.0) -> Tensor:
    """Soft dice loss over the last axis; supports soft targets.

    For (N,) inputs returns a scalar; for (B, N) a per-sample vector.
    """
    if smooth <= 0:
        raise ValueError("smooth must be > 0")
    if pred.shape != target.shape:
        raise ValueError(f"pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    intersection = (pred * target).sum(dim=-1)
    denom = pred.sum(dim=-1) + target.sum(dim=-1) + smooth
    return 1.0 - (2.0 * intersection + smooth) / denom
