"""Patch extraction, the linear patch embedding, and the fixed grid encoding."""

from __future__ import annotations

import math

import torch
from torch import Tensor, nn

from .config import BackboneConfig


def extract_patches(images: Tensor, patch_size: int) -> Tensor:
    """Split (B, H, W, 3) images into flattened non-overlapping patches.

    Returns (B, N, patch_size * patch_size * 3) with patches in row-major
    grid order. Rejects images whose sides are not multiples of patch_size.
    """
    if images.ndim != 4 or images.shape[-1] != 3:
        raise ValueError(f"expected (B, H, W, 3) images, got {tuple(images.shape)}")
    b, h, w, c = images.shape
    if h % patch_size != 0 or w % patch_size != 0:
        raise ValueError(f"image {h}x{w} not divisible by patch_size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    x = images.reshape(b, gh, patch_size, gw, patch_size, c)
    x = x.permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, gh * gw, patch_size * patch_size * c)


class PatchEmbed(nn.Module):
    """Linear projection of flattened image patches to the token width."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        self.proj = nn.Linear(config.patch_size ** 2 * 3, config.embed_dim)
        nn.init.xavier_uniform_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, images: Tensor) -> Tensor:
        b, h, w, _ = images.shape
        if h != self.config.image_size or w != self.config.image_size:
            raise ValueError(
                f"expected {self.config.image_size}x{self.config.image_size} images, got {h}x{w}"
            )
        return self.proj(extract_patches(images, self.config.patch_size))


def sinusoidal_grid_encoding(rows: int, cols: int, dim: int) -> Tensor:
    """Fixed 2-D sine/cosine positional encoding over a patch grid.

    Half the channels encode the row index, half the column index. Adds no
    trainable parameters. ``dim`` must be divisible by 4.
    """
    if dim % 4 != 0:
        raise ValueError(f"encoding dim must be divisible by 4, got {dim}")
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(0, half, 2, dtype=torch.float64) / half
    )

    def encode(index: Tensor) -> Tensor:
        angles = index[:, None] * freqs[None, :]
        return torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)

    row_code = encode(torch.arange(rows, dtype=torch.float64))   # (rows, half)
    col_code = encode(torch.arange(cols, dtype=torch.float64))   # (cols, half)
    grid = torch.cat(
        [
            row_code[:, None, :].expand(rows, cols, half),
            col_code[None, :, :].expand(rows, cols, half),
        ],
        dim=2,
    )
    return grid.reshape(rows * cols, dim).to(torch.float32)
