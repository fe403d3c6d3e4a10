"""ViT-style backbone with pluggable injection attention, an explicit
trainable/frozen parameter partition, and checkpoint IO."""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
from torch import Tensor, nn

from .config import BackboneConfig
from .embedding import PatchEmbed
from .injection import AuthenticityCorrelation, InjectionAttention
from .localization import LocalizationBranch

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class PatchFeatures:
    """Token sequence at one layer: class token first, then the patch tokens."""

    tokens: Tensor   # (batch, 1 + N, dim)
    layer_index: int


@dataclass
class ForwardOutput:
    logits: Tensor                                    # (batch, num_classes)
    correlations: list[AuthenticityCorrelation] = field(default_factory=list)
    features: PatchFeatures | None = None             # final tokens, post-norm
    patch_scores: Tensor | None = None                # (batch, N) when localizing


class TransformerBlock(nn.Module):
    """Pre-norm transformer block around a swappable attention module."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float,
                 attention_cls=InjectionAttention):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = attention_cls(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))
        nn.init.xavier_uniform_(self.mlp[0].weight)
        nn.init.zeros_(self.mlp[0].bias)
        nn.init.xavier_uniform_(self.mlp[2].weight)
        nn.init.zeros_(self.mlp[2].bias)

    def forward(self, x: Tensor, inject: bool) -> tuple[Tensor, Tensor | None]:
        attn_out, corr = self.attn(self.norm1(x), inject)
        x = x + attn_out
        x = x + self.mlp(self.norm2(x))
        return x, corr


class InjectionViT(nn.Module):
    """Patch-token transformer classifier with a zero-initialized injection
    pathway and an optional training-only localization branch.

    A fresh model run in injected mode is exactly the plain backbone because
    the knowledge-query projections start at zero. Construction applies the
    injection freezing policy; call :meth:`unfreeze_all` for full fine-tuning.
    Alternative attention implementations can be swapped in through
    ``attention_cls`` as long as they follow the
    ``forward(x, inject) -> (out, corr)`` contract.
    """

    def __init__(self, config: BackboneConfig, with_localization: bool = False,
                 attention_cls=InjectionAttention):
        super().__init__()
        self.config = config
        self.patch_embed = PatchEmbed(config)
        self.cls_token = nn.Parameter(torch.empty(1, 1, config.embed_dim))
        self.pos_embed = nn.Parameter(torch.empty(1, config.num_tokens, config.embed_dim))
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(
            TransformerBlock(config.embed_dim, config.num_heads, config.mlp_ratio,
                             attention_cls=attention_cls)
            for _ in range(config.num_layers)
        )
        self.norm = nn.LayerNorm(config.embed_dim)
        self.head = nn.Linear(config.embed_dim, config.num_classes)
        nn.init.trunc_normal_(self.head.weight, std=0.02)
        nn.init.zeros_(self.head.bias)
        self.localization = LocalizationBranch(config) if with_localization else None
        self.freeze_for_injection()

    def embed(self, images: Tensor) -> PatchFeatures:
        """Layer-0 features: patch projection, class token, positional embedding."""
        x = self.patch_embed(images)
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        x = torch.cat([cls, x], dim=1) + self.pos_embed
        return PatchFeatures(tokens=x, layer_index=0)

    def forward(self, images: Tensor, mode: str = "injected", localize: bool = False) -> ForwardOutput:
        if mode not in ("injected", "baseline"):
            raise ValueError(f"unknown forward mode {mode!r}")
        if localize and self.localization is None:
            raise ValueError("model was built without the localization branch")
        if localize and mode != "injected":
            raise ValueError("localization requires injected mode")
        inject = mode == "injected"
        x = self.embed(images).tokens
        correlations: list[AuthenticityCorrelation] = []
        for index, block in enumerate(self.blocks):
            x, corr = block(x, inject)
            if not torch.isfinite(x).all():
                raise FloatingPointError(f"non-finite activations at layer {index}")
            if inject:
                correlations.append(AuthenticityCorrelation(matrix=corr, layer_index=index))
        x = self.norm(x)
        logits = self.head(x[:, 0])
        patch_scores = None
        if localize:
            patch_scores = self.localization(images, [c.matrix for c in correlations])
        return ForwardOutput(
            logits=logits,
            correlations=correlations,
            features=PatchFeatures(tokens=x, layer_index=self.config.num_layers),
            patch_scores=patch_scores,
        )

    def freeze_for_injection(self) -> None:
        partition = parameter_partition(self)
        for name, param in self.named_parameters():
            param.requires_grad_(name in partition.trainable)

    def unfreeze_all(self) -> None:
        for param in self.parameters():
            param.requires_grad_(True)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]


@dataclass
class ParameterPartition:
    """Named split of every model parameter into trainable and frozen sets."""

    trainable: frozenset[str]
    frozen: frozenset[str]


_TRAINABLE_PATTERNS = [
    re.compile(r"^blocks\.\d+\.attn\.w_qbar\.weight$"),
    re.compile(r"^cls_token$"),
    re.compile(r"^blocks\.\d+\.norm[12]\.(weight|bias)$"),
    re.compile(r"^norm\.(weight|bias)$"),
    re.compile(r"^head\.(weight|bias)$"),
    re.compile(r"^localization\.patch_embed\.proj\.(weight|bias)$"),
    re.compile(r"^localization\.w_kbar\.\d+$"),
    re.compile(r"^localization\.head\.\d+\.(weight|bias)$"),
]
_FROZEN_PATTERNS = [
    re.compile(r"^patch_embed\.proj\.(weight|bias)$"),
    re.compile(r"^pos_embed$"),
    re.compile(r"^blocks\.\d+\.attn\.(w_q|w_k|w_v|proj)\.(weight|bias)$"),
    re.compile(r"^blocks\.\d+\.mlp\.\d+\.(weight|bias)$"),
]


def parameter_partition(model: nn.Module) -> ParameterPartition:
    """Classify every named parameter of the injection policy exhaustively.

    Trainable: the knowledge-query and key-style injection maps, the whole
    localization branch, the class token, every normalization parameter, and
    the classification head. Everything else is frozen. An unrecognized name
    is an error so new parameters cannot silently dodge the policy.
    """
    trainable: set[str] = set()
    frozen: set[str] = set()
    for name, _ in model.named_parameters():
        if any(p.match(name) for p in _TRAINABLE_PATTERNS):
            trainable.add(name)
        elif any(p.match(name) for p in _FROZEN_PATTERNS):
            frozen.add(name)
        else:
            raise ValueError(f"parameter {name!r} is not covered by the freezing policy")
    return ParameterPartition(trainable=frozenset(trainable), frozen=frozenset(frozen))


def save_checkpoint(
    path: str | Path,
    model: InjectionViT,
    optimizer_state: dict | None = None,
    epoch: int | None = None,
) -> None:
    """Write a single-archive checkpoint with config and format version."""
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "backbone_config": asdict(model.config),
        "with_localization": model.localization is not None,
        "model_state": model.state_dict(),
        "optimizer_state": optimizer_state,
        "epoch": epoch,
    }
    torch.save(payload, str(path))


@dataclass
class CheckpointBundle:
    model: InjectionViT
    epoch: int | None
    optimizer_state: dict | None


def load_checkpoint(path: str | Path, expected_config: BackboneConfig | None = None) -> CheckpointBundle:
    """Load a checkpoint, rejecting version or config mismatches."""
    payload = torch.load(str(path), map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {version!r}")
    config = BackboneConfig(**payload["backbone_config"])
    if expected_config is not None and config != expected_config:
        raise ValueError(f"checkpoint config {config} does not match expected {expected_config}")
    model = InjectionViT(config, with_localization=payload["with_localization"])
    model.load_state_dict(payload["model_state"])
    return CheckpointBundle(
        model=model,
        epoch=payload.get("epoch"),
        optimizer_state=payload.get("optimizer_state"),
    )
