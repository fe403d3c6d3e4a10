"""Dataclass configs and the flat ``key = value`` run-config file format."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from pathlib import Path


@dataclass
class BackboneConfig:
    """Geometry of the ViT-style backbone.

    Defaults match a 224px / 16px-patch base transformer; toy runs shrink
    every field. ``num_layers`` must be at least 3 so the contrast loss has
    two deep layers plus at least one shallow layer to work with.
    """

    image_size: int = 224
    patch_size: int = 16
    embed_dim: int = 768
    num_layers: int = 12
    num_heads: int = 12
    mlp_ratio: float = 4.0
    num_classes: int = 2

    def __post_init__(self) -> None:
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.num_heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}"
            )
        if self.num_layers < 3:
            raise ValueError("num_layers must be >= 3")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size ** 2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


@dataclass
class RegularizerConfig:
    """Hinge limits and layer ranges for the suppression / contrast losses.

    ``shallow_cutoff`` is the inclusive index of the last shallow layer and
    ``deep_layers`` the set of layers the contrast loss reads. Both default
    to ``None`` meaning "derive from the backbone depth": the first half of
    the layers are shallow and the last min(3, remaining) layers are deep.
    """

    beta: float = 1.2
    mu: float = 0.1
    shallow_cutoff: int | None = None
    deep_layers: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        if self.beta <= 0:
            raise ValueError("beta must be > 0")
        if self.mu < 0:
            raise ValueError("mu must be >= 0")
        if self.deep_layers is not None:
            self.deep_layers = tuple(sorted(int(l) for l in self.deep_layers))

    def resolve(self, num_layers: int) -> tuple[int, tuple[int, ...]]:
        """Concrete (shallow_cutoff, deep_layers) for a backbone of given depth."""
        cutoff = self.shallow_cutoff
        if cutoff is None:
            cutoff = num_layers // 2 - 1
        deep = self.deep_layers
        if deep is None:
            n_deep = min(3, num_layers - cutoff - 1)
            deep = tuple(range(num_layers - n_deep, num_layers))
        if not 0 <= cutoff < num_layers:
            raise ValueError(f"shallow_cutoff {cutoff} out of range for {num_layers} layers")
        if any(l < 0 or l >= num_layers for l in deep):
            raise ValueError(f"deep_layers {deep} out of range for {num_layers} layers")
        if any(l <= cutoff for l in deep):
            raise ValueError("shallow and deep layer sets must be disjoint")
        return cutoff, tuple(deep)


@dataclass
class TrainingConfig:
    """One training run. Defaults follow the reference training protocol;
    toy experiments override the backbone and the epoch budget."""

    lr_init: float = 1e-4
    lr_min: float = 1e-6
    weight_decay: float = 0.01
    batch_size: int = 24          # (real, fake) pairs per optimizer step
    max_epochs: int = 300
    patience: int = 20
    seed: int = 0
    gamma0: float = 0.2           # coarse patch label lower threshold
    gamma1: float = 0.8           # coarse patch label upper threshold
    mode: str = "injected"        # injected | full_finetune | baseline
    use_localization: bool = True
    use_regularizers: bool = True
    early_stop_on: str = "train"  # train | val (val watches the validation CE)
    val_fraction: float = 0.1
    augment_prob: float = 0.5
    dice_smooth: float = 1.0
    regularizer: RegularizerConfig = field(default_factory=RegularizerConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)

    def __post_init__(self) -> None:
        if not self.lr_min < self.lr_init:
            raise ValueError("lr_min must be < lr_init")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not (0.0 <= self.gamma0 < self.gamma1 <= 1.0):
            raise ValueError("need 0 <= gamma0 < gamma1 <= 1")
        if self.mode not in ("injected", "full_finetune", "baseline"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.early_stop_on not in ("train", "val"):
            raise ValueError(f"unknown early_stop_on {self.early_stop_on!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in [0, 1)")


# --- flat config file format -------------------------------------------------
#
# One "key = value" per line, '#' starts a comment. Nested fields use dots:
#     backbone.embed_dim = 64
#     regularizer.deep_layers = 2,3
# 'auto' leaves an optional field at its derived default.

_BOOL_KEYS = {"use_localization", "use_regularizers"}
_INT_KEYS = {
    "batch_size", "max_epochs", "patience", "seed",
    "backbone.image_size", "backbone.patch_size", "backbone.embed_dim",
    "backbone.num_layers", "backbone.num_heads", "backbone.num_classes",
}
_FLOAT_KEYS = {
    "lr_init", "lr_min", "weight_decay", "gamma0", "gamma1", "val_fraction",
    "augment_prob", "dice_smooth", "backbone.mlp_ratio",
    "regularizer.beta", "regularizer.mu",
}
_STR_KEYS = {"mode", "early_stop_on"}
_OPT_INT_KEYS = {"regularizer.shallow_cutoff"}
_OPT_TUPLE_KEYS = {"regularizer.deep_layers"}
_ALL_KEYS = (
    _BOOL_KEYS | _INT_KEYS | _FLOAT_KEYS | _STR_KEYS | _OPT_INT_KEYS | _OPT_TUPLE_KEYS
)


def _convert(key: str, raw: str):
    raw = raw.strip()
    if key in _OPT_INT_KEYS or key in _OPT_TUPLE_KEYS:
        if raw.lower() in ("auto", "none", ""):
            return None
        if key in _OPT_INT_KEYS:
            return int(raw)
        return tuple(int(p) for p in raw.split(",") if p.strip())
    if key in _BOOL_KEYS:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"bad boolean for {key}: {raw!r}")
    if key in _INT_KEYS:
        return int(raw)
    if key in _FLOAT_KEYS:
        return float(raw)
    if key in _STR_KEYS:
        return raw
    raise ValueError(f"unknown config key {key!r}")


def config_from_items(items: dict[str, str]) -> TrainingConfig:
    """Build a TrainingConfig from flat string items, applying defaults."""
    top: dict = {}
    backbone: dict = {}
    regularizer: dict = {}
    for key, raw in items.items():
        if key not in _ALL_KEYS:
            raise ValueError(f"unknown config key {key!r}")
        value = _convert(key, raw)
        if key.startswith("backbone."):
            backbone[key.split(".", 1)[1]] = value
        elif key.startswith("regularizer."):
            regularizer[key.split(".", 1)[1]] = value
        else:
            top[key] = value
    return TrainingConfig(
        regularizer=RegularizerConfig(**regularizer),
        backbone=BackboneConfig(**backbone),
        **top,
    )


def parse_config_file(path: str | Path) -> TrainingConfig:
    """Parse a flat key=value config file. Missing keys keep their defaults."""
    items: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = line.split("=", 1)
        items[key.strip()] = raw.strip()
    return config_from_items(items)


def _format_value(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def format_config(config: TrainingConfig) -> str:
    """Serialize a TrainingConfig to the flat file format (sorted keys)."""
    flat: dict[str, str] = {}
    data = asdict(config)
    backbone = data.pop("backbone")
    regularizer = data.pop("regularizer")
    for key, value in data.items():
        flat[key] = _format_value(value)
    for key, value in backbone.items():
        flat[f"backbone.{key}"] = _format_value(value)
    for key, value in regularizer.items():
        flat[f"regularizer.{key}"] = _format_value(value)
    return "\n".join(f"{key} = {flat[key]}" for key in sorted(flat)) + "\n"


def config_hash(config: TrainingConfig) -> str:
    """Short stable hash of the full config, used to name run directories."""
    return hashlib.sha256(format_config(config).encode()).hexdigest()[:10]


def run_directory(base: str | Path, config: TrainingConfig) -> Path:
    return Path(base) / f"{config_hash(config)}-s{config.seed}"
