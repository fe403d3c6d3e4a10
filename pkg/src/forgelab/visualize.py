"""Figure and map exporters: correlation heatmaps, patch activation grids,
coarse localization maps, training curves, and scatter plots."""

from __future__ import annotations

from pathlib import Path

import matplotlib
import numpy as np
import torch
from PIL import Image

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import ActivationReport, RobustnessTable  # noqa: E402
from .synthesis import ImageSample  # noqa: E402


def _normalize(matrix: np.ndarray) -> np.ndarray:
    lo, hi = matrix.min(), matrix.max()
    if hi <= lo:
        return np.zeros_like(matrix)
    return (matrix - lo) / (hi - lo)


def save_heatmap(matrix: np.ndarray, path: str | Path, title: str = "") -> Path:
    """Min-max normalized heatmap image plus a raw-value .npy sidecar."""
    path = Path(path)
    np.save(path.with_suffix(".npy"), matrix)
    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(_normalize(matrix), cmap="viridis")
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_grid_image(values: np.ndarray, grid_shape: tuple[int, int],
                    path: str | Path, scale: int = 16) -> Path:
    """Grayscale image with one cell per patch, upscaled with hard edges."""
    path = Path(path)
    grid = np.asarray(values, dtype=np.float64).reshape(grid_shape)
    img = (np.clip(grid, 0.0, 1.0) * 255).astype(np.uint8)
    Image.fromarray(img).resize(
        (grid_shape[1] * scale, grid_shape[0] * scale), Image.NEAREST
    ).save(path)
    return path


def patch_activation(corr: np.ndarray, stat: str = "row") -> np.ndarray:
    """Per-patch activation from a (tokens, tokens) correlation matrix.

    ``row`` averages |corr| over each patch row, ``col`` over each column,
    ``sym`` averages both. The class-token row/column is dropped first.
    """
    patch = np.abs(np.asarray(corr, dtype=np.float64))[1:, 1:]
    if stat == "row":
        return patch.mean(axis=1)
    if stat == "col":
        return patch.mean(axis=0)
    if stat == "sym":
        return 0.5 * (patch.mean(axis=1) + patch.mean(axis=0))
    raise ValueError(f"unknown activation stat {stat!r}")


def export_correlation_viz(model, image: np.ndarray, layer: int,
                           out_dir: str | Path, stat: str = "row") -> dict[str, Path]:
    """Head-averaged correlation heatmap and patch-activation grid for one image."""
    if not 0 <= layer < model.config.num_layers:
        raise ValueError(f"layer {layer} out of range 0..{model.config.num_layers - 1}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model.eval()
    with torch.no_grad():
        out = model(torch.as_tensor(image[None], dtype=torch.float32), mode="injected")
    corr = out.correlations[layer].matrix[0].mean(dim=0).numpy()
    activation = patch_activation(corr, stat=stat)
    grid = model.config.grid_size
    paths = {
        "heatmap": save_heatmap(corr, out_dir / f"corr_layer{layer}.png",
                                title=f"correlation, layer {layer}"),
        "activation": save_grid_image(
            _normalize(activation), (grid, grid), out_dir / f"activation_layer{layer}.png"
        ),
    }
    np.save(out_dir / f"activation_layer{layer}.npy", activation)
    return paths


def export_localization_maps(model, samples: list[ImageSample],
                             out_dir: str | Path) -> list[Path]:
    """Per-image coarse localization maps, one grayscale pixel per patch."""
    if model.localization is None:
        raise ValueError("model was built without the localization branch")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model.eval()
    grid = model.config.grid_size
    paths = []
    with torch.no_grad():
        for sample in samples:
            images = torch.as_tensor(sample.pixels[None], dtype=torch.float32)
            out = model(images, mode="injected", localize=True)
            stem = sample.sample_id.replace("/", "_").replace(":", "_")
            paths.append(save_grid_image(out.patch_scores[0].numpy(), (grid, grid),
                                         out_dir / f"loc_{stem}.png"))
    return paths


def save_loss_curves(logs: dict[str, list[dict]], path: str | Path,
                     component: str = "total") -> Path:
    """Loss-vs-steps curves for several runs on one axis."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, log in logs.items():
        ax.plot([e["steps"] for e in log], [e[component] for e in log], label=name)
    ax.set_xlabel("optimizer steps")
    ax.set_ylabel(f"{component} loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_activation_report_plot(report: ActivationReport, path: str | Path) -> Path:
    path = Path(path)
    layers = np.arange(report.layer_count)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.errorbar(layers, report.real_mean, yerr=report.real_std, label="real", marker="o")
    ax.errorbar(layers, report.fake_mean, yerr=report.fake_std, label="fake", marker="s")
    ax.set_xlabel("layer")
    ax.set_ylabel("mean activation")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_robustness_plot(table: RobustnessTable, path: str | Path) -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    for kind in table.kinds:
        ax.plot(table.severities, table.row(kind), marker="o", label=kind)
    ax.set_xlabel("severity")
    ax.set_ylabel("AUC")
    ax.set_ylim(0.0, 1.05)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_pca_scatter(coords: np.ndarray, labels, path: str | Path, groups=None) -> Path:
    path = Path(path)
    labels = np.asarray(labels)
    fig, ax = plt.subplots(figsize=(5, 5))
    real = labels == 0
    ax.scatter(coords[real, 0], coords[real, 1], marker="o", s=14, label="real", alpha=0.7)
    ax.scatter(coords[~real, 0], coords[~real, 1], marker="x", s=14, label="fake", alpha=0.7)
    ax.set_xlabel("principal axis 1")
    ax.set_ylabel("principal axis 2")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
