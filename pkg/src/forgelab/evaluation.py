"""Metrics and analysis: rank AUC, video aggregation, activation reports,
PCA projection of final-layer features, and the robustness sweep."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .degradations import DEGRADATION_KINDS, degrade
from .regularizers import activation_profile
from .synthesis import ImageSample


@dataclass
class FrameScore:
    sample_id: str
    group_id: str | None
    score: float
    label: int


@dataclass
class EvalRecord:
    entries: list[FrameScore]
    aggregation: str = "frame"   # frame | video

    def __post_init__(self) -> None:
        for e in self.entries:
            if not 0.0 <= e.score <= 1.0:
                raise ValueError(f"score {e.score} outside [0, 1] for {e.sample_id}")
            if e.label not in (0, 1):
                raise ValueError(f"label {e.label} not binary for {e.sample_id}")

    def scores(self) -> np.ndarray:
        return np.array([e.score for e in self.entries], dtype=np.float64)

    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=np.int64)


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks with ties averaged."""
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    n = len(scores)
    while i < n:
        j = i
        while j < n and sorted_scores[j] == sorted_scores[i]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + j - 1) + 1.0
        i = j
    return ranks


def roc_auc(scores, labels) -> float:
    """Rank-based AUC with ties counted as one half.

    Equivalent to the normalized pair-counting statistic: the probability a
    random positive outscores a random negative.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be equal-length 1-D arrays")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError(
            f"AUC needs both classes, got {n_pos} positives and {n_neg} negatives"
        )
    ranks = _average_ranks(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc(record: EvalRecord) -> float:
    return roc_auc(record.scores(), record.labels())


def video_score(frame_scores, k: int = 32, rng=None) -> float:
    """Mean of up to ``k`` frame scores sampled without replacement."""
    frame_scores = np.asarray(frame_scores, dtype=np.float64)
    if frame_scores.size == 0:
        raise ValueError("video group has no frames")
    if frame_scores.size <= k:
        return float(frame_scores.mean())
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    picks = rng.choice(frame_scores.size, size=k, replace=False)
    return float(frame_scores[picks].mean())


def video_level_record(record: EvalRecord, k: int = 32, rng=None) -> EvalRecord:
    """Aggregate a frame-level record into one averaged score per group.

    Records without any group ids are returned unchanged (frame-level data).
    """
    if all(e.group_id is None for e in record.entries):
        return record
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    groups: dict[str, list[FrameScore]] = {}
    for e in record.entries:
        groups.setdefault(e.group_id if e.group_id is not None else e.sample_id, []).append(e)
    entries = []
    for gid in sorted(groups):
        members = groups[gid]
        labels = {m.label for m in members}
        if len(labels) != 1:
            raise ValueError(f"group {gid!r} mixes real and fake frames")
        score = video_score([m.score for m in members], k=k, rng=rng)
        entries.append(FrameScore(sample_id=gid, group_id=gid, score=score,
                                  label=members[0].label))
    return EvalRecord(entries=entries, aggregation="video")


def score_samples(model, samples: list[ImageSample], mode: str = "injected",
                  batch_size: int = 64) -> np.ndarray:
    """Fake-class probabilities for a list of samples."""
    model.eval()
    scores = []
    with torch.no_grad():
        for lo in range(0, len(samples), batch_size):
            chunk = samples[lo:lo + batch_size]
            images = torch.as_tensor(np.stack([s.pixels for s in chunk]), dtype=torch.float32)
            out = model(images, mode=mode)
            scores.append(out.logits.softmax(dim=-1)[:, 1].numpy())
    return np.concatenate(scores)


def evaluate_samples(model, samples: list[ImageSample], mode: str = "injected",
                     batch_size: int = 64) -> EvalRecord:
    scores = score_samples(model, samples, mode=mode, batch_size=batch_size)
    entries = [
        FrameScore(sample_id=s.sample_id, group_id=s.group_id,
                   score=float(score), label=s.label)
        for s, score in zip(samples, scores)
    ]
    return EvalRecord(entries=entries, aggregation="frame")


@dataclass
class ActivationReport:
    """Per-layer mean and standard deviation of the activation statistic,
    split by class."""

    real_mean: np.ndarray
    real_std: np.ndarray
    fake_mean: np.ndarray
    fake_std: np.ndarray

    @property
    def layer_count(self) -> int:
        return len(self.real_mean)


def layerwise_activation_report(model, samples: list[ImageSample],
                                batch_size: int = 64) -> ActivationReport:
    """Class-split per-layer activation means over a dataset."""
    labels = np.array([s.label for s in samples])
    if not ((labels == 0).any() and (labels == 1).any()):
        raise ValueError("activation report needs both classes present")
    model.eval()
    per_layer: list[list[np.ndarray]] = [[] for _ in range(model.config.num_layers)]
    with torch.no_grad():
        for lo in range(0, len(samples), batch_size):
            chunk = samples[lo:lo + batch_size]
            images = torch.as_tensor(np.stack([s.pixels for s in chunk]), dtype=torch.float32)
            out = model(images, mode="injected")
            profile = activation_profile(out.correlations)
            for l, a in enumerate(profile.per_layer):
                per_layer[l].append(a.numpy())
    stacked = [np.concatenate(chunks) for chunks in per_layer]
    real = labels == 0
    return ActivationReport(
        real_mean=np.array([a[real].mean() for a in stacked]),
        real_std=np.array([a[real].std() for a in stacked]),
        fake_mean=np.array([a[~real].mean() for a in stacked]),
        fake_std=np.array([a[~real].std() for a in stacked]),
    )


def pca_project(features: np.ndarray, dims: int = 2) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Center features and project onto the top principal axes.

    Returns (coordinates, components, mean); components are the leading
    eigenvectors of the sample covariance, strongest first.
    """
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    if n < dims:
        raise ValueError(f"need at least {dims} samples for {dims}-dim PCA, got {n}")
    mean = features.mean(axis=0)
    centered = features - mean
    cov = centered.T @ centered / max(n - 1, 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:dims]
    components = eigvecs[:, order]
    return centered @ components, components, mean


def final_layer_features(model, samples: list[ImageSample], mode: str = "injected",
                         batch_size: int = 64) -> np.ndarray:
    """Final-layer class-token features, one row per sample."""
    model.eval()
    rows = []
    with torch.no_grad():
        for lo in range(0, len(samples), batch_size):
            chunk = samples[lo:lo + batch_size]
            images = torch.as_tensor(np.stack([s.pixels for s in chunk]), dtype=torch.float32)
            out = model(images, mode=mode)
            rows.append(out.features.tokens[:, 0].numpy())
    return np.concatenate(rows)


def pca_features(model, samples: list[ImageSample], dims: int = 2,
                 mode: str = "injected") -> np.ndarray:
    """Per-sample PCA coordinates of the final-layer class-token features."""
    return pca_project(final_layer_features(model, samples, mode=mode), dims)[0]


def export_pca_csv(path: str | Path, samples: list[ImageSample], coords: np.ndarray) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label", "group", "x", "y"])
        for s, row in zip(samples, coords):
            writer.writerow([s.sample_id, s.label, s.group_id or "", row[0], row[1]])
    return path


@dataclass
class RobustnessTable:
    """AUC per degradation kind and severity; severity 0 is the clean run."""

    kinds: tuple[str, ...]
    severities: tuple[int, ...]
    auc: dict[tuple[str, int], float]

    def row(self, kind: str) -> list[float]:
        return [self.auc[(kind, s)] for s in self.severities]

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["kind"] + [f"severity_{s}" for s in self.severities])
            for kind in self.kinds:
                writer.writerow([kind] + [f"{v:.6f}" for v in self.row(kind)])
        return path


def robustness_sweep(model, samples: list[ImageSample], mode: str = "injected",
                     kinds=DEGRADATION_KINDS, max_severity: int = 5) -> RobustnessTable:
    """AUC under every degradation kind at severities 0..max_severity.

    The clean score (severity 0) is computed once and shared across kinds,
    since severity 0 is the identity for all of them.
    """
    severities = tuple(range(max_severity + 1))
    record = evaluate_samples(model, samples, mode=mode)
    clean_auc = auc(record)
    table: dict[tuple[str, int], float] = {}
    labels = np.array([s.label for s in samples])
    for kind in kinds:
        table[(kind, 0)] = clean_auc
        for severity in severities[1:]:
            degraded = [
                ImageSample(
                    pixels=degrade(s.pixels, kind, severity),
                    label=s.label,
                    outer_face_mask=s.outer_face_mask,
                    sample_id=s.sample_id,
                    group_id=s.group_id,
                    pair_id=s.pair_id,
                )
                for s in samples
            ]
            scores = score_samples(model, degraded, mode=mode)
            table[(kind, severity)] = roc_auc(scores, labels)
    return RobustnessTable(kinds=tuple(kinds), severities=severities, auc=table)
