"""Deterministic image degradations for robustness sweeps."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .synthesis import _apply_saturation, jpeg_roundtrip

DEGRADATION_KINDS = ("jpeg", "saturation", "gaussian_blur", "gaussian_noise", "contrast")

_JPEG_QUALITY = [90, 70, 50, 30, 15]
_SATURATION_FACTOR = [0.75, 0.55, 0.40, 0.25, 0.10]
_BLUR_SIGMA = [0.6, 1.0, 1.6, 2.4, 3.5]
_NOISE_STD = [0.02, 0.05, 0.09, 0.14, 0.20]
_CONTRAST_FACTOR = [0.75, 0.55, 0.40, 0.28, 0.18]
_NOISE_SEED_BASE = 0x5EED


def degrade(image: np.ndarray, kind: str, severity: int) -> np.ndarray:
    """Apply one degradation at a severity in 0..5; severity 0 is the identity.

    Every kind is deterministic, including gaussian_noise whose draw is seeded
    from the severity, so repeated calls agree exactly.
    """
    if kind not in DEGRADATION_KINDS:
        raise ValueError(f"unknown degradation kind {kind!r}")
    if not 0 <= severity <= 5:
        raise ValueError(f"severity must be in 0..5, got {severity}")
    image = np.asarray(image, dtype=np.float32)
    if severity == 0:
        return image.copy()
    level = severity - 1
    if kind == "jpeg":
        return jpeg_roundtrip(image, _JPEG_QUALITY[level])
    if kind == "saturation":
        factor = _SATURATION_FACTOR[level]
        return _apply_saturation(image.astype(np.float64), factor - 1.0).astype(np.float32)
    if kind == "gaussian_blur":
        sigma = _BLUR_SIGMA[level]
        out = np.stack(
            [ndimage.gaussian_filter(image[..., c], sigma) for c in range(3)], axis=-1
        )
        return np.clip(out, 0.0, 1.0).astype(np.float32)
    if kind == "gaussian_noise":
        rng = np.random.default_rng(_NOISE_SEED_BASE + severity)
        noise = rng.normal(0.0, _NOISE_STD[level], size=image.shape)
        return np.clip(image + noise, 0.0, 1.0).astype(np.float32)
    # contrast
    factor = _CONTRAST_FACTOR[level]
    mean = image.mean()
    return np.clip(mean + (image - mean) * factor, 0.0, 1.0).astype(np.float32)
