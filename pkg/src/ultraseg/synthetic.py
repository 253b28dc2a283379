"""Synthetic desk-scale corpus: bright ellipses on speckle-noise backgrounds.

Used by the ``smoke`` pipeline and the test suite so the full two-stage
workflow can run without any clinical data.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .data import ImageSample, Source

_RAYLEIGH_MEAN = 1.2533  # mean of Rayleigh(1) is sqrt(pi / 2)


def _upsample(field: np.ndarray, size: int) -> np.ndarray:
    t = torch.from_numpy(field.astype(np.float32))[None, None]
    return F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)[0, 0].numpy()


def _speckle(rng: np.random.Generator, size: int, mean: float) -> np.ndarray:
    # Spatially correlated multiplicative noise: coarse Rayleigh blobs with a
    # little per-pixel grain, as in real ultrasound texture.
    coarse = rng.rayleigh(scale=1.0, size=(max(size // 4, 2), max(size // 4, 2)))
    fine = rng.rayleigh(scale=1.0, size=(size, size))
    texture = 0.75 * _upsample(coarse, size) + 0.25 * fine
    return (mean * texture / _RAYLEIGH_MEAN).astype(np.float32)


def make_synthetic_sample(sample_id: str, rng: np.random.Generator, size: int = 32) -> ImageSample:
    """One grayscale image with a bright elliptical lesion and its exact mask."""
    cy, cx = rng.uniform(0.25 * size, 0.75 * size, size=2)
    a = rng.uniform(0.12 * size, 0.32 * size)
    b = rng.uniform(0.12 * size, 0.32 * size)
    theta = rng.uniform(0.0, np.pi)
    background_level = rng.uniform(0.15, 0.35)
    lesion_level = rng.uniform(0.60, 0.90)

    ys, xs = np.mgrid[0:size, 0:size].astype(np.float32)
    dy, dx = ys - cy, xs - cx
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    u = dx * cos_t + dy * sin_t
    v = -dx * sin_t + dy * cos_t
    mask = ((u / a) ** 2 + (v / b) ** 2 <= 1.0).astype(np.uint8)

    background = _speckle(rng, size, mean=background_level)
    lesion = _speckle(rng, size, mean=lesion_level)
    gray = np.where(mask == 1, lesion, background)
    gray = np.clip(gray, 0.0, 1.0).astype(np.float32)
    pixels = np.repeat(gray[:, :, None], 3, axis=2)
    return ImageSample(id=sample_id, source=Source.SYNTHETIC, pixels=pixels, mask=mask)


def make_synthetic_corpus(n: int = 200, size: int = 32, seed: int = 0) -> list[ImageSample]:
    """Deterministic list of ``n`` synthetic samples (ids ``synthetic-0000`` ...)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, size, n]))
    return [make_synthetic_sample(f"synthetic-{i:04d}", rng, size=size) for i in range(n)]
