"""Two-view stochastic augmentation with counter-based determinism.

Parameters for each view are drawn from a generator keyed on
``(global seed, epoch, sample id, view index)``, so the augmentation applied
to a sample never depends on batch composition or data-loader parallelism.

The transformation set and strengths follow the MoCo v2 recipe: crop-and-resize
(scale 0.2..1.0), horizontal flip (p=0.5), colour jitter (0.4, 0.4, 0.4, 0.1
at p=0.8), random grayscale (p=0.2), and Gaussian blur (p=0.5, sigma 0.1..2.0).
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np
import torch
import torchvision.transforms.functional as TF

from .data import ImageSample, resize_pixels
from .errors import ValidationError

CROP_SCALE = (0.2, 1.0)
CROP_RATIO = (3.0 / 4.0, 4.0 / 3.0)
JITTER_STRENGTH = (0.4, 0.4, 0.4, 0.1)
P_FLIP = 0.5
P_JITTER = 0.8
P_GRAYSCALE = 0.2
P_BLUR = 0.5
BLUR_SIGMA = (0.1, 2.0)


@dataclass(frozen=True)
class AugmentParams:
    """One view's sampled transformation parameters."""

    hflip: bool
    crop_box: tuple[int, int, int, int]  # (x, y, w, h) in source coordinates
    color_jitter: tuple[float, float, float, float] | None  # brightness, contrast, saturation, hue
    to_grayscale: bool
    blur_sigma: float | None

    def validate(self, image_shape: tuple[int, int]) -> None:
        height, width = image_shape
        x, y, w, h = self.crop_box
        if w < 1 or h < 1 or x < 0 or y < 0 or x + w > width or y + h > height:
            raise ValidationError(f"crop box {self.crop_box} outside {width}x{height} image")
        if self.blur_sigma is not None and not BLUR_SIGMA[0] <= self.blur_sigma <= BLUR_SIGMA[1]:
            raise ValidationError(f"blur sigma {self.blur_sigma} outside {BLUR_SIGMA}")


@dataclass(frozen=True, eq=False)
class ViewPair:
    """Two independently augmented views of one source image."""

    view_a: np.ndarray  # [S, S, C] float32 in [0, 1]
    view_b: np.ndarray
    source_id: str


def view_rng(seed: int, epoch: int, sample_id: str, view_index: int) -> np.random.Generator:
    """Generator keyed on the full augmentation coordinates."""
    id_hash = zlib.crc32(sample_id.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, id_hash, view_index]))


def _sample_crop(rng: np.random.Generator, height: int, width: int) -> tuple[int, int, int, int]:
    area = float(height * width)
    log_ratio = (math.log(CROP_RATIO[0]), math.log(CROP_RATIO[1]))
    for _ in range(10):
        target_area = area * rng.uniform(*CROP_SCALE)
        aspect = math.exp(rng.uniform(*log_ratio))
        w = int(round(math.sqrt(target_area * aspect)))
        h = int(round(math.sqrt(target_area / aspect)))
        if 1 <= w <= width and 1 <= h <= height:
            x = int(rng.integers(0, width - w + 1))
            y = int(rng.integers(0, height - h + 1))
            return x, y, w, h
    # Fallback: central crop of the largest in-range square.
    side = max(1, min(height, width))
    x = (width - side) // 2
    y = (height - side) // 2
    return x, y, side, side


def sample_params(rng: np.random.Generator, image_shape: tuple[int, int]) -> AugmentParams:
    """Draw one view's parameters, advancing ``rng``.

    Draw order is fixed (flip, crop, jitter, grayscale, blur) so a given
    generator state always yields the same parameters.
    """
    height, width = image_shape
    if height < 1 or width < 1:
        raise ValidationError(f"invalid image shape {image_shape}")
    hflip = rng.uniform() < P_FLIP
    crop_box = _sample_crop(rng, height, width)
    jitter = None
    if rng.uniform() < P_JITTER:
        b, c, s, h = JITTER_STRENGTH
        jitter = (
            float(rng.uniform(1.0 - b, 1.0 + b)),
            float(rng.uniform(1.0 - c, 1.0 + c)),
            float(rng.uniform(1.0 - s, 1.0 + s)),
            float(rng.uniform(-h, h)),
        )
    to_grayscale = rng.uniform() < P_GRAYSCALE
    blur_sigma = float(rng.uniform(*BLUR_SIGMA)) if rng.uniform() < P_BLUR else None
    return AugmentParams(
        hflip=hflip,
        crop_box=crop_box,
        color_jitter=jitter,
        to_grayscale=to_grayscale,
        blur_sigma=blur_sigma,
    )


def identity_params(image_shape: tuple[int, int]) -> AugmentParams:
    """Full-image crop with every stochastic transform disabled."""
    height, width = image_shape
    return AugmentParams(
        hflip=False,
        crop_box=(0, 0, width, height),
        color_jitter=None,
        to_grayscale=False,
        blur_sigma=None,
    )


def _blur_kernel_size(size: int) -> int:
    # 10% of the image side, rounded up to the next odd integer.
    k = math.ceil(0.1 * size)
    return k if k % 2 == 1 else k + 1


def apply_view(sample: ImageSample, params: AugmentParams, size: int) -> np.ndarray:
    """Apply one view's transforms in fixed order; output [size, size, C] in [0, 1].

    Order: crop-and-resize, horizontal flip, colour jitter, grayscale, blur.
    """
    params.validate(sample.pixels.shape[:2])
    x, y, w, h = params.crop_box
    view = resize_pixels(sample.pixels[y : y + h, x : x + w], size)
    if params.hflip:
        view = view[:, ::-1]

    tensor = torch.from_numpy(np.ascontiguousarray(view)).permute(2, 0, 1)
    if params.color_jitter is not None:
        brightness, contrast, saturation, hue = params.color_jitter
        tensor = TF.adjust_brightness(tensor, brightness)
        tensor = TF.adjust_contrast(tensor, contrast)
        tensor = TF.adjust_saturation(tensor, saturation)
        tensor = TF.adjust_hue(tensor, hue)
    if params.to_grayscale:
        tensor = TF.rgb_to_grayscale(tensor, num_output_channels=tensor.shape[0])
    if params.blur_sigma is not None:
        k = _blur_kernel_size(size)
        tensor = TF.gaussian_blur(tensor, kernel_size=[k, k], sigma=[params.blur_sigma, params.blur_sigma])
    return tensor.clamp(0.0, 1.0).permute(1, 2, 0).contiguous().numpy()


def two_views(sample: ImageSample, size: int, seed: int, epoch: int = 0) -> ViewPair:
    """Two independent augmented views of ``sample`` at the given coordinates."""
    shape = sample.pixels.shape[:2]
    params_a = sample_params(view_rng(seed, epoch, sample.id, 0), shape)
    params_b = sample_params(view_rng(seed, epoch, sample.id, 1), shape)
    return ViewPair(
        view_a=apply_view(sample, params_a, size),
        view_b=apply_view(sample, params_b, size),
        source_id=sample.id,
    )
