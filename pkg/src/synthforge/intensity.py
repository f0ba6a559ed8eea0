"""Label-map-to-image rendering and post-processing augmentations.

A cohort shares a single intensity model: one Gaussian component per label
(K rules + the container), drawn once and reused by every subject so the
cohort looks like it was acquired under one imaging protocol.  Each image
is rendered by voxel-wise sampling, then degraded with a smooth bias field,
a gamma transform, resolution loss, and Gaussian noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .blueprint import Blueprint
from .rng import RngStream
from .voxel import INTENSITY_DTYPE

INTENSITY_CEIL = 255.0

# Per-image stream ids used by synthesize_image.
_RENDER_STREAM = 0
_PARAMS_STREAM = 1
_BIAS_STREAM = 2
_NOISE_STREAM = 3


@dataclass(frozen=True)
class GmmRanges:
    """Sampling ranges for the per-label Gaussian components."""

    mean: tuple[float, float] = (0.0, 255.0)
    variance: tuple[float, float] = (0.0, 5.0)


@dataclass(eq=True)
class GmmSpec:
    """Map from label id to (mean, variance); shared across a cohort."""

    components: dict[int, tuple[float, float]]

    def to_list(self) -> list[list[float]]:
        return [[int(k), *self.components[k]] for k in sorted(self.components)]

    @classmethod
    def from_list(cls, rows: list) -> "GmmSpec":
        return cls({int(r[0]): (float(r[1]), float(r[2])) for r in rows})


@dataclass(frozen=True)
class AugmentationRanges:
    """Sampling ranges for the per-subject augmentation draw."""

    bias_grid: tuple[int, int] = (4, 8)
    bias_log_amplitude: tuple[float, float] = (0.0, 0.4)
    gamma_log: tuple[float, float] = (-0.35, 0.35)
    resolution: tuple[float, float] = (1.0, 3.0)
    noise_std: tuple[float, float] = (0.0, 4.0)


@dataclass(frozen=True)
class AugmentationParams:
    """One subject's realized augmentation draw."""

    bias_grid: int
    bias_log_amplitude: float
    gamma: float
    resolution: tuple[float, float, float]
    noise_std: float

    def __post_init__(self) -> None:
        if self.gamma <= 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if any(f < 1 for f in self.resolution):
            raise ValueError(f"resolution factors must be >= 1, got {self.resolution}")
        if self.noise_std < 0 or self.bias_log_amplitude < 0:
            raise ValueError("noise std and bias amplitude must be non-negative")

    @classmethod
    def identity(cls) -> "AugmentationParams":
        return cls(bias_grid=4, bias_log_amplitude=0.0, gamma=1.0, resolution=(1.0, 1.0, 1.0), noise_std=0.0)

    def to_dict(self) -> dict:
        return {
            "bias_grid": self.bias_grid,
            "bias_log_amplitude": self.bias_log_amplitude,
            "gamma": self.gamma,
            "resolution": list(self.resolution),
            "noise_std": self.noise_std,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "AugmentationParams":
        return cls(
            bias_grid=int(doc["bias_grid"]),
            bias_log_amplitude=float(doc["bias_log_amplitude"]),
            gamma=float(doc["gamma"]),
            resolution=tuple(float(f) for f in doc["resolution"]),
            noise_std=float(doc["noise_std"]),
        )


def sample_gmm_spec(bp: Blueprint, rng: RngStream, ranges: GmmRanges | None = None) -> GmmSpec:
    """Draw the cohort's shared intensity model: K rule labels + container."""
    if ranges is None:
        ranges = GmmRanges()
    gen = rng.generator()
    components: dict[int, tuple[float, float]] = {}
    for label in range(1, bp.k + 2):
        components[label] = (float(gen.uniform(*ranges.mean)), float(gen.uniform(*ranges.variance)))
    return GmmSpec(components)


def render_intensity(labels: np.ndarray, gmm: GmmSpec, rng: RngStream) -> np.ndarray:
    """Voxel-wise sample from each label's Gaussian component.

    Background (label 0) renders as exactly 0.  Raises when the volume
    contains a nonzero label without a component.
    """
    present = np.unique(labels)
    present = present[present != 0]
    missing = [int(v) for v in present if int(v) not in gmm.components]
    if missing:
        raise KeyError(f"labels without an intensity component: {missing}")
    out = np.zeros(labels.shape, dtype=INTENSITY_DTYPE)
    gen = rng.generator()
    for value in present:
        mean, variance = gmm.components[int(value)]
        region = labels == value
        out[region] = gen.normal(mean, math.sqrt(variance), size=int(region.sum()))
    return out


def sample_augmentation_params(
    rng: RngStream, ranges: AugmentationRanges | None = None
) -> AugmentationParams:
    if ranges is None:
        ranges = AugmentationRanges()
    gen = rng.generator()
    return AugmentationParams(
        bias_grid=int(gen.integers(ranges.bias_grid[0], ranges.bias_grid[1] + 1)),
        bias_log_amplitude=float(gen.uniform(*ranges.bias_log_amplitude)),
        gamma=float(math.exp(gen.uniform(*ranges.gamma_log))),
        resolution=tuple(float(f) for f in gen.uniform(*ranges.resolution, size=3)),
        noise_std=float(gen.uniform(*ranges.noise_std)),
    )


# ---------------------------------------------------------------------------
# Augmentations
# ---------------------------------------------------------------------------


def apply_bias_field(img: np.ndarray, params: AugmentationParams, rng: RngStream) -> np.ndarray:
    """Multiply by exp(B) where B trilinearly upsamples a random control grid.

    Control values are i.i.d. U(-A, A) with A = ``bias_log_amplitude``, so
    every voxel's gain stays within [exp(-A), exp(A)].  A = 0 is a bit-exact
    identity.
    """
    amp = params.bias_log_amplitude
    if amp == 0.0:
        return img.copy()
    g = params.bias_grid
    grid = rng.generator().uniform(-amp, amp, size=(g, g, g))
    coords = np.meshgrid(
        *[np.arange(n, dtype=np.float64) * ((g - 1) / (n - 1)) for n in img.shape],
        indexing="ij",
    )
    field = ndimage.map_coordinates(grid, coords, order=1, mode="nearest")
    return (img * np.exp(field)).astype(INTENSITY_DTYPE)


def apply_gamma(img: np.ndarray, gamma: float) -> np.ndarray:
    """Gamma transform on the volume's own min/max normalization.

    Flat volumes pass through unchanged; ``gamma`` = 1 is an exact identity.
    """
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    if gamma == 1.0:
        return img.copy()
    lo = float(img.min())
    hi = float(img.max())
    if hi == lo:
        return img.copy()
    norm = (img - lo) / (hi - lo)
    return (norm**gamma * (hi - lo) + lo).astype(INTENSITY_DTYPE)


def _resample_linear(vol: np.ndarray, target: tuple[int, int, int]) -> np.ndarray:
    """Corner-aligned trilinear resample to ``target`` dims."""
    coords = np.meshgrid(
        *[
            np.linspace(0.0, n - 1.0, m) if m > 1 else np.array([(n - 1) / 2.0])
            for n, m in zip(vol.shape, target)
        ],
        indexing="ij",
    )
    return ndimage.map_coordinates(vol, coords, order=1, mode="nearest")


def apply_resolution_degradation(img: np.ndarray, factors: tuple[float, float, float]) -> np.ndarray:
    """Simulate lower acquisition resolution while preserving output dims.

    Per axis: Gaussian blur with std 0.42 * (factor - 1) (approximate
    anti-aliasing for the coarser grid), trilinear downsample by the factor,
    trilinear upsample back.  Factor 1 on every axis is an identity.
    """
    factors = tuple(float(f) for f in factors)
    if any(f < 1 for f in factors):
        raise ValueError(f"resolution factors must be >= 1, got {factors}")
    if all(f == 1.0 for f in factors):
        return img.copy()
    sigmas = [0.42 * (f - 1.0) for f in factors]
    blurred = ndimage.gaussian_filter(img.astype(np.float64), sigmas, mode="nearest")
    coarse_dims = tuple(max(2, int(round(n / f))) for n, f in zip(img.shape, factors))
    coarse = _resample_linear(blurred, coarse_dims)
    restored = _resample_linear(coarse, img.shape)
    return restored.astype(INTENSITY_DTYPE)


def apply_noise(img: np.ndarray, std: float, rng: RngStream) -> np.ndarray:
    """Add i.i.d. Gaussian noise; std = 0 is a bit-exact identity."""
    if std < 0:
        raise ValueError(f"noise std must be non-negative, got {std}")
    if std == 0.0:
        return img.copy()
    noise = rng.generator().normal(0.0, std, size=img.shape)
    return (img + noise).astype(INTENSITY_DTYPE)


def augment_image(
    img: np.ndarray,
    params: AugmentationParams,
    rng: RngStream,
    normalize: bool = True,
) -> np.ndarray:
    """Apply the fixed augmentation chain to a rendered image.

    Order: bias field, gamma, resolution degradation, noise; then clamp to
    [0, 255] and, when ``normalize``, rescale to [0, 1].
    """
    out = apply_bias_field(img, params, rng.child(_BIAS_STREAM))
    out = apply_gamma(out, params.gamma)
    out = apply_resolution_degradation(out, params.resolution)
    out = apply_noise(out, params.noise_std, rng.child(_NOISE_STREAM))
    out = np.clip(out, 0.0, INTENSITY_CEIL)
    if normalize:
        out /= INTENSITY_CEIL
    return out.astype(INTENSITY_DTYPE)


def synthesize_image(
    labels: np.ndarray,
    gmm: GmmSpec,
    rng: RngStream,
    params: AugmentationParams | None = None,
    ranges: AugmentationRanges | None = None,
    normalize: bool = True,
) -> tuple[np.ndarray, AugmentationParams]:
    """Render a label map and run the augmentation chain.

    When ``params`` is omitted it is drawn from a child stream of ``rng``.
    Returns the image (float32, range [0, 1] when normalized) and the
    realized augmentation parameters for the manifest.
    """
    if params is None:
        params = sample_augmentation_params(rng.child(_PARAMS_STREAM), ranges)
    raw = render_intensity(labels, gmm, rng.child(_RENDER_STREAM))
    return augment_image(raw, params, rng, normalize=normalize), params
