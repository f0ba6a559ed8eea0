"""Anatomical container: the binary scaffold every organ is placed into.

A random primitive (ellipsoid, cylinder or cone) is rasterized at the grid
center, rotated and anisotropically scaled, then elastically deformed.  The
result bounds all later organ placement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ContainerResampleError
from .rng import RngStream
from .voxel import (
    AffineTransform,
    ElasticParams,
    Primitive,
    apply_affine,
    grid_center,
    rasterize_primitive,
    sample_elastic_field,
    spatial_scale,
    warp_volume,
    PRIMITIVE_KINDS,
)

# Foreground-fraction window outside which a container counts as degenerate.
MIN_FILL = 0.005
MAX_FILL = 0.95

MAX_ATTEMPTS = 5


@dataclass(frozen=True)
class ContainerRanges:
    """Sampling ranges for container specs, at the reference grid size."""

    radius: tuple[float, float] = (40.0, 60.0)
    height: tuple[float, float] = (50.0, 120.0)
    rotation: tuple[float, float] = (-0.2 * math.pi, 0.2 * math.pi)
    scale: tuple[float, float] = (0.8, 1.2)
    elastic_smoothing: tuple[float, float] = (15.0, 30.0)
    elastic_magnitude: tuple[float, float] = (15.0, 30.0)

    def scaled(self, factor: float) -> "ContainerRanges":
        """Rescale the spatial ranges; rotation and scale are dimensionless."""
        stretch = lambda r: (r[0] * factor, r[1] * factor)
        return replace(
            self,
            radius=stretch(self.radius),
            height=stretch(self.height),
            elastic_smoothing=stretch(self.elastic_smoothing),
            elastic_magnitude=stretch(self.elastic_magnitude),
        )


@dataclass(frozen=True)
class ContainerSpec:
    """The realized random draw that defines one container."""

    kind: str
    radius: float
    height: float
    rotation: tuple[float, float, float]
    scale: tuple[float, float, float]
    elastic: ElasticParams

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "radius": self.radius,
            "height": self.height,
            "rotation": list(self.rotation),
            "scale": list(self.scale),
            "elastic": {"sigma": self.elastic.sigma, "alpha": self.elastic.alpha},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ContainerSpec":
        return cls(
            kind=doc["kind"],
            radius=float(doc["radius"]),
            height=float(doc["height"]),
            rotation=tuple(float(v) for v in doc["rotation"]),
            scale=tuple(float(v) for v in doc["scale"]),
            elastic=ElasticParams(float(doc["elastic"]["sigma"]), float(doc["elastic"]["alpha"])),
        )


@dataclass(eq=False)
class ContainerMask:
    """Binary scaffold mask plus the spec that produced it."""

    mask: np.ndarray
    spec: ContainerSpec

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.mask.shape


def sample_container_spec(
    dims: tuple[int, int, int],
    rng: RngStream,
    ranges: ContainerRanges | None = None,
) -> ContainerSpec:
    """Draw a container spec for a grid of size ``dims``.

    When ``ranges`` is omitted, the reference-size defaults are stretched by
    ``dims / 128``; explicit ranges are taken verbatim (assumed already
    expressed for ``dims``).
    """
    if any(d < 32 for d in dims):
        raise ValueError(f"grid dims must be at least 32 per axis, got {dims}")
    if ranges is None:
        ranges = ContainerRanges().scaled(spatial_scale(dims))
    gen = rng.generator()
    kind = PRIMITIVE_KINDS[int(gen.integers(len(PRIMITIVE_KINDS)))]
    radius = float(gen.uniform(*ranges.radius))
    height = float(gen.uniform(*ranges.height))
    rotation = tuple(float(a) for a in gen.uniform(*ranges.rotation, size=3))
    scale = tuple(float(s) for s in gen.uniform(*ranges.scale, size=3))
    sigma = float(gen.uniform(*ranges.elastic_smoothing))
    alpha = float(gen.uniform(*ranges.elastic_magnitude))
    return ContainerSpec(
        kind=kind, radius=radius, height=height, rotation=rotation, scale=scale,
        elastic=ElasticParams(sigma, alpha),
    )


def generate_container(
    spec: ContainerSpec,
    dims: tuple[int, int, int],
    rng: RngStream,
) -> ContainerMask:
    """Realize a spec: rasterize, affine-transform, elastically deform.

    Raises :class:`ContainerResampleError` when the resulting mask is empty
    or fills less than 0.5% / more than 95% of the grid; callers should
    retry with a fresh child stream (see :func:`make_container`).
    """
    if spec.kind == "ellipsoid":
        prim = Primitive("ellipsoid", radius=(spec.radius,) * 3)
    else:
        prim = Primitive(spec.kind, radius=spec.radius, height=spec.height)
    center = grid_center(dims)
    mask = rasterize_primitive(prim, dims, center)
    xf = AffineTransform(rotation=spec.rotation, scale=spec.scale, center=center)
    mask = apply_affine(mask, xf, "nearest")
    field = sample_elastic_field(dims, spec.elastic, rng)
    mask = warp_volume(mask, field, "nearest")
    fill = mask.mean()
    if not MIN_FILL < fill < MAX_FILL:
        raise ContainerResampleError(
            f"degenerate container: foreground fraction {fill:.4f} outside ({MIN_FILL}, {MAX_FILL})"
        )
    return ContainerMask(mask=mask, spec=spec)


def make_container(
    dims: tuple[int, int, int],
    rng: RngStream,
    ranges: ContainerRanges | None = None,
    max_attempts: int = MAX_ATTEMPTS,
) -> tuple[ContainerMask, int]:
    """Sample specs until one realizes a non-degenerate container.

    Returns the container and the attempt index that succeeded (recorded in
    manifests so regeneration can skip straight to it).
    """
    last: ContainerResampleError | None = None
    for attempt in range(max_attempts):
        attempt_rng = rng.child(attempt)
        spec = sample_container_spec(dims, attempt_rng.child(0), ranges)
        try:
            return generate_container(spec, dims, attempt_rng.child(1)), attempt
        except ContainerResampleError as exc:
            last = exc
    raise ContainerResampleError(
        f"no valid container after {max_attempts} attempts: {last}"
    )
