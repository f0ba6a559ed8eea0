"""Voxel-grid foundation: rasterization, resampling, elastic fields, morphology.

Conventions used throughout the package:

- volumes are numpy arrays indexed ``[x, y, z]``;
- label maps are ``uint16`` (0 = background), intensity images ``float32``,
  binary masks ``bool``;
- voxel centers sit at integer coordinates;
- samples that fall outside the grid always read as background (0).

All functions are pure; anything stochastic takes an :class:`RngStream`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .rng import RngStream

LABEL_DTYPE = np.uint16
INTENSITY_DTYPE = np.float32

PRIMITIVE_KINDS = ("ellipsoid", "cylinder", "cone")
MORPH_OPS = ("erode", "dilate", "open", "close")

# Grid size the default parameter ranges are expressed at.  Spatial ranges
# are multiplied by dims / REFERENCE_SIZE when generating other sizes.
REFERENCE_SIZE = 128

# Full 3x3x3 cube (26-connectivity).
_CUBE27 = np.ones((3, 3, 3), dtype=bool)


def spatial_scale(dims: tuple[int, int, int]) -> float:
    """Scalar factor by which reference-size spatial ranges are stretched."""
    return float(np.mean([d / REFERENCE_SIZE for d in dims]))


def grid_center(dims: tuple[int, int, int]) -> tuple[float, float, float]:
    """Geometric center of the voxel grid (may fall between voxel centers)."""
    return tuple((d - 1) / 2.0 for d in dims)


# ---------------------------------------------------------------------------
# Affine transforms
# ---------------------------------------------------------------------------


def _rotation_matrix(angles: tuple[float, float, float]) -> np.ndarray:
    ax, ay, az = angles
    cx, sx = math.cos(ax), math.sin(ax)
    cy, sy = math.cos(ay), math.sin(ay)
    cz, sz = math.cos(az), math.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


@dataclass(frozen=True)
class AffineTransform:
    """Rotation and anisotropic scale about ``center``, then translation.

    Euler angles are applied intrinsically as Rz @ Ry @ Rx.  Forward mapping:
    ``y = R @ S @ (x - center) + center + translation``.
    """

    rotation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    scale: tuple[float, float, float] = (1.0, 1.0, 1.0)
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        if any(s <= 0 for s in self.scale):
            raise ValueError(f"scale factors must be strictly positive, got {self.scale}")

    def is_identity(self) -> bool:
        return (
            tuple(self.rotation) == (0.0, 0.0, 0.0)
            and tuple(self.scale) == (1.0, 1.0, 1.0)
            and tuple(self.translation) == (0.0, 0.0, 0.0)
        )

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix of the forward mapping."""
        a = _rotation_matrix(self.rotation) @ np.diag(self.scale)
        m = np.eye(4)
        m[:3, :3] = a
        m[:3, 3] = np.asarray(self.center) + np.asarray(self.translation) - a @ np.asarray(self.center)
        return m


def _interp_order(vol: np.ndarray, interpolation: str) -> int:
    if interpolation == "nearest":
        return 0
    if interpolation == "trilinear":
        if vol.dtype == bool or vol.dtype.kind in "iu":
            raise ValueError("trilinear interpolation would invent label values; use nearest")
        return 1
    raise ValueError(f"unknown interpolation {interpolation!r}")


def apply_affine(vol: np.ndarray, xf: AffineTransform, interpolation: str = "nearest") -> np.ndarray:
    """Resample ``vol`` through ``xf`` by inverse mapping.

    Output voxel ``v`` takes the value of the input at ``xf^-1(v)``; samples
    outside the grid read as 0.  Label (integer/bool) volumes must use
    nearest interpolation.  The identity transform is a bit-exact copy.
    """
    order = _interp_order(vol, interpolation)
    if xf.is_identity():
        return vol.copy()
    minv = np.linalg.inv(xf.matrix())
    work = vol.view(np.uint8) if vol.dtype == bool else vol
    out = ndimage.affine_transform(
        work, minv[:3, :3], offset=minv[:3, 3], order=order,
        mode="constant", cval=0.0, prefilter=False,
    )
    return out.astype(vol.dtype, copy=False)


# ---------------------------------------------------------------------------
# Primitive rasterization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Primitive:
    """Analytic solid to rasterize.

    Ellipsoids take per-axis ``radius`` (a scalar means a sphere); cylinders
    and cones take a base ``radius`` plus ``height`` along +z, the cone apex
    pointing to +z.
    """

    kind: str
    radius: float | tuple[float, float, float]
    height: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in PRIMITIVE_KINDS:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        radii = self.radii()
        if any(r <= 0 for r in radii):
            raise ValueError(f"degenerate primitive: radius {self.radius!r}")
        if self.kind in ("cylinder", "cone"):
            if self.height is None or self.height <= 0:
                raise ValueError(f"degenerate primitive: height {self.height!r}")

    def radii(self) -> tuple[float, float, float]:
        if np.isscalar(self.radius):
            return (float(self.radius),) * 3
        return tuple(float(r) for r in self.radius)


def rasterize_primitive(
    prim: Primitive,
    dims: tuple[int, int, int],
    center: tuple[float, float, float],
) -> np.ndarray:
    """Boolean mask of the voxels whose centers lie inside the solid."""
    nx, ny, nz = dims
    x = np.arange(nx, dtype=np.float64)[:, None, None] - center[0]
    y = np.arange(ny, dtype=np.float64)[None, :, None] - center[1]
    z = np.arange(nz, dtype=np.float64)[None, None, :] - center[2]
    if prim.kind == "ellipsoid":
        rx, ry, rz = prim.radii()
        return (x / rx) ** 2 + (y / ry) ** 2 + (z / rz) ** 2 <= 1.0
    r = prim.radii()[0]
    h = float(prim.height)
    radial2 = x**2 + y**2
    in_slab = np.abs(z) <= h / 2
    if prim.kind == "cylinder":
        return in_slab & (radial2 <= r**2)
    # cone: allowed radius tapers linearly from r at the base (-h/2) to 0 at
    # the apex (+h/2)
    allowed = r * (h / 2 - z) / h
    return in_slab & (radial2 <= allowed**2)


# ---------------------------------------------------------------------------
# Elastic deformation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ElasticParams:
    """Smoothing (voxels) and peak displacement magnitude (voxels)."""

    sigma: float
    alpha: float

    def __post_init__(self) -> None:
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be non-negative, got {self.alpha}")


def sample_elastic_field(
    dims: tuple[int, int, int],
    params: ElasticParams,
    rng: RngStream,
) -> np.ndarray:
    """Random smooth displacement field, shape ``(3, nx, ny, nz)``.

    Per-axis U(-1, 1) noise is Gaussian-smoothed (std ``sigma`` voxels,
    truncated at 3 sigma, zero-padded borders), then the whole field is
    rescaled so the largest per-voxel displacement norm equals ``alpha``.
    """
    if params.alpha == 0:
        return np.zeros((3, *dims), dtype=np.float32)
    noise = rng.generator().uniform(-1.0, 1.0, size=(3, *dims))
    field = np.empty_like(noise)
    for axis in range(3):
        ndimage.gaussian_filter(
            noise[axis], params.sigma, truncate=3.0, mode="constant", cval=0.0,
            output=field[axis],
        )
    peak = np.sqrt(np.einsum("cxyz,cxyz->xyz", field, field).max())
    field *= params.alpha / peak
    return field.astype(np.float32)


def warp_volume(vol: np.ndarray, field: np.ndarray, interpolation: str = "nearest") -> np.ndarray:
    """Backward warp: output at ``v`` samples ``vol`` at ``v + field[:, v]``.

    Out-of-bounds samples read as 0; an all-zero field is a bit-exact copy.
    """
    if field.shape != (3, *vol.shape):
        raise ValueError(f"field shape {field.shape} does not match volume {vol.shape}")
    order = _interp_order(vol, interpolation)
    if not field.any():
        return vol.copy()
    coords = np.indices(vol.shape, dtype=np.float64)
    coords += field
    work = vol.view(np.uint8) if vol.dtype == bool else vol
    out = ndimage.map_coordinates(work, coords, order=order, mode="constant", cval=0.0)
    return out.astype(vol.dtype, copy=False)


# ---------------------------------------------------------------------------
# Binary morphology
# ---------------------------------------------------------------------------


def morphology(vol: np.ndarray, op: str, iterations: int = 1) -> np.ndarray:
    """Binary morphology with the full 3x3x3 structuring element.

    Out-of-bounds voxels read as background for every operation.  ``open``
    runs ``iterations`` erosions then as many dilations; ``close`` is the
    dual.  Returns a boolean mask.
    """
    if op not in MORPH_OPS:
        raise ValueError(f"unknown morphological op {op!r}")
    if not 1 <= iterations <= 3:
        raise ValueError(f"iterations must be in 1..3, got {iterations}")
    mask = np.asarray(vol)
    if mask.dtype != bool:
        if not np.isin(mask, (0, 1)).all():
            raise ValueError("morphology input must be binary")
        mask = mask.astype(bool)

    def erode(m: np.ndarray) -> np.ndarray:
        return ndimage.binary_erosion(m, _CUBE27, iterations=iterations, border_value=0)

    def dilate(m: np.ndarray) -> np.ndarray:
        return ndimage.binary_dilation(m, _CUBE27, iterations=iterations, border_value=0)

    if op == "erode":
        return erode(mask)
    if op == "dilate":
        return dilate(mask)
    if op == "open":
        return dilate(erode(mask))
    return erode(dilate(mask))


def tight_crop(mask: np.ndarray) -> tuple[np.ndarray, tuple[int, int, int, int, int, int]]:
    """Crop a binary mask to its bounding box.

    Returns the cropped mask and the inclusive bounding box
    ``(x0, x1, y0, y1, z0, z1)`` in the input grid.  Raises on empty input.
    """
    idx = np.argwhere(mask)
    if idx.size == 0:
        raise ValueError("cannot crop an empty mask")
    lo = idx.min(axis=0)
    hi = idx.max(axis=0)
    cropped = mask[lo[0] : hi[0] + 1, lo[1] : hi[1] + 1, lo[2] : hi[2] + 1]
    return np.ascontiguousarray(cropped), (int(lo[0]), int(hi[0]), int(lo[1]), int(hi[1]), int(lo[2]), int(hi[2]))
