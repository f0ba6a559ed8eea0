"""Instantiation of subject label maps from one blueprint.

Every subject replays the same blueprint rules but draws its own shape
instances, micro-transforms and final elastic warp, which yields cohorts
with consistent anatomy and realistic inter-subject variation.

Label scheme: 0 = background, 1 = container, rule ``j`` writes ``j + 2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .blueprint import BaseTransform, Blueprint
from .container import ContainerMask
from .errors import PoolMismatchError
from .rng import RngStream
from .shapepool import ShapePool, sample_instance
from .voxel import (
    AffineTransform,
    ElasticParams,
    LABEL_DTYPE,
    apply_affine,
    morphology,
    sample_elastic_field,
    spatial_scale,
    tight_crop,
    warp_volume,
)

CONTAINER_LABEL = 1

# Per-subject stream ids: 0 is the final elastic warp, rule j uses j + 1.
_ELASTIC_STREAM = 0


@dataclass(frozen=True)
class MicroRanges:
    """Sampling ranges for subject micro-transforms, at the reference size."""

    translation: tuple[float, float] = (-5.0, 5.0)
    rotation: tuple[float, float] = (-math.pi / 20.0, math.pi / 20.0)
    scale: tuple[float, float] = (0.95, 1.05)

    def scaled(self, factor: float) -> "MicroRanges":
        return replace(self, translation=(self.translation[0] * factor, self.translation[1] * factor))


@dataclass(frozen=True)
class FinalWarpRanges:
    """Ranges for the subtle whole-map elastic warp, at the reference size."""

    smoothing: tuple[float, float] = (15.0, 25.0)
    magnitude: tuple[float, float] = (15.0, 25.0)

    def scaled(self, factor: float) -> "FinalWarpRanges":
        return FinalWarpRanges(
            smoothing=(self.smoothing[0] * factor, self.smoothing[1] * factor),
            magnitude=(self.magnitude[0] * factor, self.magnitude[1] * factor),
        )


@dataclass(frozen=True)
class MicroTransform:
    """Small subject-specific perturbation of one placed organ."""

    translation: tuple[float, float, float]
    rotation: tuple[float, float, float]
    scale: tuple[float, float, float]

    @classmethod
    def identity(cls) -> "MicroTransform":
        return cls((0.0, 0.0, 0.0), (0.0, 0.0, 0.0), (1.0, 1.0, 1.0))


@dataclass(eq=False)
class SubjectLabelMap:
    """One subject's label volume plus everything drawn to produce it."""

    labels: np.ndarray
    index: int
    instance_choices: tuple[tuple[int, int], ...]
    micro_transforms: tuple[MicroTransform, ...]
    elastic: ElasticParams
    clip_report: tuple[tuple[int, float], ...]
    pre_warp: np.ndarray

    def fully_clipped_rules(self) -> set[int]:
        return {j for j, frac in self.clip_report if frac >= 1.0}


@dataclass(eq=False)
class Cohort:
    blueprint: Blueprint
    subjects: list[SubjectLabelMap]

    @property
    def n(self) -> int:
        return len(self.subjects)


def sample_micro_transform(rng: RngStream, ranges: MicroRanges) -> MicroTransform:
    gen = rng.generator()
    return MicroTransform(
        translation=tuple(float(v) for v in gen.uniform(*ranges.translation, size=3)),
        rotation=tuple(float(v) for v in gen.uniform(*ranges.rotation, size=3)),
        scale=tuple(float(v) for v in gen.uniform(*ranges.scale, size=3)),
    )


def transform_organ(
    mask: np.ndarray,
    base: BaseTransform,
    micro: MicroTransform,
) -> np.ndarray | None:
    """Apply the rule's base transform, then the subject's micro transform.

    The mask is pasted into a working cube large enough to hold any rotated
    and scaled result, resampled (nearest), morphed, resampled again, and
    tight-cropped.  Micro translation is deliberately NOT applied here: it
    is realized as a placement offset, because re-centring the cropped mask
    would cancel any shift baked into the resample.  Returns ``None`` when
    the organ vanished (e.g. eroded away).
    """
    diag = math.sqrt(sum(s * s for s in mask.shape))
    smax = max(base.scale) * max(micro.scale)
    side = int(math.ceil(diag * smax)) + 8
    if side % 2 == 0:
        side += 1
    cube = np.zeros((side,) * 3, dtype=bool)
    start = [(side - s) // 2 for s in mask.shape]
    cube[
        start[0] : start[0] + mask.shape[0],
        start[1] : start[1] + mask.shape[1],
        start[2] : start[2] + mask.shape[2],
    ] = mask
    center = ((side - 1) / 2.0,) * 3
    cube = apply_affine(cube, AffineTransform(rotation=base.rotation, scale=base.scale, center=center))
    cube = morphology(cube, base.morph_op, base.morph_iterations)
    if not cube.any():
        return None
    cube = apply_affine(cube, AffineTransform(rotation=micro.rotation, scale=micro.scale, center=center))
    if not cube.any():
        return None
    cropped, _ = tight_crop(cube)
    return cropped


def place_organ(
    canvas: np.ndarray,
    container_mask: np.ndarray,
    organ: np.ndarray,
    position: tuple[int, int, int],
    label: int,
) -> float:
    """Stamp ``organ`` into ``canvas``, centred at ``position``.

    The center of the organ's bounding box is aligned with ``position``.  A
    voxel takes ``label`` only where organ and container are both
    foreground; organ foreground overwrites anything already there, so
    later placements win.  Background outside the container is never
    written.  Returns the fraction of organ voxels clipped away by the
    container or the volume bounds (1.0 means nothing was placed).
    """
    if label < 2:
        raise ValueError(f"organ labels start at 2, got {label}")
    total = int(organ.sum())
    if total == 0:
        raise ValueError("organ mask must be non-empty")
    idx = np.argwhere(organ)
    bbox_center = (idx.min(axis=0) + idx.max(axis=0)) // 2
    offset = np.asarray(position, dtype=np.int64) - bbox_center
    dims = np.asarray(canvas.shape)
    dst_lo = np.maximum(offset, 0)
    dst_hi = np.minimum(offset + organ.shape, dims)
    if np.any(dst_lo >= dst_hi):
        return 1.0
    src_lo = dst_lo - offset
    src_hi = src_lo + (dst_hi - dst_lo)
    src = organ[src_lo[0] : src_hi[0], src_lo[1] : src_hi[1], src_lo[2] : src_hi[2]]
    dst = (slice(dst_lo[0], dst_hi[0]), slice(dst_lo[1], dst_hi[1]), slice(dst_lo[2], dst_hi[2]))
    write = src & container_mask[dst]
    canvas[dst][write] = label
    placed = int(write.sum())
    return 1.0 - placed / total


def instantiate_subject(
    bp: Blueprint,
    pool: ShapePool,
    container: ContainerMask,
    n: int,
    rng: RngStream,
    micro_ranges: MicroRanges | None = None,
    warp_ranges: FinalWarpRanges | None = None,
) -> SubjectLabelMap:
    """Realize subject ``n`` of a cohort from the shared blueprint.

    The canvas starts as the container (label 1); each rule samples an
    instance of its class, transforms it, and places it at the rule anchor
    shifted by the subject's micro translation.  A final subtle elastic
    warp is applied to the whole label map.

    Clip-report fractions are computed after all placements, so voxels
    overwritten by later rules count as clipped; a rule's label survives in
    the pre-warp canvas exactly when its fraction is below 1.
    """
    if bp.pool_fingerprint != pool.fingerprint():
        raise PoolMismatchError(
            "blueprint was sampled against a different pool "
            f"({bp.pool_fingerprint} != {pool.fingerprint()})"
        )
    dims = container.dims
    factor = spatial_scale(dims)
    if micro_ranges is None:
        micro_ranges = MicroRanges().scaled(factor)
    if warp_ranges is None:
        warp_ranges = FinalWarpRanges().scaled(factor)

    canvas = container.mask.astype(LABEL_DTYPE)  # container label is 1
    choices: list[tuple[int, int]] = []
    micros: list[MicroTransform] = []
    placed_total: dict[int, int] = {}
    for rule in bp.rules:
        rule_rng = rng.child(rule.index + 1)
        inst = sample_instance(pool, rule.class_id, rule_rng.child(0))
        micro = sample_micro_transform(rule_rng.child(1), micro_ranges)
        choices.append((rule.class_id, inst.subject_id))
        micros.append(micro)
        organ = transform_organ(inst.mask, rule.transform, micro)
        if organ is None:
            placed_total[rule.index] = 0
            continue
        position = tuple(
            int(round(p + t)) for p, t in zip(rule.position, micro.translation)
        )
        place_organ(canvas, container.mask, organ, position, rule.label)
        placed_total[rule.index] = int(organ.sum())

    survived = np.bincount(canvas.ravel(), minlength=bp.k + 2)
    clip: list[tuple[int, float]] = []
    for rule in bp.rules:
        total = placed_total[rule.index]
        frac = 1.0 if total == 0 else 1.0 - int(survived[rule.label]) / total
        if frac > 0.0:
            clip.append((rule.index, frac))

    pre_warp = canvas.copy()
    elastic_rng = rng.child(_ELASTIC_STREAM)
    gen = elastic_rng.generator()
    params = ElasticParams(
        sigma=float(gen.uniform(*warp_ranges.smoothing)),
        alpha=float(gen.uniform(*warp_ranges.magnitude)),
    )
    field = sample_elastic_field(dims, params, elastic_rng.child(0))
    labels = warp_volume(canvas, field, "nearest")

    return SubjectLabelMap(
        labels=labels,
        index=n,
        instance_choices=tuple(choices),
        micro_transforms=tuple(micros),
        elastic=params,
        clip_report=tuple(clip),
        pre_warp=pre_warp,
    )


def instantiate_cohort(
    bp: Blueprint,
    pool: ShapePool,
    container: ContainerMask,
    n_subjects: int,
    rng: RngStream,
    micro_ranges: MicroRanges | None = None,
    warp_ranges: FinalWarpRanges | None = None,
) -> Cohort:
    """Instantiate ``n_subjects`` label maps from one blueprint.

    Subject ``n`` draws from ``rng.child(n)``, so subjects can be generated
    in any order or in parallel without changing a single voxel.
    """
    if n_subjects < 1:
        raise ValueError(f"cohort needs at least one subject, got {n_subjects}")
    subjects = [
        instantiate_subject(bp, pool, container, n, rng.child(n), micro_ranges, warp_ranges)
        for n in range(n_subjects)
    ]
    return Cohort(blueprint=bp, subjects=subjects)
