"""Reusable organ-layout template shared by every subject of a cohort.

A blueprint fixes, for each of its K rules, which shape class to draw from,
where to anchor it inside the container, and a base transform (affine plus
a morphological op).  Reusing one blueprint across subjects gives a cohort
its consistent anatomy; sampling many blueprints gives dataset diversity.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .container import ContainerMask, ContainerSpec
from .rng import RngStream
from .shapepool import ShapePool
from .voxel import MORPH_OPS

BLUEPRINT_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class BlueprintRanges:
    """Sampling ranges for blueprints; all dimensionless."""

    rules: tuple[int, int] = (30, 100)
    rotation: tuple[float, float] = (0.0, 2.0 * math.pi)
    scale: tuple[float, float] = (0.5, 1.5)
    morph_iterations: tuple[int, int] = (1, 3)


@dataclass(frozen=True)
class BaseTransform:
    """Cohort-wide transform applied to every instance drawn for one rule."""

    rotation: tuple[float, float, float]
    scale: tuple[float, float, float]
    morph_op: str
    morph_iterations: int

    def __post_init__(self) -> None:
        if self.morph_op not in MORPH_OPS:
            raise ValueError(f"unknown morphological op {self.morph_op!r}")
        if not 1 <= self.morph_iterations <= 3:
            raise ValueError(f"morph iterations must be in 1..3, got {self.morph_iterations}")


@dataclass(frozen=True)
class OrganRule:
    """One pseudo-organ: shape class, anchor voxel, base transform."""

    index: int
    class_id: int
    position: tuple[int, int, int]
    transform: BaseTransform

    @property
    def label(self) -> int:
        """Label value this rule writes into subject label maps."""
        return self.index + 2


@dataclass(frozen=True)
class Blueprint:
    rules: tuple[OrganRule, ...]
    container: ContainerSpec
    pool_fingerprint: str

    @property
    def k(self) -> int:
        return len(self.rules)

    def __post_init__(self) -> None:
        if [r.index for r in self.rules] != list(range(len(self.rules))):
            raise ValueError("rule indices must be dense 0..K-1")


def sample_blueprint(
    pool: ShapePool,
    container: ContainerMask,
    rng: RngStream,
    ranges: BlueprintRanges | None = None,
) -> Blueprint:
    """Draw a blueprint: K ~ U{30..100} rules anchored inside the container.

    Class indices are uniform over pool classes (repeats allowed); anchor
    positions are uniform over the container's foreground voxels, addressed
    through the sorted foreground-voxel list so the draw is independent of
    how the mask was produced.
    """
    if ranges is None:
        ranges = BlueprintRanges()
    foreground = np.argwhere(container.mask)
    if foreground.size == 0:
        raise ValueError("container mask is empty")
    gen = rng.generator()
    k = int(gen.integers(ranges.rules[0], ranges.rules[1] + 1))
    rules = []
    for j in range(k):
        class_id = int(gen.integers(pool.n_classes))
        position = tuple(int(v) for v in foreground[int(gen.integers(len(foreground)))])
        rotation = tuple(float(a) for a in gen.uniform(*ranges.rotation, size=3))
        scale = tuple(float(s) for s in gen.uniform(*ranges.scale, size=3))
        morph_op = MORPH_OPS[int(gen.integers(len(MORPH_OPS)))]
        iterations = int(gen.integers(ranges.morph_iterations[0], ranges.morph_iterations[1] + 1))
        rules.append(
            OrganRule(
                index=j,
                class_id=class_id,
                position=position,
                transform=BaseTransform(rotation, scale, morph_op, iterations),
            )
        )
    return Blueprint(rules=tuple(rules), container=container.spec, pool_fingerprint=pool.fingerprint())


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def blueprint_to_dict(bp: Blueprint) -> dict:
    return {
        "schema_version": BLUEPRINT_SCHEMA_VERSION,
        "k": bp.k,
        "pool_fingerprint": bp.pool_fingerprint,
        "container": bp.container.to_dict(),
        "rules": [
            {
                "index": r.index,
                "class_id": r.class_id,
                "position": list(r.position),
                "rotation": list(r.transform.rotation),
                "scale": list(r.transform.scale),
                "morph_op": r.transform.morph_op,
                "morph_iterations": r.transform.morph_iterations,
            }
            for r in bp.rules
        ],
    }


def blueprint_from_dict(doc: dict) -> Blueprint:
    if doc.get("schema_version") != BLUEPRINT_SCHEMA_VERSION:
        raise ValueError(f"unsupported blueprint schema {doc.get('schema_version')!r}")
    rules = tuple(
        OrganRule(
            index=int(r["index"]),
            class_id=int(r["class_id"]),
            position=tuple(int(v) for v in r["position"]),
            transform=BaseTransform(
                rotation=tuple(float(v) for v in r["rotation"]),
                scale=tuple(float(v) for v in r["scale"]),
                morph_op=r["morph_op"],
                morph_iterations=int(r["morph_iterations"]),
            ),
        )
        for r in doc["rules"]
    )
    if len(rules) != int(doc["k"]):
        raise ValueError("rule count does not match recorded k")
    return Blueprint(
        rules=rules,
        container=ContainerSpec.from_dict(doc["container"]),
        pool_fingerprint=doc["pool_fingerprint"],
    )


def serialize_blueprint(bp: Blueprint) -> str:
    """Canonical JSON: sorted keys, compact separators, repr floats.

    Two serializations of equal blueprints are byte-identical, and
    ``deserialize_blueprint(serialize_blueprint(bp)) == bp`` exactly.
    """
    return json.dumps(blueprint_to_dict(bp), sort_keys=True, separators=(",", ":"))


def deserialize_blueprint(text: str) -> Blueprint:
    return blueprint_from_dict(json.loads(text))
