"""Class-indexed pool of binary organ masks.

The pool is built either from user-supplied label volumes (one shape per
distinct nonzero label per subject) or from a procedural fallback generator
so the pipeline can run without any real masks.  Original label values are
remapped to dense class ids 0..C-1 at build time; instances of one class are
interchangeable shapes of "the same organ from different subjects".
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DataFormatError
from .rng import RngStream
from .voxel import LABEL_DTYPE, tight_crop
from . import volio

POOL_INDEX_NAME = "pool.json"
POOL_SCHEMA_VERSION = 1

FALLBACK_GRID = 48
FALLBACK_BASE_MIX = 0.3  # weight of the per-instance fresh noise vs the class base


@dataclass(eq=False)
class ShapeInstance:
    """One binary organ mask: class ``class_id`` from subject ``subject_id``.

    ``mask`` is tight-cropped; ``bbox`` is the inclusive bounding box
    ``(x0, x1, y0, y1, z0, z1)`` in the source volume, so pasting ``mask``
    back at ``bbox`` reproduces the original voxels.
    """

    class_id: int
    subject_id: int
    mask: np.ndarray
    bbox: tuple[int, int, int, int, int, int]

    def __post_init__(self) -> None:
        if not self.mask.any():
            raise ValueError("instance mask must be non-empty")
        expected = (
            self.bbox[1] - self.bbox[0] + 1,
            self.bbox[3] - self.bbox[2] + 1,
            self.bbox[5] - self.bbox[4] + 1,
        )
        if self.mask.shape != expected:
            raise ValueError(f"mask shape {self.mask.shape} does not match bbox extent {expected}")

    def mask_digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.asarray(self.mask.shape, dtype="<i8").tobytes())
        h.update(np.ascontiguousarray(self.mask, dtype=np.uint8).tobytes())
        return h.hexdigest()


@dataclass(eq=False)
class ShapePool:
    """Immutable collection of shape instances, keyed by dense class id."""

    classes: dict[int, list[ShapeInstance]]
    original_labels: dict[int, int]

    def __post_init__(self) -> None:
        if sorted(self.classes) != list(range(len(self.classes))):
            raise ValueError("class ids must be dense 0..C-1")
        for cid, instances in self.classes.items():
            if not instances:
                raise ValueError(f"class {cid} has no instances")
        self._fingerprint: str | None = None

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def instance_counts(self) -> dict[int, int]:
        return {cid: len(instances) for cid, instances in self.classes.items()}

    def fingerprint(self) -> str:
        """Content hash binding blueprints to the exact pool they sampled."""
        if self._fingerprint is None:
            record = {
                "classes": [
                    {"class_id": cid, "original_label": self.original_labels[cid]}
                    for cid in sorted(self.classes)
                ],
                "instances": [
                    {
                        "class_id": inst.class_id,
                        "subject_id": inst.subject_id,
                        "bbox": list(inst.bbox),
                        "mask": inst.mask_digest(),
                    }
                    for cid in sorted(self.classes)
                    for inst in self.classes[cid]
                ],
            }
            blob = json.dumps(record, sort_keys=True, separators=(",", ":")).encode()
            self._fingerprint = "sha256:" + hashlib.sha256(blob).hexdigest()
        return self._fingerprint


def import_label_volume(path: str, subject_id: int) -> list[ShapeInstance]:
    """Extract one instance per distinct nonzero label from a label volume.

    Returned instances carry the original label value in ``class_id``;
    :func:`build_pool` remaps those to dense ids.
    """
    try:
        data = volio.read_volume(path)
    except (OSError, DataFormatError) as exc:
        raise DataFormatError(f"cannot read label volume {path!r}: {exc}") from exc
    if data.dtype.kind not in "iu" and data.dtype != bool:
        raise DataFormatError(f"{path!r} is not a label volume (dtype {data.dtype})")
    values = np.unique(data)
    if values.min() < 0:
        raise DataFormatError(f"{path!r} contains negative label values")
    values = values[values != 0]
    if values.size == 0:
        raise DataFormatError(f"{path!r} contains no nonzero labels")
    instances = []
    for value in values:
        mask, bbox = tight_crop(data == value)
        instances.append(ShapeInstance(class_id=int(value), subject_id=subject_id, mask=mask, bbox=bbox))
    return instances


def build_pool(instances: list[ShapeInstance]) -> ShapePool:
    """Group instances by original label and remap to dense class ids.

    The remap sorts original label values, so importing files in any order
    yields the same pool.
    """
    if not instances:
        raise ValueError("cannot build a pool from zero instances")
    by_label: dict[int, list[ShapeInstance]] = {}
    for inst in instances:
        by_label.setdefault(inst.class_id, []).append(inst)
    labels = sorted(by_label)
    classes: dict[int, list[ShapeInstance]] = {}
    original: dict[int, int] = {}
    for cid, label in enumerate(labels):
        members = sorted(by_label[label], key=lambda i: (i.subject_id, i.bbox))
        classes[cid] = [
            ShapeInstance(class_id=cid, subject_id=m.subject_id, mask=m.mask, bbox=m.bbox)
            for m in members
        ]
        original[cid] = label
    return ShapePool(classes=classes, original_labels=original)


# ---------------------------------------------------------------------------
# Procedural fallback pool
# ---------------------------------------------------------------------------


def random_blob(
    rng: RngStream,
    grid: int = FALLBACK_GRID,
    base: np.ndarray | None = None,
    base_mix: float = FALLBACK_BASE_MIX,
    sigma: float | None = None,
    q: float | None = None,
    keep_largest: bool = True,
) -> np.ndarray:
    """One random blob mask on a ``grid``^3 lattice (uncropped).

    Standard-normal noise (optionally mixed with a shared ``base`` field:
    ``(1 - base_mix) * base + base_mix * fresh``) is Gaussian-smoothed with
    std ``sigma`` ~ U(3, 8) and thresholded strictly above its ``q``-th
    percentile, ``q`` ~ U(85, 97).  With ``keep_largest`` only the largest
    6-connected component survives.
    """
    gen = rng.generator()
    if sigma is None:
        sigma = gen.uniform(3.0, 8.0)
    if q is None:
        q = gen.uniform(85.0, 97.0)
    fresh = gen.standard_normal((grid,) * 3)
    noise = fresh if base is None else (1.0 - base_mix) * base + base_mix * fresh
    smooth = ndimage.gaussian_filter(noise, sigma, mode="constant", cval=0.0)
    mask = smooth > np.percentile(smooth, q)
    if not mask.any():  # ties at the percentile; continuous noise makes this ~impossible
        raise RuntimeError("degenerate blob draw: empty threshold mask")
    if keep_largest:
        labeled, count = ndimage.label(mask)  # default structure = 6-connectivity
        if count > 1:
            sizes = np.bincount(labeled.ravel())
            sizes[0] = 0
            mask = labeled == sizes.argmax()
    return mask


def synth_fallback_pool(
    n_classes: int,
    n_instances_per_class: int,
    rng: RngStream,
    grid: int = FALLBACK_GRID,
    base_mix: float = FALLBACK_BASE_MIX,
) -> ShapePool:
    """Procedural pool of random blobs.

    Instances of one class share a base noise field (mixed in at
    ``1 - base_mix``), so they look like variations of a common shape.
    """
    if n_classes < 1 or n_instances_per_class < 1:
        raise ValueError("pool needs at least one class and one instance per class")
    classes: dict[int, list[ShapeInstance]] = {}
    for k in range(n_classes):
        class_rng = rng.child(k)
        base = class_rng.child(0).generator().standard_normal((grid,) * 3)
        members = []
        for p in range(n_instances_per_class):
            full = random_blob(class_rng.child(p + 1), grid=grid, base=base, base_mix=base_mix)
            mask, bbox = tight_crop(full)
            members.append(ShapeInstance(class_id=k, subject_id=p, mask=mask, bbox=bbox))
        classes[k] = members
    return ShapePool(classes=classes, original_labels={k: k + 1 for k in range(n_classes)})


def sample_instance(pool: ShapePool, class_id: int, rng: RngStream) -> ShapeInstance:
    """Uniform draw from the instances of one class."""
    if class_id not in pool.classes:
        raise KeyError(f"pool has no class {class_id} (classes 0..{pool.n_classes - 1})")
    members = pool.classes[class_id]
    return members[int(rng.generator().integers(len(members)))]


# ---------------------------------------------------------------------------
# On-disk pool directories
# ---------------------------------------------------------------------------


def _write_index(directory: str, pool: ShapePool, entries: list[dict]) -> None:
    index = {
        "schema_version": POOL_SCHEMA_VERSION,
        "fingerprint": pool.fingerprint(),
        "classes": [
            {"class_id": cid, "original_label": pool.original_labels[cid]}
            for cid in sorted(pool.classes)
        ],
        "instances": entries,
    }
    with open(os.path.join(directory, POOL_INDEX_NAME), "w", encoding="utf-8") as fh:
        json.dump(index, fh, sort_keys=True, indent=2)
        fh.write("\n")


def import_pool(paths: list[str], out_dir: str) -> ShapePool:
    """Build a pool from label-volume files and persist it to ``out_dir``.

    Each source volume is re-encoded into the pool directory (one file per
    subject); ``pool.json`` records the class remap table and the instance
    index.
    """
    os.makedirs(out_dir, exist_ok=True)
    collected: list[ShapeInstance] = []
    file_of_subject: dict[int, str] = {}
    for subject_id, path in enumerate(paths):
        data = volio.read_volume(path)
        instances = import_label_volume(path, subject_id)
        name = f"subject_{subject_id:04d}.nii.gz"
        volio.write_volume(data.astype(LABEL_DTYPE), os.path.join(out_dir, name))
        file_of_subject[subject_id] = name
        collected.extend(instances)
    pool = build_pool(collected)
    entries = [
        {
            "class_id": inst.class_id,
            "subject_id": inst.subject_id,
            "file": file_of_subject[inst.subject_id],
            "bbox": list(inst.bbox),
        }
        for cid in sorted(pool.classes)
        for inst in pool.classes[cid]
    ]
    _write_index(out_dir, pool, entries)
    return pool


def save_pool(pool: ShapePool, out_dir: str) -> None:
    """Persist an in-memory pool (e.g. a fallback pool) to a directory.

    Each instance becomes its own source volume: the mask is pasted back at
    its bounding box with the class's original label value.
    """
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for cid in sorted(pool.classes):
        for inst in pool.classes[cid]:
            x0, x1, y0, y1, z0, z1 = inst.bbox
            vol = np.zeros((x1 + 1, y1 + 1, z1 + 1), dtype=LABEL_DTYPE)
            vol[x0 : x1 + 1, y0 : y1 + 1, z0 : z1 + 1][inst.mask] = pool.original_labels[cid]
            name = f"class_{cid:03d}_subject_{inst.subject_id:04d}.nii.gz"
            volio.write_volume(vol, os.path.join(out_dir, name))
            entries.append(
                {
                    "class_id": cid,
                    "subject_id": inst.subject_id,
                    "file": name,
                    "bbox": list(inst.bbox),
                }
            )
    _write_index(out_dir, pool, entries)


def load_pool(directory: str) -> ShapePool:
    """Load a pool directory written by :func:`import_pool` or :func:`save_pool`."""
    index_path = os.path.join(directory, POOL_INDEX_NAME)
    try:
        with open(index_path, encoding="utf-8") as fh:
            index = json.load(fh)
    except OSError as exc:
        raise DataFormatError(f"cannot read pool index {index_path!r}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"malformed pool index {index_path!r}: {exc}") from exc
    if index.get("schema_version") != POOL_SCHEMA_VERSION:
        raise DataFormatError(f"unsupported pool schema {index.get('schema_version')!r}")
    original = {int(c["class_id"]): int(c["original_label"]) for c in index["classes"]}
    cache: dict[str, np.ndarray] = {}
    classes: dict[int, list[ShapeInstance]] = {cid: [] for cid in original}
    for entry in index["instances"]:
        cid = int(entry["class_id"])
        name = entry["file"]
        if name not in cache:
            cache[name] = volio.read_volume(os.path.join(directory, name))
        data = cache[name]
        x0, x1, y0, y1, z0, z1 = (int(v) for v in entry["bbox"])
        mask = np.ascontiguousarray(
            data[x0 : x1 + 1, y0 : y1 + 1, z0 : z1 + 1] == original[cid]
        )
        if not mask.any():
            raise DataFormatError(f"pool instance {entry} resolves to an empty mask")
        classes[cid].append(
            ShapeInstance(
                class_id=cid,
                subject_id=int(entry["subject_id"]),
                mask=mask,
                bbox=(x0, x1, y0, y1, z0, z1),
            )
        )
    pool = ShapePool(classes=classes, original_labels=original)
    recorded = index.get("fingerprint")
    if recorded and recorded != pool.fingerprint():
        raise DataFormatError(f"pool content does not match recorded fingerprint in {index_path!r}")
    return pool
