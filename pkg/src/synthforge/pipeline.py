"""End-to-end dataset generation, estimation and validation.

Seeding hierarchy: cohort ``b`` derives its seed from the master seed with
stream id ``b``; subjects are children ``0..N-1`` of the cohort stream, and
fixed high stream ids carve out the container/blueprint/intensity stages.
Every task is a pure function of its stream, so the worker count never
changes a single output byte.
"""

from __future__ import annotations

import json
import os
import shutil
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import volio
from .blueprint import blueprint_from_dict, blueprint_to_dict, sample_blueprint
from .cohort import instantiate_subject
from .config import PipelineConfig
from .container import make_container
from .errors import ContainerResampleError, DataFormatError, ValidationFailure
from .intensity import (
    AugmentationParams,
    GmmSpec,
    augment_image,
    render_intensity,
    sample_augmentation_params,
    sample_gmm_spec,
)
from .rng import RngStream, derive_seed
from .shapepool import ShapePool, load_pool, synth_fallback_pool
from .voxel import LABEL_DTYPE

DATASET_INDEX_NAME = "dataset.json"
MANIFEST_NAME = "manifest.json"
DATASET_SCHEMA_VERSION = 1
MANIFEST_SCHEMA_VERSION = 1

# Cohort-level stream ids; subject streams occupy 0..N-1, so the fixed
# stages live far above any realistic subject count.
_CONTAINER_STREAM = 2**62 + 1
_BLUEPRINT_STREAM = 2**62 + 2
_GMM_STREAM = 2**62 + 3
_AUGMENT_STREAM = 2**62 + 4

# Stream id for fallback-pool synthesis, derived from the master stream.
_POOL_STREAM = 0x706F6F6C


def _canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def _volume_ext(cfg: PipelineConfig) -> str:
    if cfg.format == "raw":
        return ".raw"
    return ".nii.gz" if cfg.gzip else ".nii"


def build_pool(cfg: PipelineConfig) -> ShapePool:
    """Load the configured pool directory or synthesize the fallback pool."""
    if cfg.pool_source == "fallback":
        pool_rng = RngStream(cfg.seed).child(_POOL_STREAM)
        return synth_fallback_pool(cfg.pool_classes, cfg.pool_instances, pool_rng)
    return load_pool(cfg.pool_source)


def estimate(cfg: PipelineConfig) -> dict:
    """Dry-run resource plan; touches no voxel data."""
    voxels = int(np.prod(cfg.dims))
    labels_bytes = voxels * 2
    image_bytes = voxels * 4
    per_subject = labels_bytes + image_bytes
    if cfg.store_prewarp:
        per_subject += labels_bytes
    if cfg.store_preaug:
        per_subject += image_bytes
    # canvas + pre-warp copy + displacement field + rendered/augmented image
    # + float64 noise scratch dominate a worker's footprint
    peak_worker = voxels * (2 + 2 + 12 + 4 + 4 + 24)
    return {
        "volume_count": cfg.volume_count(),
        "n_blueprints": cfg.n_blueprints,
        "subjects_per_blueprint": cfg.subjects_per_blueprint,
        "dims": list(cfg.dims),
        "bytes_per_label_volume": labels_bytes,
        "bytes_per_image_volume": image_bytes,
        "estimated_dataset_bytes": cfg.n_blueprints
        * (cfg.subjects_per_blueprint * per_subject + labels_bytes),
        "estimated_peak_worker_bytes": peak_worker,
        "workers": cfg.effective_workers(),
    }


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


def _write_subject_volume(vol, directory: str, name: str, cfg: PipelineConfig) -> tuple[str, str]:
    filename = name + _volume_ext(cfg)
    path = os.path.join(directory, filename)
    volio.write_volume(vol, path)
    return filename, volio.file_digest(path)


def _generate_cohort(cfg: PipelineConfig, pool: ShapePool, index: int) -> dict:
    """Generate one cohort directory; returns a summary record."""
    cohort_seed = derive_seed(cfg.seed, index)
    croot = RngStream(cohort_seed)
    final_dir = os.path.join(cfg.output_dir, f"cohort_{index:04d}")
    partial_dir = final_dir + ".partial"
    for stale in (partial_dir,):
        if os.path.isdir(stale):
            shutil.rmtree(stale)
    os.makedirs(partial_dir)
    try:
        try:
            container, attempt = make_container(
                cfg.dims, croot.child(_CONTAINER_STREAM), cfg.container
            )
        except ContainerResampleError as exc:
            shutil.rmtree(partial_dir)
            return {"index": index, "status": "skipped", "reason": str(exc)}

        bp = sample_blueprint(pool, container, croot.child(_BLUEPRINT_STREAM), cfg.blueprint)
        gmm = sample_gmm_spec(bp, croot.child(_GMM_STREAM), cfg.gmm)

        container_file, container_digest = _write_subject_volume(
            container.mask.astype(LABEL_DTYPE), partial_dir, "container", cfg
        )

        subjects = []
        for n in range(cfg.subjects_per_blueprint):
            subject = instantiate_subject(
                bp, pool, container, n, croot.child(n), cfg.micro, cfg.final_warp
            )
            aug_rng = croot.child(_AUGMENT_STREAM).child(n)
            if cfg.augment:
                params = sample_augmentation_params(aug_rng.child(1), cfg.augmentation)
            else:
                params = AugmentationParams.identity()
            raw = render_intensity(subject.labels, gmm, aug_rng.child(0))
            image = augment_image(raw, params, aug_rng, normalize=cfg.normalize)

            files: dict[str, str] = {}
            digests: dict[str, str] = {}
            files["labels"], digests["labels"] = _write_subject_volume(
                subject.labels, partial_dir, f"labels_{n:04d}", cfg
            )
            files["image"], digests["image"] = _write_subject_volume(
                image, partial_dir, f"image_{n:04d}", cfg
            )
            if cfg.store_prewarp:
                files["prewarp"], digests["prewarp"] = _write_subject_volume(
                    subject.pre_warp, partial_dir, f"prewarp_{n:04d}", cfg
                )
            if cfg.store_preaug:
                files["preaug"], digests["preaug"] = _write_subject_volume(
                    raw, partial_dir, f"preaug_{n:04d}", cfg
                )
            subjects.append(
                {
                    "index": n,
                    "instances": [list(c) for c in subject.instance_choices],
                    "micro_transforms": [
                        {
                            "translation": list(m.translation),
                            "rotation": list(m.rotation),
                            "scale": list(m.scale),
                        }
                        for m in subject.micro_transforms
                    ],
                    "elastic": {"sigma": subject.elastic.sigma, "alpha": subject.elastic.alpha},
                    "augmentation": params.to_dict(),
                    "gmm": gmm.to_list(),
                    "clip_report": [[j, frac] for j, frac in subject.clip_report],
                    "files": files,
                    "digests": digests,
                }
            )

        manifest = {
            "schema_version": MANIFEST_SCHEMA_VERSION,
            "cohort_index": index,
            "cohort_seed": cohort_seed,
            "dims": list(cfg.dims),
            "container_attempt": attempt,
            "container_file": container_file,
            "container_digest": container_digest,
            "blueprint": blueprint_to_dict(bp),
            "gmm": gmm.to_list(),
            "normalize": cfg.normalize,
            "augment": cfg.augment,
            "subjects": subjects,
        }
        with open(os.path.join(partial_dir, MANIFEST_NAME), "w", encoding="utf-8") as fh:
            fh.write(_canonical_json(manifest))
            fh.write("\n")
    except BaseException:
        shutil.rmtree(partial_dir, ignore_errors=True)
        raise
    if os.path.isdir(final_dir):
        shutil.rmtree(final_dir)
    os.replace(partial_dir, final_dir)
    return {"index": index, "status": "ok", "subjects": cfg.subjects_per_blueprint}


def run_generate(cfg: PipelineConfig) -> dict:
    """Generate the full dataset; returns the run summary.

    The summary (counts, skipped cohorts, wall time) is returned rather than
    written into the output tree, which keeps the tree a pure function of
    the configuration.
    """
    start = time.monotonic()
    os.makedirs(cfg.output_dir, exist_ok=True)
    pool = build_pool(cfg)
    dataset_index = {
        "schema_version": DATASET_SCHEMA_VERSION,
        "kind": "synthforge-dataset",
        "dims": list(cfg.dims),
        "seed": cfg.seed,
        "n_blueprints": cfg.n_blueprints,
        "subjects_per_blueprint": cfg.subjects_per_blueprint,
        "format": cfg.format,
        "gzip": cfg.gzip,
        "normalize": cfg.normalize,
        "augment": cfg.augment,
        "store_prewarp": cfg.store_prewarp,
        "store_preaug": cfg.store_preaug,
        "pool_fingerprint": pool.fingerprint(),
    }
    with open(os.path.join(cfg.output_dir, DATASET_INDEX_NAME), "w", encoding="utf-8") as fh:
        fh.write(_canonical_json(dataset_index))
        fh.write("\n")

    workers = cfg.effective_workers()
    if workers == 1:
        records = [_generate_cohort(cfg, pool, b) for b in range(cfg.n_blueprints)]
    else:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            futures = [
                executor.submit(_generate_cohort, cfg, pool, b)
                for b in range(cfg.n_blueprints)
            ]
            records = [f.result() for f in futures]

    ok = [r for r in records if r["status"] == "ok"]
    skipped = [r for r in records if r["status"] != "ok"]
    return {
        "output_dir": cfg.output_dir,
        "cohort_count": len(ok),
        "volume_count": sum(r["subjects"] for r in ok),
        "skipped": skipped,
        "workers": workers,
        "wall_time_s": time.monotonic() - start,
    }


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


@dataclass
class ValidationReport:
    checks: list[tuple[str, str, bool, str]] = field(default_factory=list)
    notices: list[str] = field(default_factory=list)

    def record(self, where: str, check: str, ok: bool, message: str = "") -> None:
        self.checks.append((where, check, ok, message))

    @property
    def ok(self) -> bool:
        return all(ok for _, _, ok, _ in self.checks)

    def failures(self) -> list[tuple[str, str, str]]:
        return [(w, c, m) for w, c, ok, m in self.checks if not ok]


def _expected_rule_labels(manifest: dict, subject: dict) -> set[int]:
    fully_clipped = {int(j) for j, frac in subject["clip_report"] if frac >= 1.0}
    k = int(manifest["blueprint"]["k"])
    return {j + 2 for j in range(k) if j not in fully_clipped}


def _check_gmm_stats(
    report: ValidationReport,
    where: str,
    labels: np.ndarray,
    raw: np.ndarray,
    gmm_rows: list,
    min_region: int = 1000,
) -> None:
    components = {int(r[0]): (float(r[1]), float(r[2])) for r in gmm_rows}
    for value in np.unique(labels):
        value = int(value)
        if value == 0:
            continue
        region = raw[labels == value]
        n = region.size
        if n < min_region:
            continue
        mean, variance = components[value]
        sample_mean = float(region.mean())
        mean_tol = 4.0 * np.sqrt(variance) / np.sqrt(n)
        ok = abs(sample_mean - mean) <= mean_tol + 1e-6
        report.record(
            where,
            f"gmm-mean-label-{value}",
            ok,
            f"sample mean {sample_mean:.4f} vs {mean:.4f} +- {mean_tol:.4f} (n={n})",
        )
        sample_var = float(region.var())
        var_tol = 0.2 * variance + 1e-6 * (mean * mean + 1.0)
        ok = abs(sample_var - variance) <= var_tol
        report.record(
            where,
            f"gmm-variance-label-{value}",
            ok,
            f"sample variance {sample_var:.4f} vs {variance:.4f} +- {var_tol:.4f} (n={n})",
        )


def validate_dataset(path: str) -> ValidationReport:
    """Check manifests, digests, labeling and intensity statistics.

    Containment and exact label-set checks run against stored pre-warp
    canvases when the dataset was generated with ``store_prewarp``;
    otherwise they are skipped with a notice.  Intensity statistics need
    ``store_preaug``.
    """
    report = ValidationReport()
    index_path = os.path.join(path, DATASET_INDEX_NAME)
    if not os.path.isfile(index_path):
        raise DataFormatError(f"not a dataset directory (missing {DATASET_INDEX_NAME}): {path!r}")
    with open(index_path, encoding="utf-8") as fh:
        dataset = json.load(fh)
    pool_fingerprint = dataset.get("pool_fingerprint")

    cohort_dirs = sorted(
        d for d in os.listdir(path)
        if d.startswith("cohort_") and os.path.isdir(os.path.join(path, d))
    )
    if not cohort_dirs:
        report.record(path, "cohorts-present", False, "no cohort directories found")
        return report

    for cohort_name in cohort_dirs:
        cohort_dir = os.path.join(path, cohort_name)
        manifest_path = os.path.join(cohort_dir, MANIFEST_NAME)
        if not os.path.isfile(manifest_path):
            report.record(cohort_name, "manifest-present", False, "missing manifest.json")
            continue
        with open(manifest_path, encoding="utf-8") as fh:
            manifest = json.load(fh)

        report.record(
            cohort_name,
            "pool-fingerprint",
            manifest["blueprint"]["pool_fingerprint"] == pool_fingerprint,
            "blueprint pool fingerprint matches the dataset pool",
        )

        # file digests
        named_files = [("container", manifest["container_file"], manifest["container_digest"])]
        for subject in manifest["subjects"]:
            for role, filename in subject["files"].items():
                named_files.append(
                    (f"subject {subject['index']} {role}", filename, subject["digests"][role])
                )
        digest_ok = True
        for role, filename, digest in named_files:
            file_path = os.path.join(cohort_dir, filename)
            if not os.path.isfile(file_path):
                report.record(cohort_name, "digest", False, f"{role}: missing file {filename}")
                digest_ok = False
                continue
            actual = volio.file_digest(file_path)
            if actual != digest:
                report.record(cohort_name, "digest", False, f"{role}: digest mismatch for {filename}")
                digest_ok = False
        if digest_ok:
            report.record(cohort_name, "digest", True, f"{len(named_files)} files verified")
        else:
            continue  # voxel checks on corrupt files would be meaningless

        # shared intensity model
        cohort_gmm = _canonical_json(manifest["gmm"])
        shared = all(
            _canonical_json(subject["gmm"]) == cohort_gmm for subject in manifest["subjects"]
        )
        report.record(
            cohort_name, "shared-gmm", shared,
            "all subjects reference the identical intensity model",
        )

        container_mask = volio.read_volume(
            os.path.join(cohort_dir, manifest["container_file"])
        ).astype(bool)

        for subject in manifest["subjects"]:
            where = f"{cohort_name}/subject_{subject['index']:04d}"
            labels = volio.read_volume(os.path.join(cohort_dir, subject["files"]["labels"]))
            expected = _expected_rule_labels(manifest, subject)
            present = {int(v) for v in np.unique(labels) if v >= 2}
            report.record(
                where, "label-subset", present <= expected,
                f"final labels {sorted(present - expected)} not in blueprint-minus-clips",
            )
            if "prewarp" in subject["files"]:
                prewarp = volio.read_volume(os.path.join(cohort_dir, subject["files"]["prewarp"]))
                pre_present = {int(v) for v in np.unique(prewarp) if v >= 2}
                report.record(
                    where, "label-set", pre_present == expected,
                    f"pre-warp labels {sorted(pre_present)} vs expected {sorted(expected)}",
                )
                outside = int(((prewarp >= 2) & ~container_mask).sum())
                report.record(
                    where, "containment", outside == 0,
                    f"{outside} organ voxels outside the container",
                )
            else:
                report.notices.append(f"{where}: no pre-warp canvas stored; containment skipped")
            if "preaug" in subject["files"]:
                raw = volio.read_volume(os.path.join(cohort_dir, subject["files"]["preaug"]))
                _check_gmm_stats(report, where, labels, raw, subject["gmm"])
            else:
                report.notices.append(f"{where}: no pre-augmentation volume stored; stats skipped")

    return report


def summarize_dataset(path: str) -> dict:
    """Lightweight dataset inspection (no voxel data touched)."""
    index_path = os.path.join(path, DATASET_INDEX_NAME)
    if not os.path.isfile(index_path):
        raise DataFormatError(f"not a dataset directory (missing {DATASET_INDEX_NAME}): {path!r}")
    with open(index_path, encoding="utf-8") as fh:
        dataset = json.load(fh)
    cohorts = []
    for name in sorted(os.listdir(path)):
        manifest_path = os.path.join(path, name, MANIFEST_NAME)
        if name.startswith("cohort_") and os.path.isfile(manifest_path):
            with open(manifest_path, encoding="utf-8") as fh:
                manifest = json.load(fh)
            cohorts.append(
                {
                    "name": name,
                    "k": manifest["blueprint"]["k"],
                    "subjects": len(manifest["subjects"]),
                }
            )
    return {
        "dims": dataset["dims"],
        "seed": dataset["seed"],
        "cohorts": len(cohorts),
        "volumes": sum(c["subjects"] for c in cohorts),
        "per_cohort": cohorts,
    }
