"""Pipeline configuration: flat key-value files with dotted section names.

Syntax: one ``key = value`` pair per line; ``#`` starts a comment; blank
lines are ignored.  Pairs like ``container.radius = 40,60`` override the
sampling ranges of individual stages.  Unknown keys are hard errors.

Range defaults are expressed at the reference grid size (128); when a range
key is not overridden explicitly, the default is stretched by
``dims / 128`` for spatial quantities at load time, so the stored config
always holds working-scale values.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace

from .blueprint import BlueprintRanges
from .cohort import FinalWarpRanges, MicroRanges
from .container import ContainerRanges
from .errors import ConfigError
from .intensity import AugmentationRanges, GmmRanges
from .voxel import REFERENCE_SIZE, spatial_scale

MIN_DIM = 32

WORKERS_ENV_VAR = "SYNTH_FORGE_WORKERS"


@dataclass(eq=True)
class PipelineConfig:
    dims: tuple[int, int, int] = (128, 128, 128)
    n_blueprints: int = 40
    subjects_per_blueprint: int = 500
    seed: int = 0
    output_dir: str = "dataset"
    format: str = "nifti"
    gzip: bool = True
    workers: int = 0  # 0 = use SYNTH_FORGE_WORKERS, else 1
    augment: bool = True
    normalize: bool = True
    store_prewarp: bool = False
    store_preaug: bool = False
    pool_source: str = "fallback"  # "fallback" or a pool directory
    pool_classes: int = 8
    pool_instances: int = 4
    container: ContainerRanges = field(default_factory=ContainerRanges)
    blueprint: BlueprintRanges = field(default_factory=BlueprintRanges)
    micro: MicroRanges = field(default_factory=MicroRanges)
    final_warp: FinalWarpRanges = field(default_factory=FinalWarpRanges)
    gmm: GmmRanges = field(default_factory=GmmRanges)
    augmentation: AugmentationRanges = field(default_factory=AugmentationRanges)

    def volume_count(self) -> int:
        return self.n_blueprints * self.subjects_per_blueprint

    def effective_workers(self) -> int:
        if self.workers > 0:
            return self.workers
        env = os.environ.get(WORKERS_ENV_VAR, "")
        if env.strip():
            try:
                value = int(env)
            except ValueError as exc:
                raise ConfigError(f"{WORKERS_ENV_VAR}={env!r} is not an integer") from exc
            if value < 1:
                raise ConfigError(f"{WORKERS_ENV_VAR} must be >= 1, got {value}")
            return value
        return 1


# key -> (target attribute path, value kind)
_KEY_TABLE: dict[str, tuple[tuple[str, ...], str]] = {
    "dims": (("dims",), "dims"),
    "n_blueprints": (("n_blueprints",), "int"),
    "subjects_per_blueprint": (("subjects_per_blueprint",), "int"),
    "seed": (("seed",), "int"),
    "output_dir": (("output_dir",), "str"),
    "format": (("format",), "str"),
    "gzip": (("gzip",), "bool"),
    "workers": (("workers",), "int"),
    "augment": (("augment",), "bool"),
    "normalize": (("normalize",), "bool"),
    "store_prewarp": (("store_prewarp",), "bool"),
    "store_preaug": (("store_preaug",), "bool"),
    "pool.source": (("pool_source",), "str"),
    "pool.classes": (("pool_classes",), "int"),
    "pool.instances": (("pool_instances",), "int"),
    "container.radius": (("container", "radius"), "float_pair"),
    "container.height": (("container", "height"), "float_pair"),
    "container.rotation": (("container", "rotation"), "float_pair"),
    "container.scale": (("container", "scale"), "float_pair"),
    "container.elastic_smoothing": (("container", "elastic_smoothing"), "float_pair"),
    "container.elastic_magnitude": (("container", "elastic_magnitude"), "float_pair"),
    "blueprint.rules": (("blueprint", "rules"), "int_pair"),
    "blueprint.rotation": (("blueprint", "rotation"), "float_pair"),
    "blueprint.scale": (("blueprint", "scale"), "float_pair"),
    "blueprint.morph_iterations": (("blueprint", "morph_iterations"), "int_pair"),
    "subject.translation": (("micro", "translation"), "float_pair"),
    "subject.rotation": (("micro", "rotation"), "float_pair"),
    "subject.scale": (("micro", "scale"), "float_pair"),
    "subject.elastic_smoothing": (("final_warp", "smoothing"), "float_pair"),
    "subject.elastic_magnitude": (("final_warp", "magnitude"), "float_pair"),
    "gmm.mean": (("gmm", "mean"), "float_pair"),
    "gmm.variance": (("gmm", "variance"), "float_pair"),
    "augment.bias_grid": (("augmentation", "bias_grid"), "int_pair"),
    "augment.bias_log_amplitude": (("augmentation", "bias_log_amplitude"), "float_pair"),
    "augment.gamma_log": (("augmentation", "gamma_log"), "float_pair"),
    "augment.resolution": (("augmentation", "resolution"), "float_pair"),
    "augment.noise_std": (("augmentation", "noise_std"), "float_pair"),
}

# Range keys whose values are voxel quantities and scale with the grid size.
SPATIAL_KEYS = (
    "container.radius",
    "container.height",
    "container.elastic_smoothing",
    "container.elastic_magnitude",
    "subject.translation",
    "subject.elastic_smoothing",
    "subject.elastic_magnitude",
)


def _parse_value(kind: str, raw: str, where: str):
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "str":
            return raw
        if kind == "bool":
            lowered = raw.lower()
            if lowered in ("true", "yes", "1", "on"):
                return True
            if lowered in ("false", "no", "0", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind == "dims":
            parts = [int(p) for p in raw.split(",")]
            if len(parts) == 1:
                return (parts[0],) * 3
            if len(parts) == 3:
                return tuple(parts)
            raise ValueError("dims takes one integer or three comma-separated integers")
        if kind in ("float_pair", "int_pair"):
            parts = raw.split(",")
            if len(parts) != 2:
                raise ValueError("expected 'low,high'")
            cast = float if kind == "float_pair" else int
            lo, hi = cast(parts[0]), cast(parts[1])
            if lo > hi:
                raise ValueError(f"low {lo} exceeds high {hi}")
            return (lo, hi)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    raise AssertionError(f"unhandled value kind {kind}")


def parse_config(text: str, source: str = "<config>") -> PipelineConfig:
    """Parse config text; see module docstring for the syntax."""
    assignments: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in _KEY_TABLE:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in assignments:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        _, kind = _KEY_TABLE[key]
        assignments[key] = _parse_value(kind, raw, f"{source}:{lineno}: key {key!r}")

    dims = assignments.get("dims", (REFERENCE_SIZE,) * 3)
    factor = spatial_scale(dims)
    cfg = PipelineConfig(
        dims=dims,
        container=ContainerRanges().scaled(factor),
        micro=MicroRanges().scaled(factor),
        final_warp=FinalWarpRanges().scaled(factor),
    )
    for key, value in assignments.items():
        path, _ = _KEY_TABLE[key]
        if len(path) == 1:
            cfg = replace(cfg, **{path[0]: value})
        else:
            section = getattr(cfg, path[0])
            cfg = replace(cfg, **{path[0]: replace(section, **{path[1]: value})})
    _validate(cfg)
    return cfg


def load_config(path: str) -> PipelineConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from exc
    return parse_config(text, source=path)


def _check_range(name: str, pair, minimum=None) -> None:
    lo, hi = pair
    if lo > hi:
        raise ConfigError(f"key {name!r}: low {lo} exceeds high {hi}")
    if minimum is not None and lo < minimum:
        raise ConfigError(f"key {name!r}: values must be >= {minimum}, got {lo}")


def _validate(cfg: PipelineConfig) -> None:
    if any(d < MIN_DIM for d in cfg.dims):
        raise ConfigError(f"key 'dims': each axis must be >= {MIN_DIM}, got {cfg.dims}")
    if cfg.n_blueprints < 1:
        raise ConfigError(f"key 'n_blueprints': must be >= 1, got {cfg.n_blueprints}")
    if cfg.subjects_per_blueprint < 1:
        raise ConfigError(f"key 'subjects_per_blueprint': must be >= 1, got {cfg.subjects_per_blueprint}")
    if not 0 <= cfg.seed < 2**64:
        raise ConfigError(f"key 'seed': must be a 64-bit unsigned integer, got {cfg.seed}")
    if cfg.format not in ("nifti", "raw"):
        raise ConfigError(f"key 'format': must be 'nifti' or 'raw', got {cfg.format!r}")
    if cfg.workers < 0:
        raise ConfigError(f"key 'workers': must be >= 0, got {cfg.workers}")
    if cfg.pool_source == "fallback":
        if cfg.pool_classes < 1 or cfg.pool_instances < 1:
            raise ConfigError("keys 'pool.classes'/'pool.instances': must be >= 1")
    _check_range("container.radius", cfg.container.radius, minimum=1e-9)
    _check_range("container.height", cfg.container.height, minimum=1e-9)
    _check_range("container.rotation", cfg.container.rotation)
    _check_range("container.scale", cfg.container.scale, minimum=1e-9)
    _check_range("container.elastic_smoothing", cfg.container.elastic_smoothing, minimum=1e-9)
    _check_range("container.elastic_magnitude", cfg.container.elastic_magnitude, minimum=0.0)
    _check_range("blueprint.rules", cfg.blueprint.rules, minimum=1)
    _check_range("blueprint.rotation", cfg.blueprint.rotation)
    _check_range("blueprint.scale", cfg.blueprint.scale, minimum=1e-9)
    _check_range("blueprint.morph_iterations", cfg.blueprint.morph_iterations, minimum=1)
    if cfg.blueprint.morph_iterations[1] > 3:
        raise ConfigError("key 'blueprint.morph_iterations': values must be <= 3")
    _check_range("subject.translation", cfg.micro.translation)
    _check_range("subject.rotation", cfg.micro.rotation)
    _check_range("subject.scale", cfg.micro.scale, minimum=1e-9)
    _check_range("subject.elastic_smoothing", cfg.final_warp.smoothing, minimum=1e-9)
    _check_range("subject.elastic_magnitude", cfg.final_warp.magnitude, minimum=0.0)
    _check_range("gmm.mean", cfg.gmm.mean)
    _check_range("gmm.variance", cfg.gmm.variance, minimum=0.0)
    _check_range("augment.bias_grid", cfg.augmentation.bias_grid, minimum=2)
    _check_range("augment.bias_log_amplitude", cfg.augmentation.bias_log_amplitude, minimum=0.0)
    _check_range("augment.gamma_log", cfg.augmentation.gamma_log)
    _check_range("augment.resolution", cfg.augmentation.resolution, minimum=1.0)
    _check_range("augment.noise_std", cfg.augmentation.noise_std, minimum=0.0)


def scale_config(cfg: PipelineConfig, dims: tuple[int, int, int]) -> PipelineConfig:
    """Rescale every spatial range for a new grid size.

    Voxel-valued ranges are multiplied by the mean per-axis ratio of the new
    to the old dims; dimensionless quantities (rotations, scale factors,
    gamma, rule counts, intensity model) are unchanged.  Scaling to the
    config's own dims is an identity.
    """
    if any(d < MIN_DIM for d in dims):
        raise ConfigError(f"target dims must be >= {MIN_DIM} per axis, got {dims}")
    factor = float(sum(t / o for t, o in zip(dims, cfg.dims)) / 3.0)
    return replace(
        cfg,
        dims=tuple(dims),
        container=cfg.container.scaled(factor),
        micro=cfg.micro.scaled(factor),
        final_warp=cfg.final_warp.scaled(factor),
    )


def _format_value(kind: str, value) -> str:
    if kind == "bool":
        return "true" if value else "false"
    if kind == "dims":
        return ",".join(str(v) for v in value)
    if kind in ("float_pair", "int_pair"):
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    return str(value)


def config_to_text(cfg: PipelineConfig) -> str:
    """Render a config with every key explicit (used by ``scale-config``)."""
    lines = ["# synthforge pipeline configuration"]
    for key, (path, kind) in _KEY_TABLE.items():
        target = getattr(cfg, path[0])
        value = getattr(target, path[1]) if len(path) == 2 else target
        lines.append(f"{key} = {_format_value(kind, value)}")
    return "\n".join(lines) + "\n"
