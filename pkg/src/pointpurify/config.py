"""Run configuration: JSON with strict unknown-key rejection.

Every section mirrors one pipeline stage. Defaults follow the published
hyperparameter table where it provides a value; everything else uses the
desk-scale defaults of the owning module. Unknown keys anywhere are
errors, because silently ignored typos in hyperparameters are the
dominant reproduction failure mode.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .distill import TrainConfig
from .errors import ParameterError


@dataclass
class GeometrySection:
    voxel_size: float = 0.02
    k_ctx: int = 16


@dataclass
class LiftingSection:
    depth_tol: float = 0.05


@dataclass
class StudentSection:
    widths: tuple = (13, 64, 64, 64, 32)
    seed: int = 1
    concat_mode: bool = False


@dataclass
class PoolingSection:
    k: int = 96
    alpha: float = 0.05
    t: int = 18


@dataclass
class SelectionSection:
    k_subset: int = 4
    k_clusters: int = 4
    gamma: float = 0.5
    seed: int = 3


@dataclass
class SynthSection:
    scenes: int = 12
    seed: int = 4
    extents: tuple = (3.2, 2.8, 2.4)
    object_count: int = 6
    shape_palette: tuple = ("box", "cylinder", "sphere")
    points_per_object: int = 700
    noise_sigma: float = 0.004
    feature_dim: int = 32
    feature_noise: float = 0.0
    num_views: int = 6
    image_size: int = 224
    focal: float = 200.0
    teacher_dim: int = 32
    teacher_sigma: float = 0.05
    corrupt_flip_rate: float = 0.0
    corrupt_sigma: float = 0.0
    corrupt_boundary_bias: float = 1.0


@dataclass
class PathsSection:
    in_path: str = ""
    out_path: str = ""


# JSON spelling -> dataclass field (reserved words / symbols)
_ALIASES = {
    "paths": {"in": "in_path", "out": "out_path"},
}

_SECTIONS = {
    "geometry": GeometrySection,
    "lifting": LiftingSection,
    "student": StudentSection,
    "distill": TrainConfig,
    "pooling": PoolingSection,
    "selection": SelectionSection,
    "synth": SynthSection,
    "paths": PathsSection,
}


@dataclass
class RunConfig:
    geometry: GeometrySection = field(default_factory=GeometrySection)
    lifting: LiftingSection = field(default_factory=LiftingSection)
    student: StudentSection = field(default_factory=StudentSection)
    distill: TrainConfig = field(default_factory=TrainConfig)
    pooling: PoolingSection = field(default_factory=PoolingSection)
    selection: SelectionSection = field(default_factory=SelectionSection)
    synth: SynthSection = field(default_factory=SynthSection)
    paths: PathsSection = field(default_factory=PathsSection)


def _build_section(name, cls, payload) -> object:
    if not isinstance(payload, dict):
        raise ParameterError(f"config section {name!r} must be an object")
    aliases = _ALIASES.get(name, {})
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in payload.items():
        attr = aliases.get(key, key)
        if attr not in fields:
            raise ParameterError(f"unknown config key: {name}.{key}")
        if isinstance(value, list):
            value = tuple(value)
        kwargs[attr] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ParameterError(f"config section {name!r}: {exc}") from exc


def config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ParameterError("config root must be a JSON object")
    sections = {}
    for key, payload in doc.items():
        if key not in _SECTIONS:
            raise ParameterError(f"unknown config section: {key}")
        sections[key] = _build_section(key, _SECTIONS[key], payload)
    return RunConfig(**sections)


def load_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParameterError(
            f"config parse error at line {exc.lineno}: {exc.msg}"
        ) from exc
    except OSError as exc:
        raise ParameterError(f"cannot read config: {exc}") from exc
    return config_from_dict(doc)


def override_seed(cfg: RunConfig, seed: int) -> None:
    """Re-derive every section seed from one master seed (CLI --seed)."""
    cfg.synth.seed = seed
    cfg.student.seed = seed + 1
    cfg.distill.seed = seed + 2
    cfg.selection.seed = seed + 3
