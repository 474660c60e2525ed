"""Experiment configuration: one YAML file drives every pipeline stage.

The config hash is a sha256 over the canonical JSON form of all semantic
sections (paths excluded, so relocating artifacts does not change identity).
Every machine-readable artifact records this hash, which makes stage outputs
content-addressed: change any hyperparameter and downstream artifacts carry
a new hash.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import yaml

from .grids import GridConfig
from .seqdspn import DSPNConfig
from .synthetic import GeneratorConfig
from .training import TrainHyperparams


@dataclass(frozen=True)
class PathsConfig:
    """Artifact locations, all relative to root."""

    root: str = "artifacts"
    dataset: str = "dataset.ndjson"
    test_dataset: str = "test_dataset.ndjson"
    grid_checkpoint: str = "grid_ae.pt"
    seqdspn_checkpoint: str = "seqdspn.pt"
    grid_table: str = "grid_embeddings.txt"
    seqdspn_table: str = "seqdspn_embeddings.txt"
    assignment: str = "clusters.txt"
    linkage: str = "linkage.txt"
    report: str = "report.json"
    plots: str = "plots"

    def resolve(self, name: str) -> Path:
        return Path(self.root) / getattr(self, name)


@dataclass(frozen=True)
class ExperimentConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    dspn: DSPNConfig = field(default_factory=DSPNConfig)
    train_grid: TrainHyperparams = field(default_factory=TrainHyperparams)
    train_seqdspn: TrainHyperparams = field(default_factory=TrainHyperparams)
    paths: PathsConfig = field(default_factory=PathsConfig)
    dataset_count: int = 2000
    val_fraction: float = 0.2
    split_seed: int = 77
    cluster_k: int = 3
    retrieval_k: int = 5
    pca_dims: int = 2

    def __post_init__(self):
        if self.dataset_count < 1:
            raise ValueError(f"dataset_count must be >= 1, got {self.dataset_count}")
        if not 0 < self.val_fraction < 1:
            raise ValueError(f"val_fraction must be in (0,1), got {self.val_fraction}")
        if self.cluster_k < 1:
            raise ValueError(f"cluster_k must be >= 1, got {self.cluster_k}")
        if self.retrieval_k < 1:
            raise ValueError(f"retrieval_k must be >= 1, got {self.retrieval_k}")
        if self.pca_dims < 1:
            raise ValueError(f"pca_dims must be >= 1, got {self.pca_dims}")


_SECTIONS: dict[str, type] = {
    "generator": GeneratorConfig,
    "grid": GridConfig,
    "dspn": DSPNConfig,
    "train_grid": TrainHyperparams,
    "train_seqdspn": TrainHyperparams,
    "paths": PathsConfig,
}


class ConfigError(ValueError):
    """Invalid experiment configuration; message carries the field path."""


def _tuplify(value: Any) -> Any:
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value


def _build_section(cls: type, data: Mapping[str, Any], section: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown field {sorted(unknown)[0]!r} in section {section!r}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            value = data[f.name]
            kwargs[f.name] = _tuplify(value)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section {section!r}: {exc}") from None


def config_from_dict(data: Mapping[str, Any]) -> ExperimentConfig:
    data = dict(data or {})
    top_fields = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(data) - top_fields
    if unknown:
        raise ConfigError(f"unknown top-level field {sorted(unknown)[0]!r}")
    kwargs: dict[str, Any] = {}
    for name, cls in _SECTIONS.items():
        if name in data:
            section = data[name]
            if not isinstance(section, Mapping):
                raise ConfigError(f"section {name!r} must be a mapping, got {type(section).__name__}")
            kwargs[name] = _build_section(cls, section, name)
    for name in top_fields - set(_SECTIONS):
        if name in data:
            kwargs[name] = data[name]
    try:
        return ExperimentConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def config_to_dict(config: ExperimentConfig) -> dict:
    def plain(value):
        if dataclasses.is_dataclass(value) and not isinstance(value, type):
            return {f.name: plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
        if isinstance(value, tuple):
            return [plain(v) for v in value]
        return value

    return plain(config)


def apply_overrides(data: dict, overrides: Sequence[str]) -> dict:
    """Apply ``section.field=value`` overrides; values parse as YAML scalars."""
    data = json.loads(json.dumps(data))  # deep copy
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        dotted, _, raw = item.partition("=")
        keys = dotted.strip().split(".")
        if not all(keys):
            raise ConfigError(f"override {item!r} has an empty key component")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"override {item!r}: unparseable value ({exc})") from None
        node = data
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r}: {key!r} is not a section")
        node[keys[-1]] = value
    return data


def load_config(path: str | Path | None, overrides: Sequence[str] = ()) -> ExperimentConfig:
    """Load a YAML config (or defaults when path is None) plus overrides."""
    data: dict = {}
    if path is not None:
        try:
            loaded = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path}: invalid YAML ({exc})") from None
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError(f"config {path}: top level must be a mapping")
        data = loaded or {}
    data = apply_overrides(config_to_dict(config_from_dict(data)), overrides) if overrides else data
    return config_from_dict(data)


def save_config(config: ExperimentConfig, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(config_to_dict(config), sort_keys=True), encoding="utf-8")


def config_hash(config: ExperimentConfig) -> str:
    """sha256 over all semantic fields; file locations are excluded."""
    data = config_to_dict(config)
    data.pop("paths", None)
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
