"""JSON run configuration: nested sections mirroring the config dataclasses,
unknown keys rejected, defaults filled in."""

from __future__ import annotations

import json
from dataclasses import asdict, fields
from pathlib import Path
from typing import Any

from .corpus import CorpusConfig
from .detector import DetectorConfig, TrainConfig
from .errors import ConfigError
from .evolution import EvoConfig
from .loop import ExperimentConfig

SECTIONS = {
    "detector": DetectorConfig,
    "train": TrainConfig,
    "evo": EvoConfig,
    "corpus": CorpusConfig,
}
_TUPLE_FIELDS = {("corpus", "sections_range"), ("corpus", "size_range"), ("evo", "kinds")}


def _build(cls, section: str, values: Any):
    if not isinstance(values, dict):
        raise ConfigError(f"{section}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"{section}: unknown keys {', '.join(unknown)}")
    kwargs = {
        k: tuple(v) if (section, k) in _TUPLE_FIELDS and v is not None else v
        for k, v in values.items()
    }
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def experiment_from_dict(doc: Any) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    top = {k: v for k, v in doc.items() if k not in SECTIONS}
    nested = {k: _build(cls, k, doc.get(k, {})) for k, cls in SECTIONS.items()}
    return _build(ExperimentConfig, "experiment", {**top, **nested})


def experiment_to_dict(cfg: ExperimentConfig) -> dict:
    doc = asdict(cfg)
    for section, key in _TUPLE_FIELDS:
        if doc[section][key] is not None:
            doc[section][key] = list(doc[section][key])
    return doc


def load_config(path) -> ExperimentConfig:
    """Read a config file; ``None`` gives the defaults."""
    if path is None:
        return ExperimentConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return experiment_from_dict(doc)
