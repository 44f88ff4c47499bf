"""Run configuration: one YAML document covering model, data, and trainer.

Sections map onto the dataclasses they configure:

    model:   LaNatConfig fields (d, heads, m_slots, ...)
    data:    SyntheticSpec fields (vocab, n_train, noise, ...)
    trainer: TrainerConfig fields (warmup, epochs_stage1, ...)
    seed:    run seed (model init, batch shuffling, dropout)
    out:     output directory for checkpoints and reports

Unknown keys anywhere are rejected so a typo cannot silently fall back to
a default. Command-line flags override the document.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import SyntheticSpec
from .model import LaNatConfig
from .trainer import TrainerConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: LaNatConfig = field(default_factory=LaNatConfig)
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    seed: int = 0
    out: Path = Path("runs")


_SECTIONS = {"model": LaNatConfig, "data": SyntheticSpec, "trainer": TrainerConfig}


def _build_section(name: str, cls, raw) -> object:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be a mapping, got {type(raw).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown keys in section {name!r}: {unknown}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"section {name!r}: {err}") from err


def parse_run_config(doc: dict | None) -> RunConfig:
    """Validate a parsed YAML mapping and build the typed configuration."""
    doc = doc or {}
    if not isinstance(doc, dict):
        raise ConfigError(f"config root must be a mapping, got {type(doc).__name__}")
    known = set(_SECTIONS) | {"seed", "out"}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {unknown}")
    sections = {name: _build_section(name, cls, doc.get(name))
                for name, cls in _SECTIONS.items()}
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError(f"seed must be an integer, got {seed!r}")
    out = doc.get("out", "runs")
    if not isinstance(out, str):
        raise ConfigError(f"out must be a path string, got {out!r}")
    return RunConfig(seed=seed, out=Path(out), **sections)


def load_run_config(path=None) -> RunConfig:
    """Read the YAML document at ``path``; no path means all defaults."""
    if path is None:
        return RunConfig()
    text = Path(path).read_text()
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as err:
        raise ConfigError(f"{path}: {err}") from err
    try:
        return parse_run_config(doc)
    except ConfigError as err:
        raise ConfigError(f"{path}: {err}") from err
