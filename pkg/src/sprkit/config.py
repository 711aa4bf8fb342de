"""Run configuration: one YAML document with a section per component.

Example::

    data:      {source: null, synthetic: 16, seed: 0}
    synthesis: {encoding: phase-only, object_extent: 32, dft_size: 192, crop: 32, ...}
    model:     {input_crop: 32, fc_width: 256, ur_blocks: 1, ...}
    train:     {epochs: 300, batch: 4, lr: 0.003, ...}
    solver:    {algorithm: gs, max_iters: 2000, trials: 3, ...}

Sections and keys mirror the dataclasses they build; missing keys take the
dataclass defaults and unknown ones are rejected. Values are converted by
field type, so ``lr: 1e-3`` (a string under YAML 1.1) is read as a float.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

import yaml

from .dataset import DESK_SYNTHESIS, SynthesisConfig
from .model import DESK_MODEL, DESK_TRAIN, FULL_MODEL, ModelConfig, TrainConfig
from .solvers import SolverConfig

PRESETS = ("full", "desk")


class ConfigError(ValueError):
    """Unknown section or key, or a value of the wrong type."""


@dataclass(frozen=True)
class DataConfig:
    """Where samples come from: a directory of images or ``synthetic`` generated ones."""

    source: str | None = None
    synthetic: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.synthetic < 0:
            raise ValueError("synthetic count must be >= 0")


SECTIONS = {
    "data": DataConfig,
    "synthesis": SynthesisConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "solver": SolverConfig,
}


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    model: ModelConfig = field(default_factory=lambda: FULL_MODEL)
    train: TrainConfig = field(default_factory=TrainConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)

    def to_dict(self) -> dict[str, dict[str, Any]]:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}

    @classmethod
    def from_dict(cls, d: Mapping | None, base: RunConfig | None = None) -> RunConfig:
        """Build from a nested mapping; keys absent from ``d`` come from ``base``."""
        out = base or cls()
        d = d or {}
        if not isinstance(d, Mapping):
            raise ConfigError("configuration must be a mapping of sections")
        unknown = sorted(set(d) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown section(s) {unknown}; expected {sorted(SECTIONS)}")
        for name, values in d.items():
            out = out.with_section(name, values or {})
        return out

    def with_section(self, name: str, values: Mapping[str, Any]) -> RunConfig:
        """Copy with some keys of one section replaced, converted and validated."""
        if name not in SECTIONS:
            raise ConfigError(f"unknown section {name!r}")
        if not isinstance(values, Mapping):
            raise ConfigError(f"section {name!r} must be a mapping")
        cls = SECTIONS[name]
        types = {f.name: f.type for f in fields(cls)}
        unknown = sorted(set(values) - set(types))
        if unknown:
            raise ConfigError(f"unknown key(s) {unknown} in section {name!r}")
        conv = {k: _coerce(v, types[k], f"{name}.{k}") for k, v in values.items()}
        try:
            section = replace(getattr(self, name), **conv)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"section {name!r}: {e}") from e
        return replace(self, **{name: section})

    def override(self, dotted: str, value: Any) -> RunConfig:
        """Apply ``section.key=value``; ``value`` may be a YAML scalar string."""
        section, _, key = dotted.partition(".")
        if not key:
            raise ConfigError(f"override {dotted!r} must look like section.key")
        if isinstance(value, str):
            value = yaml.safe_load(value) if value.strip() else None
        return self.with_section(section, {key: value})

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=False)

    def dump(self, path) -> None:
        Path(path).write_text(self.to_yaml())


def _coerce(value: Any, annot: str, where: str) -> Any:
    kinds = [a.strip() for a in str(annot).split("|")]
    if value is None:
        if "None" in kinds:
            return None
        raise ConfigError(f"{where} must not be null")
    base = [k for k in kinds if k != "None"][0]
    try:
        if base == "bool":
            if isinstance(value, bool):
                return value
            if isinstance(value, str) and value.lower() in ("true", "false"):
                return value.lower() == "true"
            raise ValueError
        if base == "int":
            if isinstance(value, bool):
                raise ValueError
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if base == "float":
            if isinstance(value, bool):
                raise ValueError
            return float(value)
        if base == "str":
            if not isinstance(value, str):
                raise ValueError
            return value
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: cannot read {value!r} as {base}") from None
    return value


def preset(name: str) -> RunConfig:
    """``full`` is the default architecture; ``desk`` is the CPU-sized variant."""
    if name == "full":
        return RunConfig()
    if name == "desk":
        return RunConfig(synthesis=SynthesisConfig(**DESK_SYNTHESIS), model=DESK_MODEL,
                         train=DESK_TRAIN, solver=SolverConfig(support=DESK_SYNTHESIS["object_extent"]),
                         data=DataConfig(synthetic=16))
    raise ConfigError(f"unknown preset {name!r}; expected one of {PRESETS}")


def load(path, base: RunConfig | None = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML: {e}") from e
    return RunConfig.from_dict(doc, base)
