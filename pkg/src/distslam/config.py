"""Scenario configuration: a versioned YAML document with nested sections."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import yaml

from .errors import ConfigError, DomainError, UnknownParameter
from .frontend import FrontendConfig
from .network import NetworkConfig
from .pcm import PcmConfig
from .pgo import PgoConfig
from .world import WorldConfig

SCHEMA_VERSION = 1
SCENARIO_DIR = Path(__file__).with_name("scenarios")

_SECTIONS = {
    "world": WorldConfig,
    "network": NetworkConfig,
    "frontend": FrontendConfig,
    "pcm": PcmConfig,
    "pgo": PgoConfig,
}

# sweepable parameter -> (section, field)
SWEEP_PARAMETERS = {
    "pcm_threshold": ("pcm", "likelihood_threshold"),
    "descriptor_match_threshold": ("frontend", "descriptor_match_threshold"),
    "min_correspondences": ("frontend", "min_correspondences"),
}


@dataclass(frozen=True)
class ScenarioConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    pcm: PcmConfig = field(default_factory=PcmConfig)
    pgo: PgoConfig = field(default_factory=PgoConfig)
    runs: int = 1
    seed: int = 0
    output_dir: str = "runs"
    name: str = "scenario"

    def __post_init__(self):
        if not isinstance(self.runs, int) or self.runs < 1:
            raise ConfigError("runs must be an integer >= 1")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")

    def with_parameter(self, name: str, value) -> ScenarioConfig:
        if name not in SWEEP_PARAMETERS:
            raise UnknownParameter(f"unknown sweep parameter {name!r}; choose from {sorted(SWEEP_PARAMETERS)}")
        section, attr = SWEEP_PARAMETERS[name]
        sub = getattr(self, section)
        kind = {f.name: f.type for f in fields(sub)}[attr]
        value = int(value) if kind == "int" else float(value)
        try:
            return replace(self, **{section: replace(sub, **{attr: value})})
        except (ConfigError, DomainError) as exc:
            raise ConfigError(f"{name}={value}: {exc}") from exc

    def to_dict(self) -> dict:
        out = {"schema_version": SCHEMA_VERSION, "name": self.name, "runs": self.runs, "seed": self.seed,
               "output_dir": self.output_dir}
        for section in _SECTIONS:
            raw = dataclasses.asdict(getattr(self, section))
            out[section] = {k: _plain(v) for k, v in raw.items()}
        return out


def _plain(v):
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    if hasattr(v, "value"):
        return v.value
    return v


def _section(name: str, cls, raw) -> object:
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in section {name!r}: {', '.join(unknown)}; allowed: {', '.join(sorted(known))}")
    try:
        return cls(**raw)
    except (ConfigError, DomainError, ValueError, TypeError) as exc:
        raise ConfigError(f"invalid section {name!r}: {exc}") from exc


def from_dict(doc: dict) -> ScenarioConfig:
    if not isinstance(doc, dict):
        raise ConfigError("scenario document must be a mapping")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    top = {"schema_version", "name", "runs", "seed", "output_dir", *_SECTIONS}
    unknown = sorted(set(doc) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    kwargs = {name: _section(name, cls, doc.get(name)) for name, cls in _SECTIONS.items()}
    for key in ("name", "runs", "seed", "output_dir"):
        if key in doc:
            kwargs[key] = doc[key]
    return ScenarioConfig(**kwargs)


def load(path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    return from_dict(doc)


def dump(cfg: ScenarioConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def builtin(name: str = "standard") -> ScenarioConfig:
    return load(SCENARIO_DIR / f"{name}.yaml")
