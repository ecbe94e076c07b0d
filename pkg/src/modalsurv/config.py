"""Run configuration: one TOML file with a section per stage."""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import SynthConfig
from .encoders import EncoderConfig
from .evaluation import MODALITY_SUBSETS
from .pretrain import PretrainConfig
from .survival import SurvivalConfig


@dataclass
class MetricsConfig:
    tie_credit: float = 0.0
    fold_count: int = 4

    def __post_init__(self):
        if self.tie_credit not in (0.0, 0.5):
            raise ValueError("tie_credit must be 0.0 or 0.5")
        if self.fold_count < 1:
            raise ValueError("fold_count must be positive")


@dataclass
class AblationConfig:
    subsets: list[str] = field(default_factory=lambda: list(MODALITY_SUBSETS))
    percentages: list[float] = field(default_factory=lambda: [10.0, 20.0, 30.0, 40.0])
    strategy: str = "average"

    def __post_init__(self):
        unknown = [s for s in self.subsets if s not in MODALITY_SUBSETS]
        if unknown:
            raise ValueError(f"unknown modality subsets {unknown}; choose from {list(MODALITY_SUBSETS)}")
        if any(not 0 <= p <= 100 for p in self.percentages):
            raise ValueError("replacement percentages must lie in [0, 100]")


@dataclass
class PathsConfig:
    manifest: str | None = None
    checkpoint: str | None = None
    out: str = "out"


SECTIONS = {
    "paths": PathsConfig,
    "synth": SynthConfig,
    "encoder": EncoderConfig,
    "pretrain": PretrainConfig,
    "survival": SurvivalConfig,
    "metrics": MetricsConfig,
    "ablation": AblationConfig,
}
# sections whose seed follows the top-level seed unless set explicitly
SEEDED = ("synth", "encoder", "pretrain", "survival")


@dataclass
class RunConfig:
    seed: int = 0
    paths: PathsConfig = field(default_factory=PathsConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    survival: SurvivalConfig = field(default_factory=SurvivalConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def to_dict(self) -> dict:
        return asdict(self)


def _coerce(value: str):
    """Parse a ``--set`` value with TOML literal rules, falling back to a string."""
    try:
        return tomllib.loads(f"v = {value}")["v"]
    except tomllib.TOMLDecodeError:
        return value


def build_config(doc: dict | None = None, overrides: list[str] = (), seed: int | None = None, out: str | None = None) -> RunConfig:
    """Assemble a RunConfig from a parsed TOML document plus CLI overrides.

    ``overrides`` are ``section.key=value`` strings. An explicit ``seed``
    replaces the top-level seed and every per-section seed.
    """
    doc = {k: (dict(v) if isinstance(v, dict) else v) for k, v in (doc or {}).items()}
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or section not in SECTIONS:
            raise ValueError(f"override {item!r} must look like section.key=value")
        doc.setdefault(section, {})[name] = _coerce(value.strip())
    unknown = set(doc) - set(SECTIONS) - {"seed"}
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    top_seed = int(doc.get("seed", 0)) if seed is None else int(seed)
    built = {}
    for name, cls in SECTIONS.items():
        values = dict(doc.get(name, {}))
        allowed = {f.name for f in fields(cls)}
        bad = set(values) - allowed
        if bad:
            raise ValueError(f"unknown keys in [{name}]: {sorted(bad)}")
        if name in SEEDED and (seed is not None or "seed" not in values):
            values["seed"] = top_seed
        for k, v in values.items():
            if isinstance(v, list) and name in ("synth", "encoder"):
                values[k] = tuple(v)
        built[name] = cls(**values)
    if out is not None:
        built["paths"].out = out
    return RunConfig(seed=top_seed, **built)


def load_config(path=None, overrides: list[str] = (), seed: int | None = None, out: str | None = None) -> RunConfig:
    doc = {}
    if path is not None:
        with open(Path(path), "rb") as fh:
            doc = tomllib.load(fh)
    return build_config(doc, overrides, seed, out)
