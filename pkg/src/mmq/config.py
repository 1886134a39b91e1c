"""One YAML document drives the whole pipeline.

Sections map onto the per-module dataclasses; ``--set section.key=value``
overrides are parsed with YAML scalar rules and type-checked per field.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .downstream import DownstreamConfig
from .errors import ConfigError
from .fileio import atomic_write_text
from .maml import TrainConfig
from .quantify import FuseConfig
from .refinement import RefineConfig
from .synthetic import GeneratorSpec


@dataclass(frozen=True)
class DataConfig:
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    noise_rate: float = 0.2

    def validate(self) -> None:
        self.generator.validate()
        if not 0.0 <= self.noise_rate < 1.0:
            raise ConfigError(f"data.noise_rate must be in [0, 1), got {self.noise_rate}")


@dataclass(frozen=True)
class LoopConfig:
    m: int = 5


@dataclass(frozen=True)
class AblateConfig:
    grid: str = "3/1,4/2,5/3,7/4"

    def pairs(self) -> list[tuple[int, int]]:
        try:
            pairs = [tuple(int(v) for v in item.split("/")) for item in self.grid.split(",")]
        except ValueError:
            raise ConfigError(f"ablate.grid must look like '3/1,4/2', got {self.grid!r}") from None
        if any(len(p) != 2 for p in pairs):
            raise ConfigError(f"ablate.grid must look like '3/1,4/2', got {self.grid!r}")
        for m, n in pairs:
            if m < 1 or n < 1 or (m > 1 and n >= m) or (m == 1 and n != 1):
                raise ConfigError(f"ablate.grid entry {m}/{n}: need 1 <= n < m (or 1/1)")
        return pairs


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    m: int = 5
    fuse: FuseConfig = field(default_factory=FuseConfig)
    downstream: DownstreamConfig = field(default_factory=DownstreamConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)

    def generator_spec(self) -> GeneratorSpec:
        return dataclasses.replace(self.data.generator, seed=self.seed)

    def validate(self) -> None:
        self.data.validate()
        self.train.validate()
        self.refine.validate()
        if self.m < 1:
            raise ConfigError("loop.m must be >= 1")
        self.fuse.validate(self.m if self.m > 1 else None)
        self.downstream.validate()
        self.ablate.pairs()

    def to_dict(self) -> dict:
        gen = dataclasses.asdict(self.data.generator)
        gen.pop("seed")
        return {
            "seed": self.seed,
            "out_dir": self.out_dir,
            "data": {**gen, "noise_rate": self.data.noise_rate},
            "train": dataclasses.asdict(self.train),
            "refine": dataclasses.asdict(self.refine),
            "loop": {"m": self.m},
            "fuse": dataclasses.asdict(self.fuse),
            "downstream": dataclasses.asdict(self.downstream),
            "ablate": dataclasses.asdict(self.ablate),
        }

    def hash(self) -> str:
        """Stable under key order; the output directory does not take part."""
        body = {k: v for k, v in self.to_dict().items() if k != "out_dir"}
        canonical = json.dumps(body, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


_SECTIONS = {
    "data": (GeneratorSpec, DataConfig),
    "train": (TrainConfig,),
    "refine": (RefineConfig,),
    "loop": (LoopConfig,),
    "fuse": (FuseConfig,),
    "downstream": (DownstreamConfig,),
    "ablate": (AblateConfig,),
}


def _field_types(section: str) -> dict[str, type]:
    types: dict[str, type] = {}
    for cls in _SECTIONS[section]:
        for name, tp in typing.get_type_hints(cls).items():
            if tp in (int, float, str, bool):
                types[name] = tp
    types.pop("seed", None)
    return types


def _coerce(where: str, tp: type, value):
    if tp is bool:
        if isinstance(value, bool):
            return value
    elif tp is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif tp is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif tp is str:
        if isinstance(value, str):
            return value
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return str(value)
    raise ConfigError(f"{where}: expected {tp.__name__}, got {value!r}")


def from_dict(doc: dict | None) -> PipelineConfig:
    doc = dict(doc or {})
    top = {}
    for key in ("seed", "out_dir"):
        if key in doc:
            top[key] = _coerce(key, int if key == "seed" else str, doc.pop(key))
    sections: dict[str, dict] = {}
    for name, body in doc.items():
        if name not in _SECTIONS:
            raise ConfigError(f"unknown config section {name!r}")
        if body is None:
            body = {}
        if not isinstance(body, dict):
            raise ConfigError(f"section {name!r} must be a mapping")
        types = _field_types(name)
        values = {}
        for key, value in body.items():
            if key not in types:
                raise ConfigError(f"{name}.{key}: unknown field")
            values[key] = _coerce(f"{name}.{key}", types[key], value)
        sections[name] = values

    data = sections.get("data", {})
    noise = data.pop("noise_rate", DataConfig.noise_rate)
    cfg = PipelineConfig(
        **top,
        data=DataConfig(GeneratorSpec(**data), noise),
        train=TrainConfig(**sections.get("train", {})),
        refine=RefineConfig(**sections.get("refine", {})),
        m=sections.get("loop", {}).get("m", 5),
        fuse=FuseConfig(**sections.get("fuse", {})),
        downstream=DownstreamConfig(**sections.get("downstream", {})),
        ablate=AblateConfig(**sections.get("ablate", {})),
    )
    cfg.validate()
    return cfg


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` strings onto a raw config document."""
    doc = {k: (dict(v) if isinstance(v, dict) else v) for k, v in (doc or {}).items()}
    for item in overrides:
        target, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        value = yaml.safe_load(raw) if raw else ""
        path = target.strip().split(".")
        if len(path) == 1 and path[0] in ("seed", "out_dir"):
            doc[path[0]] = value
        elif len(path) == 2:
            section = doc.setdefault(path[0], {})
            if section is None:
                section = doc[path[0]] = {}
            section[path[1]] = value
        else:
            raise ConfigError(f"override target {target!r} must be section.key")
    return doc


def load_config(path=None, overrides: list[str] | None = None) -> PipelineConfig:
    doc = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            doc = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    return from_dict(apply_overrides(doc, overrides or []))


def dump_config(cfg: PipelineConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def save_config(path, cfg: PipelineConfig) -> None:
    atomic_write_text(path, f"# config_hash={cfg.hash()}\n" + dump_config(cfg))
