"""Flat dotted-key configuration: ``model.*``, ``train.*`` and ``sparsify.*``."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .model import ModelConfig, parse_field
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class SparsifyConfig:
    ratio: float = 0.0
    seed: int = 0
    reference: str = "train"
    evaluation: str = "test"

    def __post_init__(self):
        if not 0 <= self.ratio < 1:
            raise ValueError(f"compression ratio must lie in [0, 1), got {self.ratio}")


SECTIONS = {"model": ModelConfig, "train": TrainConfig, "sparsify": SparsifyConfig}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sparsify: SparsifyConfig = field(default_factory=SparsifyConfig)

    @classmethod
    def build(cls, file_values: dict[str, str] | None = None,
              overrides: dict[str, str] | None = None) -> "RunConfig":
        """Merge file values with overrides (overrides win) into typed sections."""
        merged = dict(file_values or {})
        merged.update(overrides or {})
        kwargs: dict[str, dict] = {s: {} for s in SECTIONS}
        for key, raw in merged.items():
            section, _, name = key.partition(".")
            if section not in SECTIONS or not name:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                kwargs[section][name] = parse_field(SECTIONS[section], name, raw)
            except KeyError:
                raise ConfigError(f"unknown config key {key!r}") from None
            except ValueError as exc:
                raise ConfigError(f"bad value for {key!r}: {exc}") from None
        try:
            return cls(**{s: SECTIONS[s](**kw) for s, kw in kwargs.items()})
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def to_text(self) -> str:
        lines = []
        for section in SECTIONS:
            obj = getattr(self, section)
            for f in fields(obj):
                v = getattr(obj, f.name)
                if isinstance(v, list):
                    v = ",".join(map(str, v))
                elif isinstance(v, bool):
                    v = "true" if v else "false"
                elif isinstance(v, float):
                    v = repr(v)
                lines.append(f"{section}.{f.name} = {v}")
        return "\n".join(lines) + "\n"


def parse_text(text: str) -> dict[str, str]:
    values = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        values[k.strip()] = v.strip()
    return values


def read_file(path) -> dict[str, str]:
    return parse_text(Path(path).read_text())
