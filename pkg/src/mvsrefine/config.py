"""Run configuration: stage layout, sampling constants and ablation switches.

Configurations serialise to JSON with a ``schema_version`` field.  The
default layout has three stages at output scales ``(1/8, 1/4, 1/4)`` whose
fine cost volumes use features at ``(1/4, 1/2, 1)``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

from .features import CONTEXT_SCALES, SCALES

SCHEMA_VERSION = 1
INITIAL, SPATIAL = "I", "S"
MODES = ("selection", "expectation")
FEATURE_MODES = ("learned", "handcrafted")

DESK_CONTEXT = {Fraction(1, 8): 32, Fraction(1, 4): 24}


class ConfigError(ValueError):
    pass


def _frac(x) -> Fraction:
    if isinstance(x, str):
        return Fraction(x)
    return Fraction(x).limit_denominator(64)


@dataclass
class StageConfig:
    base_scale: Fraction
    fine_scale: Fraction
    iterations: int = 4
    m: int = 4
    pyramid: bool = True

    def __post_init__(self):
        self.base_scale = _frac(self.base_scale)
        self.fine_scale = _frac(self.fine_scale)
        if self.iterations < 0:
            raise ConfigError("iterations must be non-negative")
        if self.m < 1:
            raise ConfigError("M must be at least 1")
        if self.base_scale not in CONTEXT_SCALES:
            raise ConfigError(f"stage scale {self.base_scale} must be one of {[str(s) for s in CONTEXT_SCALES]}")
        if self.fine_scale not in SCALES or self.fine_scale < self.base_scale:
            raise ConfigError(f"fine scale {self.fine_scale} must be a feature scale >= {self.base_scale}")

    @property
    def schedule(self) -> tuple:
        """Alternating initial / spatial sampling, starting with initial."""
        return tuple(INITIAL if i % 2 == 0 else SPATIAL for i in range(self.iterations))

    @property
    def has_fine(self) -> bool:
        return self.pyramid and self.fine_scale != self.base_scale

    def to_dict(self):
        return {"base_scale": str(self.base_scale), "fine_scale": str(self.fine_scale),
                "iterations": self.iterations, "m": self.m, "pyramid": self.pyramid}


def default_stages():
    return [StageConfig(Fraction(1, 8), Fraction(1, 4)),
            StageConfig(Fraction(1, 4), Fraction(1, 2)),
            StageConfig(Fraction(1, 4), Fraction(1))]


@dataclass
class RefineConfig:
    stages: list = field(default_factory=default_stages)
    n_full: int = 128
    seed: int = 0
    dilations: tuple = (1, 3)
    mode: str = "selection"
    use_geometry: bool = True
    jitter: bool = True
    alpha: float = 8.0
    delta: float = 0.0
    features: str = "learned"
    match_widths: str = "desk"
    context_channels: dict = field(default_factory=lambda: dict(DESK_CONTEXT))
    hidden: int = 64
    recenter_on_local_wta: bool = True
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        self.stages = [s if isinstance(s, StageConfig) else StageConfig(**s) for s in self.stages]
        self.context_channels = {_frac(k): int(v) for k, v in self.context_channels.items()}
        self.dilations = tuple(self.dilations)
        if not self.stages:
            raise ConfigError("at least one stage is required")
        if self.n_full < 2:
            raise ConfigError("n_full must be at least 2")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.features not in FEATURE_MODES:
            raise ConfigError(f"features must be one of {FEATURE_MODES}, got {self.features!r}")
        if self.match_widths not in ("desk", "paper"):
            raise ConfigError("match_widths must be 'desk' or 'paper'")
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        for a, b in zip(self.stages, self.stages[1:]):
            if b.base_scale < a.base_scale:
                raise ConfigError("stage scales must not decrease")
        for s in self.stages:
            if s.base_scale not in self.context_channels:
                raise ConfigError(f"no context width configured for scale {s.base_scale}")
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}")

    @property
    def coarsest(self) -> Fraction:
        return self.stages[0].base_scale

    @property
    def feature_scales(self):
        s = {st.base_scale for st in self.stages} | {st.fine_scale for st in self.stages if st.has_fine}
        return sorted(s, reverse=True)

    def replace(self, **kw) -> "RefineConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["stages"] = [s.to_dict() for s in self.stages]
        d["dilations"] = list(self.dilations)
        d["context_channels"] = {str(k): v for k, v in self.context_channels.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RefineConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "schema_version" not in d:
            raise ConfigError("config is missing schema_version")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RefineConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}:{e.lineno}: {e.msg}") from None
        try:
            return cls.from_dict(d)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{path}: {e}") from None
