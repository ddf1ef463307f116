"""Model configuration."""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass

from .errors import ConfigError

__all__ = ["ModelConfig"]


@dataclass(frozen=True)
class ModelConfig:
    """Dimensions and run settings shared across the pipeline.

    Attributes
    ----------
    M : number of experts (latent linear subsystems)
    K : latent dimension per expert
    d : observation dimension
    dt : observation time step
    L : block length for the online EM split
    N : particle count
    gamma_exponent : step-size exponent a in gamma_k = k**(-a)
    ess_min_fraction : resample when ESS < ess_min_fraction * N
    seed : root seed for all random streams
    """

    M: int
    K: int
    d: int
    dt: float
    L: int
    N: int
    gamma_exponent: float = 0.51
    ess_min_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        for name, lo in (("M", 1), ("K", 1), ("d", 1), ("L", 2), ("N", 2)):
            v = getattr(self, name)
            if not isinstance(v, (int,)) or isinstance(v, bool) or v < lo:
                raise ConfigError(f"{name} must be an integer >= {lo}, got {v!r}")
        if not (isinstance(self.dt, (int, float)) and math.isfinite(self.dt) and self.dt > 0):
            raise ConfigError(f"dt must be a positive finite real, got {self.dt!r}")
        if not (0.5 < self.gamma_exponent <= 1.0):
            raise ConfigError(
                f"gamma_exponent must lie in (0.5, 1], got {self.gamma_exponent!r}"
            )
        if not (0.0 < self.ess_min_fraction <= 1.0):
            raise ConfigError(
                f"ess_min_fraction must lie in (0, 1], got {self.ess_min_fraction!r}"
            )
        if not (isinstance(self.seed, int) and 0 <= self.seed < 2**64):
            raise ConfigError(f"seed must be a uint64, got {self.seed!r}")

    # -- serialization ----------------------------------------------------

    @classmethod
    def field_names(cls) -> tuple:
        return tuple(f.name for f in dataclasses.fields(cls))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown config fields: {sorted(extra)}")
        missing = {f.name for f in dataclasses.fields(cls) if f.default is dataclasses.MISSING} - set(data)
        if missing:
            raise ConfigError(f"missing config fields: {sorted(missing)}")
        return cls(**data)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config JSON must be an object")
        return cls.from_dict(data)
