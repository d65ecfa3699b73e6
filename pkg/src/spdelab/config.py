"""Declarative run configuration (JSON or TOML) with a strict schema.

Unknown keys and wrongly typed values are errors.  Every random component
draws its seed from the single root ``seed`` through :func:`component_seed`.
"""

from __future__ import annotations

import json
import re
import zlib
from pathlib import Path
from typing import Literal

import numpy as np
import tomli
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .io import stable_hash

__all__ = [
    "BdsdeSection",
    "CompareSection",
    "ConfigError",
    "GridSection",
    "ParticleSection",
    "RunConfig",
    "SpdeSection",
    "component_seed",
    "load_config",
]


class ConfigError(ValueError):
    """Raised with one ``location: message`` line per problem."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", strict=True, frozen=True)


class GridSection(_Strict):
    x_min: float = -8.0
    x_max: float = 8.0
    n_cells: int = Field(256, ge=4)

    @model_validator(mode="after")
    def _ordered(self):
        if not self.x_max > self.x_min:
            raise ValueError("x_max must exceed x_min")
        return self


class InitialSection(_Strict):
    """Initial condition ``mass·Φ((x - center)/scale)``, measured from ``-∞``."""

    mass: float = Field(1.0, gt=0)
    scale: float = Field(0.5, gt=0)
    center: float = 0.0


class SpdeSection(_Strict):
    kernel: Literal["sbm", "fv", "none"] = "sbm"
    dt: float = Field(1e-3, gt=0)
    T: float = Field(0.25, gt=0)
    n_levels: int = Field(8192, ge=1)
    scheme: Literal["mild-euler", "picard"] = "mild-euler"
    n_iter: int = Field(8, ge=1)
    save_every: int = Field(10, ge=1)
    replicas: int = Field(1, ge=1)
    initial: InitialSection = InitialSection()


class ParticleSection(_Strict):
    n_init: int = Field(2000, ge=1)
    T: float = Field(0.1, gt=0)
    initial_mass: float = Field(1.0, gt=0)
    rate_factor: float = Field(1.0, ge=0)
    pair_rate: float = Field(1.0, ge=0)
    init_scale: float = Field(0.5, gt=0)
    snapshot_dt: float | None = None
    replicas: int = Field(100, ge=1)
    test_center: float = 0.5
    test_width: float = 1.0


class BdsdeSection(_Strict):
    terminal: Literal["x", "x2"] = "x2"
    t: float = Field(0.1, ge=0)
    y: float = 0.0
    T: float = Field(1.0, gt=0)
    n_steps: int = Field(50, ge=1)
    n_paths: int = Field(10_000, ge=10)
    degree: int = Field(3, ge=1)
    ipp_dts: list[float] = [4e-3, 2e-3, 1e-3, 5e-4]
    ipp_paths: int = Field(1000, ge=10)
    represent_kernel: Literal["fv", "none"] = "fv"
    represent_paths: int = Field(2000, ge=10)
    tolerance: float = Field(0.02, gt=0)
    represent_tolerance: float = Field(0.05, gt=0)


class CompareSection(_Strict):
    model: Literal["sbm", "fv"] = "sbm"
    t: float = Field(0.1, gt=0)
    probes: list[float] = [-1.0, 0.0, 1.0]
    particle_replicas: int = Field(200, ge=1)
    spde_replicas: int = Field(200, ge=1)
    alpha: float = Field(0.01, gt=0, lt=1)
    fv_violation_tolerance: float = Field(0.02, gt=0)


class RunConfig(_Strict):
    seed: int = Field(0, ge=0)
    grid: GridSection = GridSection()
    spde: SpdeSection = SpdeSection()
    particles: ParticleSection = ParticleSection()
    bdsde: BdsdeSection = BdsdeSection()
    compare: CompareSection = CompareSection()

    def config_hash(self) -> str:
        return stable_hash(self.model_dump(mode="json"))

    def with_seed(self, seed: int | None) -> "RunConfig":
        return self if seed is None else self.model_copy(update={"seed": int(seed)})


def component_seed(root: int, component: str) -> int:
    """Deterministic 32-bit seed for a named component of a run."""
    ss = np.random.SeedSequence([int(root), zlib.crc32(component.encode())])
    return int(ss.generate_state(1, np.uint32)[0])


def _line_of(text: str, loc: tuple) -> int | None:
    keys = [k for k in loc if isinstance(k, str)]
    if not keys:
        return None
    pat = re.compile(r'^\s*"?' + re.escape(keys[-1]) + r'"?\s*[:=]')
    for i, line in enumerate(text.splitlines(), 1):
        if pat.search(line):
            return i
    return None


def _format_errors(text: str, exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = tuple(err["loc"])
        where = ".".join(str(k) for k in loc) or "<root>"
        line = _line_of(text, loc)
        prefix = f"line {line}: " if line else ""
        lines.append(f"{prefix}{where}: {err['msg']}")
    return "\n".join(lines)


def parse_config(text: str, fmt: str) -> RunConfig:
    try:
        if fmt == "toml":
            raw = tomli.loads(text)
        elif fmt == "json":
            raw = json.loads(text)
        else:
            raise ConfigError(f"unknown config format {fmt!r}")
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"TOML syntax: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"line {exc.lineno}: JSON syntax: {exc.msg}") from None
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(_format_errors(text, exc)) from None


def load_config(path=None) -> RunConfig:
    """Read ``path`` (``.toml`` or ``.json``); ``None`` gives the defaults."""
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    fmt = "toml" if path.suffix.lower() == ".toml" else "json"
    return parse_config(text, fmt)
