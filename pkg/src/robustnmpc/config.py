"""Run configuration: one YAML file describing a whole experiment.

The schema mirrors the library dataclasses section by section; unknown keys
are rejected so a typo cannot silently fall back to a default. Only the
output directory may be overridden from the environment (``ROBUSTNMPC_OUT``).
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .controllers import ControllerConfig, CONTROLLER_NAMES
from .dynamics import VehicleParams, TireParams
from .simulate import SimConfig
from .track import TrackSpec, ReferenceTrajectory, generate_track, velocity_profile, load_csv

OUT_DIR_ENV = "ROBUSTNMPC_OUT"


class ConfigError(ValueError):
    """Raised for unreadable files, schema violations and unknown keys."""


@dataclass
class TrackSource:
    """Where the reference trajectory comes from: a CSV or a generator spec."""

    csv: str | None = None
    spec: TrackSpec | None = None
    seed: int = 1

    def build(self, base_dir: Path) -> ReferenceTrajectory:
        if self.csv is not None:
            return load_csv(base_dir / self.csv)
        spec = self.spec if self.spec is not None else TrackSpec()
        return velocity_profile(generate_track(spec, seed=self.seed))


@dataclass
class RunConfig:
    """Everything one closed-loop experiment needs, in one reviewable file."""

    controller: str = "nominal"
    out_dir: str = "out"
    sim: SimConfig = field(default_factory=SimConfig)
    nmpc: ControllerConfig = field(default_factory=ControllerConfig)
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    tire: TireParams = field(default_factory=TireParams)
    track: TrackSource = field(default_factory=TrackSource)
    base_dir: Path = field(default_factory=Path)

    def __post_init__(self):
        if self.controller not in CONTROLLER_NAMES:
            raise ConfigError(
                f"unknown controller {self.controller!r}; choose from {CONTROLLER_NAMES}")
        if abs(self.sim.ts - self.nmpc.ts) > 1e-12:
            raise ConfigError("sim.ts and nmpc.ts must agree")

    def resolved_out_dir(self) -> Path:
        return Path(os.environ.get(OUT_DIR_ENV, self.out_dir))

    def trajectory(self) -> ReferenceTrajectory:
        return self.track.build(self.base_dir)


def _build_dataclass(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        if isinstance(value, list):
            value = tuple(value)
        kwargs[f.name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _build_track(data: dict, where: str) -> TrackSource:
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    unknown = set(data) - {"csv", "generate", "seed"}
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    if "csv" in data and "generate" in data:
        raise ConfigError(f"{where}: give either 'csv' or 'generate', not both")
    source = TrackSource(seed=int(data.get("seed", 1)))
    if "csv" in data:
        source.csv = str(data["csv"])
    elif "generate" in data:
        source.spec = _build_dataclass(TrackSpec, data["generate"], f"{where}.generate")
    return source


_SECTIONS = {
    "sim": SimConfig,
    "nmpc": ControllerConfig,
    "vehicle": VehicleParams,
    "tire": TireParams,
}


def from_dict(data: dict, base_dir: Path | str = ".") -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    known = {"controller", "out_dir", "track", *_SECTIONS}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    kwargs = {"base_dir": Path(base_dir)}
    if "controller" in data:
        kwargs["controller"] = str(data["controller"])
    if "out_dir" in data:
        kwargs["out_dir"] = str(data["out_dir"])
    for key, cls in _SECTIONS.items():
        if key in data:
            kwargs[key] = _build_dataclass(cls, data[key], key)
    if "track" in data:
        kwargs["track"] = _build_track(data["track"], "track")
    return RunConfig(**kwargs)


def from_file(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if data is None:
        data = {}
    return from_dict(data, base_dir=path.parent)
