"""Scenario files: YAML text validated into typed settings, errors reported with line numbers."""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .errors import ConfigError


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class RegionSpec(_Strict):
    lo: tuple[float, float]
    hi: tuple[float, float]
    count: int = Field(ge=0)


class WorldSpec(_Strict):
    bounds: tuple[tuple[float, float], tuple[float, float]] = ((0.0, 0.0), (50.0, 30.0))
    count: int = Field(3000, ge=0)
    height: tuple[float, float] = (0.2, 3.0)
    regions: Optional[list[RegionSpec]] = None


class NoiseSpec(_Strict):
    pixel_sigma: float = Field(1.0, ge=0)
    depth_sigma_frac: float = Field(0.005, ge=0)
    dropout: float = Field(0.0, ge=0, le=1)
    signature_dropout: float = Field(0.0, ge=0, le=1)
    odom_sigma_t: float = Field(0.0, ge=0)
    odom_sigma_r: float = Field(0.0, ge=0)
    descriptor_bit_flips: int = Field(0, ge=0)


class CameraSpec(_Strict):
    id: int = Field(ge=1, lt=0xFFFFFFFF)
    kind: Literal["depth", "mono"] = "depth"
    mount: Literal["front", "rear"] = "front"
    rate_hz: float = Field(10.0, gt=0)
    time_offset: float = 0.0
    blind: list[tuple[float, float]] = []
    window: int = Field(12, ge=2)
    augment_cap: int = Field(2000, ge=0)
    match_mode: Literal["exact", "hamming"] = "exact"


class RobotSpec(_Strict):
    name: str
    waypoints: list[tuple[float, float]]
    speed: float = Field(1.0, gt=0)
    start_time: float = 0.0
    cameras: list[CameraSpec]

    @field_validator("waypoints")
    @classmethod
    def _distinct(cls, w):
        if len(w) < 2:
            raise ValueError("need at least two waypoints")
        for a, b in zip(w, w[1:]):
            if a == b:
                raise ValueError(f"consecutive waypoints must differ, got {a} twice")
        return w


class RigidSpec(_Strict):
    a: int
    b: int


class NetworkSpec(_Strict):
    loss: float = Field(0.0, ge=0, lt=1)
    drop_seqs: list[int] = []
    latency: tuple[float, float] = (0.0, 0.0)
    window: int = Field(256, ge=1)


class ServerSpec(_Strict):
    exclusion: bool = True
    pause_ticks: int = Field(0, ge=0)
    cell_size: float = Field(2.0, gt=0)
    loop_min_score: float = 0.30
    min_inliers: int = 12
    max_rms: float = 0.10
    pgo_iters: int = 20


class AssertionSpec(_Strict):
    max_maps: Optional[int] = None
    max_ate: Optional[float] = None
    max_mono_ate: Optional[float] = None
    audit_clean: bool = True


class Scenario(_Strict):
    name: str = "scenario"
    seed: int = 0
    duration: Optional[float] = None
    world: WorldSpec = WorldSpec()
    noise: NoiseSpec = NoiseSpec()
    robots: list[RobotSpec]
    rigid_pairs: list[RigidSpec] = []
    network: NetworkSpec = NetworkSpec()
    server: ServerSpec = ServerSpec()
    assertions: AssertionSpec = AssertionSpec()

    def cameras(self) -> list[tuple[RobotSpec, CameraSpec]]:
        return [(r, c) for r in self.robots for c in r.cameras]


def _line_index(node, path=(), out=None) -> dict:
    """Map key paths (as produced by pydantic error locs) to 1-based source lines."""
    out = {} if out is None else out
    out[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            _line_index(v, path + (k.value,), out)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            _line_index(v, path + (i,), out)
    return out


def parse_scenario(text: str, source: str = "<scenario>") -> Scenario:
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}" if mark is not None else source
        raise ConfigError(f"{where}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{source}:1: scenario must be a mapping")
    lines = _line_index(node)
    try:
        return Scenario.model_validate(data)
    except ValidationError as exc:
        msgs = []
        for err in exc.errors():
            loc = tuple(err["loc"])
            line = None
            for n in range(len(loc), -1, -1):  # nearest existing ancestor
                key = tuple(str(p) if not isinstance(p, int) else p for p in loc[:n])
                if key in lines:
                    line = lines[key]
                    break
            dotted = ".".join(str(p) for p in loc)
            msgs.append(f"{source}:{line or 1}: {dotted}: {err['msg']}")
        raise ConfigError("\n".join(msgs)) from None


def load_scenario(path: str | Path) -> Scenario:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"{p}: {exc}") from None
    return parse_scenario(text, str(p))
