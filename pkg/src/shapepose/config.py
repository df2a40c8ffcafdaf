"""Pipeline configuration loaded from a JSON file.

Layout (every section and key optional unless noted)::

    {
      "scene": "scene.json",          # input scene; or give "synth" instead
      "synth": {...SceneConfig fields...},
      "out_dir": "out",
      "topology": "default",          # or a path to a topology JSON file
      "seed": 0,
      "threads": 1,
      "frames": [0, 50],              # half-open frame range
      "pcp_variant": "strict",
      "triangulation": {"max_pair_residual": 10.0},
      "proposal": {...ProposalConfig fields...},
      "refine": {...RefineConfig fields...}
    }

Unknown keys anywhere are rejected. Relative paths resolve against the
directory holding the config file.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .association import ProposalConfig
from .geometry import SkeletonTopology, TopologyError, default_skeleton
from .refinement import RefineConfig
from .synth import ConfigError, SceneConfig
from .triangulation import DEFAULT_MAX_PAIR_RESIDUAL

PCP_VARIANTS = ("strict", "average")


@dataclass(frozen=True)
class PipelineConfig:
    scene: Path | None = None
    synth: SceneConfig | None = None
    out_dir: Path = Path("out")
    topology: str = "default"
    seed: int | None = None
    threads: int = 1
    frames: tuple[int, int | None] | None = None
    pcp_variant: str = "strict"
    max_pair_residual: float | None = DEFAULT_MAX_PAIR_RESIDUAL
    proposal: ProposalConfig = field(default_factory=ProposalConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)

    def load_topology(self) -> SkeletonTopology:
        if self.topology == "default":
            return default_skeleton()
        try:
            return SkeletonTopology.load(self.topology)
        except OSError as exc:
            raise ConfigError(f"topology: cannot read {self.topology}: {exc.strerror}") from None
        except (TopologyError, json.JSONDecodeError) as exc:
            raise ConfigError(f"topology: {exc}") from None

    def scene_config(self) -> SceneConfig:
        """The synthetic scene settings, with ``seed`` applied when set."""
        if self.synth is None:
            raise ConfigError("no 'synth' section in the config")
        if self.seed is None:
            return self.synth
        return dataclasses.replace(self.synth, seed=self.seed)


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _check_type(section: str, key: str, value, expected) -> Any:
    """Coerce a JSON value to a dataclass field type, rejecting mismatches."""
    where = f"{section}.{key}" if section else key
    optional = False
    if isinstance(expected, str):
        optional = "None" in expected
        expected = expected.replace("| None", "").strip()
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{where}: null is not allowed")
    if expected == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if expected == "float":
        if not _is_number(value) or not math.isfinite(value):
            raise ConfigError(f"{where}: expected a finite number")
        return float(value)
    if expected == "tuple[str, ...]":
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise ConfigError(f"{where}: expected a list of strings")
        return tuple(value)
    raise ConfigError(f"{where}: unsupported field type {expected}")


def _section(cls, data, name: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{name}: expected an object")
    fields = {f.name: f.type for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{name}: unknown key {unknown[0]!r}")
    kwargs = {k: _check_type(name, k, v, fields[k]) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{name}: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from None


_TOP_KEYS = {
    "scene", "synth", "out_dir", "topology", "seed", "threads", "frames",
    "pcp_variant", "triangulation", "proposal", "refine",
}


def parse_frames(spec: str) -> tuple[int, int | None]:
    """Parse ``a..b`` (half-open), ``a..`` or ``..b`` into a frame range."""
    if not isinstance(spec, str) or spec.count("..") != 1:
        raise ConfigError(f"frames: expected 'a..b', got {spec!r}")
    lo, hi = spec.split("..")
    try:
        start = int(lo) if lo else 0
        stop = int(hi) if hi else None
    except ValueError:
        raise ConfigError(f"frames: expected integers in {spec!r}") from None
    return _check_range(start, stop)


def _check_range(start: int, stop: int | None) -> tuple[int, int | None]:
    if start < 0 or (stop is not None and stop < start):
        raise ConfigError(f"frames: invalid range {start}..{stop if stop is not None else ''}")
    return start, stop


def config_from_dict(data: dict, base: Path = Path(".")) -> PipelineConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(data) - _TOP_KEYS)
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r}")

    def path_of(key):
        v = data[key]
        if not isinstance(v, str) or not v:
            raise ConfigError(f"{key}: expected a non-empty path string")
        p = Path(v)
        return p if p.is_absolute() else base / p

    kw: dict[str, Any] = {}
    if "scene" in data and data["scene"] is not None:
        kw["scene"] = path_of("scene")
    if "synth" in data and data["synth"] is not None:
        kw["synth"] = _section(SceneConfig, data["synth"], "synth")
    if "out_dir" in data:
        kw["out_dir"] = path_of("out_dir")
    else:
        kw["out_dir"] = base / "out"
    if "topology" in data:
        t = data["topology"]
        if t == "default":
            kw["topology"] = "default"
        else:
            kw["topology"] = str(path_of("topology"))
    if "seed" in data:
        kw["seed"] = _check_type("", "seed", data["seed"], "int | None")
    if "threads" in data:
        threads = _check_type("", "threads", data["threads"], "int")
        if threads < 1:
            raise ConfigError("threads: must be >= 1")
        kw["threads"] = threads
    if "frames" in data and data["frames"] is not None:
        fr = data["frames"]
        if isinstance(fr, str):
            kw["frames"] = parse_frames(fr)
        elif isinstance(fr, list) and len(fr) == 2:
            start = _check_type("", "frames[0]", fr[0], "int")
            stop = _check_type("", "frames[1]", fr[1], "int | None")
            kw["frames"] = _check_range(start, stop)
        else:
            raise ConfigError("frames: expected [start, stop] or 'a..b'")
    if "pcp_variant" in data:
        if data["pcp_variant"] not in PCP_VARIANTS:
            raise ConfigError(f"pcp_variant: expected one of {PCP_VARIANTS}")
        kw["pcp_variant"] = data["pcp_variant"]
    if "triangulation" in data:
        tri = data["triangulation"]
        if not isinstance(tri, dict):
            raise ConfigError("triangulation: expected an object")
        extra = sorted(set(tri) - {"max_pair_residual"})
        if extra:
            raise ConfigError(f"triangulation: unknown key {extra[0]!r}")
        if "max_pair_residual" in tri:
            r = _check_type("triangulation", "max_pair_residual", tri["max_pair_residual"], "float | None")
            if r is not None and r <= 0:
                raise ConfigError("triangulation.max_pair_residual: must be positive or null")
            kw["max_pair_residual"] = r
    if "proposal" in data:
        kw["proposal"] = _section(ProposalConfig, data["proposal"], "proposal")
    if "refine" in data:
        kw["refine"] = _section(RefineConfig, data["refine"], "refine")
    if "scene" not in kw and "synth" not in kw:
        raise ConfigError("config needs a 'scene' path or a 'synth' section")
    return PipelineConfig(**kw)


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except UnicodeDecodeError:
        raise ConfigError(f"config {path} is not UTF-8 text") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path}, line {exc.lineno}: {exc.msg}") from None
    return config_from_dict(data, path.parent)
