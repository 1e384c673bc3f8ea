"""Hyperparameters, dataset presets and the key=value (INI) config file format.

Every tunable of the tracker, mapper and pipeline is a key here. Presets carry
the published per-dataset values; ``synthetic`` is tuned for the bundled
low-resolution synthetic rooms.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

from .core import CameraIntrinsics, ConfigurationError
from .losses import MappingWeights, TrackingWeights

OVERLAP_STRATEGIES = ("overlap", "nearest", "largest", "multiple")


@dataclass
class TrackerConfig:
    weights: TrackingWeights = field(default_factory=TrackingWeights)
    iterations: int = 40
    pretrack_iterations: int = 10
    candidate_interval: int = 5
    overlap_threshold: float = 0.26
    max_candidate_sections: int = 3
    lr_rot: float = 0.0004
    lr_trans: float = 0.002
    coverage_threshold: float = 0.99
    use_visibility: bool = True
    soft_mask: bool = False
    overlap_strategy: str = "overlap"

    def __post_init__(self):
        if self.iterations < 1 or self.candidate_interval < 1:
            raise ConfigurationError("iterations and candidate_interval must be >= 1")
        if not 0 <= self.overlap_threshold <= 1:
            raise ConfigurationError("overlap_threshold must lie in [0, 1]")
        if self.overlap_strategy not in OVERLAP_STRATEGIES:
            raise ConfigurationError(f"overlap_strategy must be one of {OVERLAP_STRATEGIES}")


@dataclass
class MapperConfig:
    weights: MappingWeights = field(default_factory=MappingWeights)
    head_iterations: int = 60
    regular_iterations: int = 15
    densify_threshold: float = 0.5
    section_length: int = 40
    ba_enabled: bool = True
    lr_color: float = 0.0025
    lr_radius: float = 0.005
    lr_opacity: float = 0.05
    lr_rot: float = 0.0004
    lr_trans: float = 0.002
    initial_opacity: float = 0.5
    per_channel_ssim: bool = False
    reselect_overlap: bool = False
    radius_space: str = "log"
    head_context: bool = True

    def __post_init__(self):
        if not 0 < self.densify_threshold < 1:
            raise ConfigurationError("densify_threshold must lie in (0, 1)")
        if self.section_length < 1:
            raise ConfigurationError("section_length must be >= 1")
        if self.radius_space not in ("log", "linear"):
            raise ConfigurationError("radius_space must be 'log' or 'linear'")

    def lrs(self) -> dict[str, float]:
        return {
            "color": self.lr_color,
            "radius": self.lr_radius,
            "opacity": self.lr_opacity,
            "rot": self.lr_rot,
            "trans": self.lr_trans,
        }


@dataclass
class SlamConfig:
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    mapper: MapperConfig = field(default_factory=MapperConfig)
    resident_sections: int = 4
    seed: int = 0
    eval_every: int = 5
    preset: str = "replica"

    @property
    def section_length(self) -> int:
        return self.mapper.section_length


def _preset(alpha, beta, lr_rot, lr_trans, n, gamma, **extra) -> SlamConfig:
    tracker = TrackerConfig(weights=TrackingWeights(alpha, beta), lr_rot=lr_rot, lr_trans=lr_trans,
                            overlap_threshold=gamma)
    mapper_kw = {k: v for k, v in extra.items() if k in {f.name for f in dataclasses.fields(MapperConfig)}}
    tracker_kw = {k[len("tracker_"):]: v for k, v in extra.items() if k.startswith("tracker_")}
    for k, v in tracker_kw.items():
        setattr(tracker, k, v)
    mapper = MapperConfig(section_length=n, lr_rot=lr_rot, lr_trans=lr_trans, **mapper_kw)
    return SlamConfig(tracker=tracker, mapper=mapper)


def preset(name: str) -> SlamConfig:
    """Published per-dataset settings; ``synthetic`` is the desk-scale default."""
    if name == "replica":
        cfg = _preset(0.5, 0.025, 0.0004, 0.002, 40, 0.26)
    elif name == "tum":
        cfg = _preset(0.5, 1.0, 0.002, 0.002, 30, 0.26)
    elif name == "scannet":
        cfg = _preset(0.5, 0.9, 0.002, 0.002, 30, 0.24)
    elif name == "scannetpp":
        cfg = _preset(0.5, 1.0, 0.001, 0.01, 100, 0.24)
    elif name == "synthetic":
        # desk-scale room: frozen context at head frames starves the new section of opacity
        cfg = _preset(0.5, 0.025, 0.0004, 0.002, 40, 0.26, head_context=False)
    else:
        raise ConfigurationError(f"unknown preset {name!r}")
    cfg.preset = name
    return cfg


# ---------------------------------------------------------------------------
# INI round trip

_WEIGHT_KEYS = {
    "tracking": ("alpha", "beta"),
    "mapping": ("rho", "tau", "sigma"),
}


def _coerce(text: str, like):
    if isinstance(like, bool):
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"not a boolean: {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    return text.strip()


def _fill(obj, section: configparser.SectionProxy, weights_attr: str, weight_keys) -> None:
    known = {f.name for f in dataclasses.fields(obj)} - {"weights"}
    weights = getattr(obj, weights_attr)
    wvals = {k: getattr(weights, k) for k in weight_keys}
    for key, text in section.items():
        if key in weight_keys:
            wvals[key] = float(text)
        elif key in known:
            setattr(obj, key, _coerce(text, getattr(obj, key)))
        else:
            raise ConfigurationError(f"unknown key [{section.name}] {key}")
    setattr(obj, weights_attr, type(weights)(**wvals))
    obj.__post_init__()


@dataclass
class DatasetConfig:
    layout: str = "tum"
    depth_scale: Optional[float] = None
    fx: Optional[float] = None
    fy: Optional[float] = None
    cx: Optional[float] = None
    cy: Optional[float] = None
    width: Optional[int] = None
    height: Optional[int] = None
    max_frames: Optional[int] = None

    def intrinsics(self) -> Optional[CameraIntrinsics]:
        vals = (self.fx, self.fy, self.cx, self.cy, self.width, self.height)
        if any(v is None for v in vals):
            return None
        return CameraIntrinsics(*vals, depth_scale=self.depth_scale or 5000.0)


def load_config(path: Optional[Union[str, Path]] = None, preset_name: Optional[str] = None):
    """Read a config file on top of a preset; returns ``(SlamConfig, DatasetConfig)``."""
    parser = configparser.ConfigParser()
    if path is not None:
        if not Path(path).exists():
            raise ConfigurationError(f"config file not found: {path}")
        parser.read(path)
    name = preset_name or parser.get("slam", "preset", fallback="synthetic")
    cfg = preset(name)
    ds = DatasetConfig()
    for sec in parser.sections():
        if sec == "slam":
            for key, text in parser[sec].items():
                if key == "preset":
                    continue
                if key == "section_length":
                    cfg.mapper.section_length = int(text)
                elif key in ("resident_sections", "seed", "eval_every"):
                    setattr(cfg, key, int(text))
                else:
                    raise ConfigurationError(f"unknown key [slam] {key}")
        elif sec == "tracking":
            _fill(cfg.tracker, parser[sec], "weights", _WEIGHT_KEYS["tracking"])
        elif sec == "mapping":
            _fill(cfg.mapper, parser[sec], "weights", _WEIGHT_KEYS["mapping"])
        elif sec == "dataset":
            for key, text in parser[sec].items():
                if key == "layout":
                    ds.layout = text.strip()
                elif key in ("width", "height", "max_frames"):
                    setattr(ds, key, int(text))
                elif key in ("depth_scale", "fx", "fy", "cx", "cy"):
                    setattr(ds, key, float(text))
                else:
                    raise ConfigurationError(f"unknown key [dataset] {key}")
        else:
            raise ConfigurationError(f"unknown config section [{sec}]")
    return cfg, ds


def config_items(cfg: SlamConfig) -> list[tuple[str, str]]:
    """Flattened ``section.key`` / value pairs of a resolved config, in a fixed order."""
    items = [
        ("slam.preset", cfg.preset),
        ("slam.section_length", str(cfg.section_length)),
        ("slam.resident_sections", str(cfg.resident_sections)),
        ("slam.seed", str(cfg.seed)),
        ("slam.eval_every", str(cfg.eval_every)),
    ]
    for prefix, obj, wkeys in (("tracking", cfg.tracker, _WEIGHT_KEYS["tracking"]),
                               ("mapping", cfg.mapper, _WEIGHT_KEYS["mapping"])):
        for k in wkeys:
            items.append((f"{prefix}.{k}", repr(getattr(obj.weights, k))))
        for f in dataclasses.fields(obj):
            if f.name in ("weights", "section_length"):
                continue
            items.append((f"{prefix}.{f.name}", repr(getattr(obj, f.name)).strip("'")))
    return items


def write_config(cfg: SlamConfig, path: Union[str, Path], dataset: Optional[DatasetConfig] = None) -> None:
    parser = configparser.ConfigParser()
    parser["slam"] = {}
    for key, value in config_items(cfg):
        sec, k = key.split(".", 1)
        parser.setdefault(sec, {})
        parser[sec][k] = value
    if dataset is not None:
        parser["dataset"] = {
            k: str(v) for k, v in dataclasses.asdict(dataset).items() if v is not None
        }
    with open(path, "w") as fh:
        parser.write(fh)
