"""Pipeline configuration: nested dataclasses, named profiles, JSON loading with
dotted-key overrides, and consistency validation."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Any, Sequence


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    dims: tuple[int, int, int] = (48, 48, 48)
    frames: int = 60
    radius: float = 18.0
    n_sources: int = 2
    noise: float = 0.5
    burst_amplitude: float = 4.0
    n_bursts: int = 1
    n_classes: int = 2
    n_volumes: int = 8


@dataclass
class GlobalConfig:
    patch: int = 8
    window: int = 5
    mask_ratio: float = 0.75
    width: int = 64
    depth: int = 4
    heads: int = 4
    clip_frames: int | None = None
    batch_size: int = 1
    lr: float = 1e-3
    weight_decay: float = 0.05
    steps: int = 300


@dataclass
class SelectorConfig:
    k: int = 4
    strategy: str = "topk"


@dataclass
class StageConfig:
    depth: int = 1
    width: int = 32
    heads: int = 2
    local: bool = True


def _desk_stages():
    return [StageConfig(1, 32, 2, True), StageConfig(1, 64, 4, True), StageConfig(1, 128, 4, False)]


@dataclass
class HieraConfig:
    unit: int = 12
    merge: int = 3
    frames_per_token: int = 2
    stages: list[StageConfig] = field(default_factory=_desk_stages)
    predictor_depth: int = 2
    predictor_heads: int = 4
    context_ratio: float = 0.4
    target_ratio: float = 0.3
    ema: float = 0.996
    lr: float = 1e-3
    weight_decay: float = 0.05
    steps: int = 300


@dataclass
class ProbeConfig:
    task: str = "classification"
    hidden: int | None = None
    lr: float = 1e-2
    weight_decay: float = 0.0
    steps: int = 300
    finetune_steps: int = 20
    finetune_lr: float = 1e-4
    train_fraction: float = 0.5


@dataclass
class PipelineConfig:
    profile: str = "desk"
    seed: int = 0
    log_wall_time: bool = False
    data: DataConfig = field(default_factory=DataConfig)
    global_: GlobalConfig = field(default_factory=GlobalConfig)
    selector: SelectorConfig = field(default_factory=SelectorConfig)
    hiera: HieraConfig = field(default_factory=HieraConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    @property
    def n_windows(self) -> int:
        return -(-self.data.frames // self.global_.window)

    @property
    def clip_frames(self) -> int:
        return self.selector.k * self.global_.window

    def to_dict(self) -> dict:
        return to_dict(self)

    def hash(self) -> str:
        return config_hash(self)


# JSON key -> dataclass field where they differ
_ALIASES = {"global": "global_"}
_REVERSE = {v: k for k, v in _ALIASES.items()}


def to_dict(cfg) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        key = _REVERSE.get(f.name, f.name)
        if dataclasses.is_dataclass(value):
            out[key] = to_dict(value)
        elif isinstance(value, list) and value and dataclasses.is_dataclass(value[0]):
            out[key] = [to_dict(v) for v in value]
        elif isinstance(value, tuple):
            out[key] = list(value)
        else:
            out[key] = value
    return out


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected an object, got {type(data).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        name = _ALIASES.get(key, key)
        here = f"{path}.{key}" if path else key
        if name not in names:
            raise ConfigError(f"unknown config key {here!r}")
        default = getattr(cls(), name)
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, here)
        elif name == "stages":
            if not isinstance(value, list):
                raise ConfigError(f"{here}: expected a list of stages")
            kwargs[name] = [_build(StageConfig, v, f"{here}.{i}") for i, v in enumerate(value)]
        elif isinstance(default, tuple):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def from_dict(data: dict) -> PipelineConfig:
    return _build(PipelineConfig, data, "")


def _deep_merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def desk_profile() -> PipelineConfig:
    return PipelineConfig()


def paper_full_profile() -> PipelineConfig:
    """Full-scale geometry and schedule values; encoder widths are not published."""
    return from_dict(
        {
            "profile": "paper-full",
            "data": {"dims": [96, 96, 96], "frames": 200, "radius": 40.0},
            "global": {"patch": 8, "window": 5, "mask_ratio": 0.75, "lr": 1e-3},
            "selector": {"k": 8},
            "hiera": {
                "unit": 24,
                "merge": 6,
                "frames_per_token": 2,
                "lr": 1e-3,
                "stages": [
                    {"depth": 2, "width": 96, "heads": 2, "local": True},
                    {"depth": 4, "width": 192, "heads": 4, "local": True},
                    {"depth": 2, "width": 384, "heads": 8, "local": False},
                ],
            },
        }
    )


def tiny_profile() -> PipelineConfig:
    """Small geometry for fast tests and examples."""
    return from_dict(
        {
            "profile": "tiny",
            "data": {"dims": [24, 24, 24], "frames": 40, "radius": 10.0, "n_volumes": 8, "noise": 0.5},
            "global": {"patch": 4, "window": 5, "width": 32, "depth": 2, "heads": 2, "steps": 100},
            "selector": {"k": 2},
            "hiera": {
                "unit": 8,
                "merge": 2,
                "frames_per_token": 2,
                "steps": 60,
                "predictor_depth": 1,
                "predictor_heads": 2,
                "stages": [
                    {"depth": 1, "width": 16, "heads": 2, "local": True},
                    {"depth": 1, "width": 32, "heads": 2, "local": True},
                    {"depth": 1, "width": 32, "heads": 2, "local": False},
                ],
            },
            "probe": {"steps": 200},
        }
    )


PROFILES = {"desk": desk_profile, "paper-full": paper_full_profile, "tiny": tiny_profile}


def profile(name: str) -> PipelineConfig:
    try:
        return PROFILES[name]()
    except KeyError:
        raise ConfigError(f"unknown profile {name!r}; known: {sorted(PROFILES)}") from None


def parse_override(text: str) -> tuple[list[str], Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(data: dict, overrides: Sequence[str]) -> dict:
    data = copy.deepcopy(data)
    for text in overrides:
        keys, value = parse_override(text)
        node = data
        for i, k in enumerate(keys[:-1]):
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {text!r}: {'.'.join(keys[: i + 1])} is not an object")
        node[keys[-1]] = value
    return data


def load_config(source: str | os.PathLike | dict | None = None, overrides: Sequence[str] = ()) -> PipelineConfig:
    """Load a config from a JSON file, a profile name or a dict.

    A ``"profile"`` key selects the defaults the file's values are merged onto.
    Overrides (``section.key=value``, value parsed as JSON when possible) are
    applied after the file.
    """
    if source is None:
        data: dict = {}
    elif isinstance(source, dict):
        data = copy.deepcopy(source)
    elif str(source) in PROFILES and not os.path.exists(source):
        data = {"profile": str(source)}
    else:
        try:
            with open(source) as fh:
                data = json.load(fh)
        except json.JSONDecodeError as err:
            raise ConfigError(f"{source}: invalid JSON ({err})") from None
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    data = apply_overrides(data, overrides)
    base = to_dict(profile(data.get("profile", "desk")))
    if "hiera" in data and "stages" in data["hiera"]:
        base["hiera"].pop("stages")
    cfg = from_dict(_deep_merge(base, data))
    validate(cfg)
    return cfg


def validate(cfg: PipelineConfig) -> PipelineConfig:
    d, g, s, h = cfg.data, cfg.global_, cfg.selector, cfg.hiera

    def need(cond: bool, invariant: str):
        if not cond:
            raise ConfigError(f"invalid config: {invariant}")

    need(len(d.dims) == 3 and all(int(x) > 0 for x in d.dims), "data.dims must be three positive integers")
    need(d.frames >= 2, "data.frames >= 2")
    need(d.radius > 0, "data.radius > 0")
    need(all(x % g.patch == 0 for x in d.dims), f"global.patch ({g.patch}) must divide data.dims {list(d.dims)}")
    need(g.window >= 1, "global.window >= 1")
    need(0.0 < g.mask_ratio < 1.0, "0 < global.mask_ratio < 1")
    need(g.width % g.heads == 0 and g.width % 2 == 0, "global.width divisible by global.heads and even")
    need(g.batch_size >= 1, "global.batch_size >= 1")
    need(cfg.n_windows >= 2, "at least two temporal windows (ceil(frames / window) >= 2)")
    need(1 <= s.k <= cfg.n_windows, f"selector.k ({s.k}) must lie in [1, ceil(T/p) = {cfg.n_windows}]")
    need(s.k * g.window <= d.frames, f"selector.k * global.window ({s.k * g.window}) must not exceed data.frames ({d.frames})")
    need(s.strategy in ("topk", "variance", "uniform", "random"), f"unknown selector.strategy {s.strategy!r}")
    need(h.unit % h.merge == 0, f"hiera.merge ({h.merge}) must divide hiera.unit ({h.unit})")
    need(all(x % h.unit == 0 for x in d.dims), f"hiera.unit ({h.unit}) must divide data.dims {list(d.dims)}")
    need(h.frames_per_token >= 1, "hiera.frames_per_token >= 1")
    need(len(h.stages) >= 1, "at least one encoder stage")
    side = h.unit // h.merge
    need(side % (2 ** (len(h.stages) - 1)) == 0, f"tokens per unit edge ({side}) must allow {len(h.stages) - 1} 2x poolings")
    for i, st in enumerate(h.stages):
        need(st.width % 8 == 0 and st.width % st.heads == 0, f"hiera.stages.{i}.width multiple of 8 and of heads")
    need(h.stages[-1].width % h.predictor_heads == 0, "predictor heads divide the final width")
    need(0.0 < h.context_ratio < 1.0, "0 < hiera.context_ratio < 1")
    need(0.0 < h.target_ratio < 1.0, "0 < hiera.target_ratio < 1")
    need(0.0 <= h.ema <= 1.0, "0 <= hiera.ema <= 1")
    need(cfg.probe.task in ("classification", "regression"), "probe.task is classification or regression")
    need(0.0 < cfg.probe.train_fraction < 1.0, "0 < probe.train_fraction < 1")
    return cfg


_SCHEDULE_KEYS = {"steps", "finetune_steps"}


def config_hash(cfg: PipelineConfig) -> str:
    """SHA-256 over the canonical JSON config, ignoring schedule lengths so a
    run can be resumed with a longer schedule."""

    def strip(node):
        if isinstance(node, dict):
            return {k: strip(v) for k, v in node.items() if k not in _SCHEDULE_KEYS}
        if isinstance(node, list):
            return [strip(v) for v in node]
        return node

    text = json.dumps(strip(to_dict(cfg)), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()
