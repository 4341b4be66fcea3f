"""Run configuration and its flat ``section.key = value [unit]`` text format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import get_type_hints

from .encoder import EncoderConfig
from .scenes import SceneConfig
from .spatial import ClusteringParams


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 2000
    batch_size: int = 4
    seed: int = 0
    data_seed: int = 0
    bank_mode: str = "vmf"
    normalize_prototypes: bool = False
    center_momentum: float = 0.9
    queue_capacity: int = 2500
    queue_warm_fraction: float = 0.1
    min_scale: float = 0.25
    max_scale: float = 1.0
    flip_prob: float = 0.5
    sparse_fill: float = 0.05
    sparse_pattern: str = "scanline"
    completion_radius: int = 2
    max_depth: float = 100.0
    lr: float = 1e-3
    min_lr: float = 1e-5
    temp_warmup_steps: int = 300
    momentum_start: float = 0.996
    checkpoint_every: int = 0
    scenes_per_epoch: int = 200
    output_dir: str = "runs/default"

    def __post_init__(self):
        if self.bank_mode not in ("uniform", "vmf"):
            raise ConfigError(f"bank_mode must be 'uniform' or 'vmf', got {self.bank_mode!r}")
        if self.bank_mode == "vmf" and self.normalize_prototypes:
            raise ConfigError("vmf mode needs unnormalized prototypes (normalize_prototypes = false)")
        if self.total_steps < 1 or self.batch_size < 1:
            raise ConfigError("total_steps and batch_size must be positive")
        if self.sparse_pattern not in ("uniform", "scanline"):
            raise ConfigError(f"unknown sparse_pattern {self.sparse_pattern!r}")


@dataclass(frozen=True)
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    clustering: ClusteringParams = field(default_factory=ClusteringParams)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.encoder.input_channels != self.scene.channels:
            raise ConfigError("encoder.input_channels must equal scene.channels")
        if self.clustering.num_clusters > 2 * self.encoder.num_tokens:
            raise ConfigError("clustering.num_clusters exceeds the joint token count")
        if self.train.max_depth < self.scene.depth_range[1]:
            raise ConfigError("train.max_depth must cover the scene depth range")

    @classmethod
    def desk(cls, **train_overrides) -> "RunConfig":
        scene = SceneConfig()
        near, far = scene.depth_range
        return cls(
            scene=scene,
            encoder=EncoderConfig(input_channels=scene.channels),
            clustering=ClusteringParams(depth_scale=far - near),
            train=TrainConfig(**train_overrides),
        )

    def with_updates(self, **dotted) -> "RunConfig":
        """Copy with ``section__key=value`` or ``{"section.key": value}`` overrides."""
        parts = {s: {} for s in SECTIONS}
        for key, value in dotted.items():
            section, _, name = key.replace("__", ".").partition(".")
            if section not in SECTIONS:
                raise ConfigError(f"unknown config section {section!r}")
            parts[section][name] = value
        try:
            return replace(self, **{s: replace(getattr(self, s), **kv) for s, kv in parts.items() if kv})
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


SECTIONS = ("scene", "encoder", "clustering", "train")

UNITS = {
    "scene.image_size": "px",
    "scene.depth_range": "m",
    "encoder.view_size": "px",
    "encoder.patch_size": "px",
    "clustering.depth_scale": "m",
    "train.max_depth": "m",
    "train.completion_radius": "px",
    "train.total_steps": "steps",
    "train.temp_warmup_steps": "steps",
    "train.checkpoint_every": "steps",
}


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _parse(text: str, hint, key: str):
    text = text.strip()
    origin = getattr(hint, "__origin__", None)
    args = getattr(hint, "__args__", ())
    if text.lower() == "none" and type(None) in args:
        return None
    if origin is tuple or (args and any(getattr(a, "__origin__", None) is tuple for a in args)):
        tup = next((a for a in args if getattr(a, "__origin__", None) is tuple), hint)
        elem = tup.__args__[0]
        return tuple(elem(v.strip()) for v in text.split(",") if v.strip())
    if hint is bool:
        if text.lower() not in ("true", "false"):
            raise ConfigError(f"{key}: expected true/false, got {text!r}")
        return text.lower() == "true"
    if hint in (int, float, str):
        try:
            return hint(text)
        except ValueError as exc:
            raise ConfigError(f"{key}: cannot parse {text!r} as {hint.__name__}") from exc
    raise ConfigError(f"{key}: unsupported field type {hint}")


def to_text(cfg: RunConfig) -> str:
    lines = []
    for section in SECTIONS:
        sub = getattr(cfg, section)
        lines.append(f"# {section}")
        for f in fields(sub):
            key = f"{section}.{f.name}"
            unit = UNITS.get(key)
            lines.append(f"{key} = {_format(getattr(sub, f.name))}" + (f" {unit}" if unit else ""))
    return "\n".join(lines) + "\n"


def from_text(text: str, base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig.desk()
    updates = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        section, _, name = key.partition(".")
        if section not in SECTIONS:
            raise ConfigError(f"line {lineno}: unknown section in {key!r}")
        sub_cls = type(getattr(base, section))
        hints = get_type_hints(sub_cls)
        if name not in hints:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        unit = UNITS.get(key)
        if unit:
            if not value.endswith(unit):
                raise ConfigError(f"line {lineno}: {key} needs unit {unit!r}")
            value = value[: -len(unit)]
        updates[key] = _parse(value, hints[name], key)
    return base.with_updates(**updates)


def load_config(path) -> RunConfig:
    return from_text(Path(path).read_text())


def save_config(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(to_text(cfg))
    return path


def as_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)
