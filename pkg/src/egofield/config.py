"""Pipeline configuration: one INI file, validated up front.

Sections and keys (all optional, defaults in brackets)::

    [pipeline]     seed [0], scene [bundled default], queries [all scene categories],
                   segment_threshold [0.5], heat_maps [true], ablation [true]
    [perception]   embedding_dim [16], n_canonical [4], feature_noise [0.05],
                   occlusion_strength [1.0], id_switch_prob [0.0], candidate_shift [1],
                   candidate_copies [3], min_predicted_iou [0.8], min_stability [0.8],
                   overlap_threshold [0.7]
    [aggregation]  k [3.0], rule [component], weight [0.5]
    [transient]    lambda2 [0.2], threshold [0.05 or a preset name], grid_factor [4],
                   iterations [1500], latent_init [-3.0], latent_lr [0.5], distance [l2]
    [train]        any TrainConfig field, plus points_per_object [150],
                   background_fraction [0.1], init_opacity [0.1], continue_from_init [false]

Relative paths resolve against the config file's directory.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

from egofield.perception import CorruptionConfig
from egofield.trainer import TrainConfig
from egofield.transient import DISTANCES, THRESHOLD_PRESETS, InitConfig


class ConfigError(ValueError):
    pass


def bundled(name: str) -> Path:
    return Path(str(resources.files("egofield") / "data" / name))


@dataclass
class AggregationParams:
    k: float = 3.0
    rule: str = "component"
    weight: float = 0.5


@dataclass
class PipelineConfig:
    scene_path: Path = field(default_factory=lambda: bundled("default_scene.ini"))
    seed: int = 0
    queries: Optional[list[str]] = None
    segment_threshold: float = 0.5
    heat_maps: bool = True
    ablation: bool = True
    embedding_dim: int = 16
    n_canonical: int = 4
    corruption: CorruptionConfig = field(default_factory=CorruptionConfig)
    aggregation: AggregationParams = field(default_factory=AggregationParams)
    transient: InitConfig = field(default_factory=InitConfig)
    transient_threshold: float = THRESHOLD_PRESETS["synthetic"]
    train: TrainConfig = field(default_factory=TrainConfig)
    points_per_object: int = 150
    background_fraction: float = 0.1
    init_opacity: float = 0.1
    continue_from_init: bool = False

    def validate(self) -> None:
        if not self.scene_path.is_file():
            raise ConfigError(f"scene file not found: {self.scene_path}")
        if self.aggregation.k <= 0:
            raise ConfigError("aggregation.k must be > 0")
        if self.aggregation.rule not in ("component", "norm"):
            raise ConfigError(f"aggregation.rule must be component or norm, got {self.aggregation.rule!r}")
        if not 0.0 <= self.aggregation.weight <= 1.0:
            raise ConfigError("aggregation.weight must lie in [0, 1]")
        if not 0.0 < self.transient_threshold < 1.0:
            raise ConfigError("transient.threshold must lie in (0, 1)")
        if self.transient.lambda2 < 0:
            raise ConfigError("transient.lambda2 must be >= 0")
        if self.transient.iterations <= 0:
            raise ConfigError("transient.iterations must be > 0")
        if self.transient.grid_factor < 1:
            raise ConfigError("transient.grid_factor must be >= 1")
        if self.transient.distance not in DISTANCES:
            raise ConfigError(f"transient.distance must be one of {DISTANCES}")
        if not 0.0 < self.segment_threshold < 1.0:
            raise ConfigError("pipeline.segment_threshold must lie in (0, 1)")
        if self.points_per_object <= 0:
            raise ConfigError("train.points_per_object must be > 0")
        if not 0.0 < self.init_opacity < 1.0:
            raise ConfigError("train.init_opacity must lie in (0, 1)")

    def with_seed(self, seed: int) -> "PipelineConfig":
        return dataclasses.replace(
            self, seed=seed,
            transient=dataclasses.replace(self.transient, seed=seed),
            train=dataclasses.replace(self.train, seed=seed),
        )


def _coerce(value: str, kind: type, key: str):
    try:
        if kind is bool:
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if kind is int:
            return int(value)
        if kind is float:
            return float(value)
        return value.strip()
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None


def _fill(obj, section: configparser.SectionProxy, prefix: str, skip=()):
    """Dataclass copy with fields overridden from matching keys."""
    updates = {}
    for f in dataclasses.fields(obj):
        if f.name in skip or f.name not in section:
            continue
        current = getattr(obj, f.name)
        kind = type(current) if current is not None else int
        updates[f.name] = _coerce(section[f.name], kind, f"{prefix}.{f.name}")
    try:
        return dataclasses.replace(obj, **updates)
    except ValueError as exc:
        raise ConfigError(f"[{prefix}] {exc}") from None


_KNOWN = {
    "pipeline": {"seed", "scene", "queries", "segment_threshold", "heat_maps", "ablation"},
    "perception": {"embedding_dim", "n_canonical"} | {f.name for f in dataclasses.fields(CorruptionConfig)},
    "aggregation": {"k", "rule", "weight"},
    "transient": {"lambda2", "threshold", "grid_factor", "iterations", "latent_init", "latent_lr", "distance"},
    "train": {f.name for f in dataclasses.fields(TrainConfig)} - {"seed"}
    | {"points_per_object", "background_fraction", "init_opacity", "continue_from_init"},
}


def load_config(path: Optional[str | Path] = None, seed: Optional[int] = None) -> PipelineConfig:
    """Read and validate a config; ``None`` loads the bundled default."""
    path = Path(path) if path is not None else bundled("default.ini")
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config {path}: {exc}".replace("\n", " ")) from None
    for name in parser.sections():
        if name not in _KNOWN:
            raise ConfigError(f"unknown config section [{name}]")
        unknown = set(parser[name]) - _KNOWN[name]
        if unknown:
            raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(unknown))}")
    for name in _KNOWN:
        if not parser.has_section(name):
            parser.add_section(name)
    base = path.parent
    pl, pe, ag, tsec, trsec = (parser[s] for s in ("pipeline", "perception", "aggregation", "transient", "train"))

    cfg = PipelineConfig()
    if "scene" in pl and pl["scene"].strip():
        scene = Path(pl["scene"].strip())
        cfg.scene_path = scene if scene.is_absolute() else base / scene
    cfg.seed = _coerce(pl.get("seed", "0"), int, "pipeline.seed")
    if "queries" in pl and pl["queries"].strip():
        cfg.queries = [q.strip() for q in pl["queries"].split(",") if q.strip()]
    cfg.segment_threshold = _coerce(pl.get("segment_threshold", "0.5"), float, "pipeline.segment_threshold")
    cfg.heat_maps = _coerce(pl.get("heat_maps", "true"), bool, "pipeline.heat_maps")
    cfg.ablation = _coerce(pl.get("ablation", "true"), bool, "pipeline.ablation")

    cfg.embedding_dim = _coerce(pe.get("embedding_dim", "16"), int, "perception.embedding_dim")
    cfg.n_canonical = _coerce(pe.get("n_canonical", "4"), int, "perception.n_canonical")
    try:
        cfg.corruption = _fill(CorruptionConfig(), pe, "perception")
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    cfg.aggregation = _fill(AggregationParams(), ag, "aggregation")

    cfg.transient = _fill(InitConfig(), tsec, "transient", skip=("seed",))
    if "threshold" in tsec:
        raw = tsec["threshold"].strip()
        cfg.transient_threshold = THRESHOLD_PRESETS[raw] if raw in THRESHOLD_PRESETS else _coerce(raw, float, "transient.threshold")

    cfg.train = _fill(TrainConfig(), trsec, "train", skip=("seed", "densify_until"))
    if "densify_until" in trsec:
        cfg.train = dataclasses.replace(cfg.train, densify_until=_coerce(trsec["densify_until"], int, "train.densify_until"))
    cfg.points_per_object = _coerce(trsec.get("points_per_object", "150"), int, "train.points_per_object")
    cfg.background_fraction = _coerce(trsec.get("background_fraction", "0.1"), float, "train.background_fraction")
    cfg.init_opacity = _coerce(trsec.get("init_opacity", "0.1"), float, "train.init_opacity")
    cfg.continue_from_init = _coerce(trsec.get("continue_from_init", "false"), bool, "train.continue_from_init")

    cfg = cfg.with_seed(cfg.seed if seed is None else seed)
    cfg.validate()
    return cfg
