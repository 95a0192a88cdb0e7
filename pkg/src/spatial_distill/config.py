"""Run configuration: dataset, model, loss, train and eval sections.

Every field has a default. Loading from YAML rejects unknown keys so a typo
in a run file fails loudly instead of silently training the wrong thing.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

ALL_LOSSES = (
    "text",
    "depth_reg",
    "depth_ce",
    "depth_kl",
    "detection",
    "spatial",
    "multiview",
    "feature",
)

# Named groups accepted by ``--disable-loss`` in addition to single terms.
LOSS_GROUPS = {
    "depth": ("depth_reg", "depth_ce", "depth_kl"),
}

DEFAULT_CATALOG = ("table", "chair", "cabinet", "box", "window", "bed", "lamp", "sofa")


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    room_size: tuple[float, float, float] = (6.0, 6.0, 3.0)
    min_objects: int = 3
    max_objects: int = 5
    catalog: tuple[str, ...] = DEFAULT_CATALOG
    n_scenes: int = 300
    n_views: int = 3
    grid: int = 16
    proximity_threshold: float = 1.0
    contact_eps: float = 0.02
    overlap_tol: float = 1e-6
    orientation_margin_deg: float = 10.0
    adjacency_prob: float = 0.7
    # gap range for adjacent but separated objects; longer than one render
    # cell so an empty cell always shows between them
    separation_gap: tuple[float, float] = (0.4, 0.8)
    questions_per_relation: int = 4
    max_attempts: int = 200
    label_smoothing: float = 0.1
    depth_bins: int = 8
    depth_smoothing: float = 0.0
    spatial_grid: int = 4
    spatial_channels: int = 8
    projection_seed: int = 1234

    @property
    def n_categories(self) -> int:
        return len(self.catalog)

    @property
    def feature_channels(self) -> int:
        return len(self.catalog)


@dataclass
class ModelConfig:
    n_layers: int = 2
    hidden_size: int = 64
    n_heads: int = 4
    mlp_dim: int = 256
    vocab_size: int = 0  # filled from the vocabulary at build time
    K: int = 8
    depth_bins: int = 8
    n_categories: int = 8
    max_objects: int = 5
    max_seq_len: int = 64
    n_views: int = 3
    grid: int = 16
    feature_channels: int = 8
    spatial_grid: int = 4
    spatial_channels: int = 8
    vision_pool: int = 8
    vision_hidden: int = 256
    depth_norm: float = 6.0
    question_before_thinking: bool = False

    def validate(self) -> None:
        if self.hidden_size % self.n_heads:
            raise ConfigError(f"hidden_size {self.hidden_size} not divisible by n_heads {self.n_heads}")
        if self.K < 0:
            raise ConfigError("K must be >= 0")
        if self.mlp_dim < self.hidden_size:
            raise ConfigError("mlp_dim must be >= hidden_size")
        if self.grid % self.vision_pool or self.grid % self.spatial_grid:
            raise ConfigError("grid must be divisible by vision_pool and spatial_grid")

    @property
    def spatial_feature_shape(self) -> tuple[int, int, int, int]:
        return (self.n_views, self.spatial_grid, self.spatial_grid, self.spatial_channels)

    @property
    def max_pairs(self) -> int:
        return self.max_objects * (self.max_objects - 1) // 2


@dataclass
class LossConfig:
    temperature: float = 2.0
    lambda_cross: float = 0.1
    cross_view: str = "distance"  # or "cosine": literal similarity reading
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    hard_label_mix: float = 0.0
    static_weights: dict[str, float] = field(default_factory=lambda: {k: 1.0 for k in ALL_LOSSES})

    def validate(self) -> None:
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        if self.lambda_cross < 0:
            raise ConfigError("lambda_cross must be >= 0")
        if self.focal_gamma < 0:
            raise ConfigError("focal_gamma must be >= 0")
        if not 0 < self.focal_alpha < 1:
            raise ConfigError("focal_alpha must lie in (0, 1)")
        if self.cross_view not in ("distance", "cosine"):
            raise ConfigError(f"unknown cross_view mode {self.cross_view!r}")
        if not 0 <= self.hard_label_mix <= 1:
            raise ConfigError("hard_label_mix must lie in [0, 1]")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 5
    batch_size: int = 8
    warmup_frac: float = 0.05
    warmup_steps: Optional[int] = None
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    seed: int = 0
    loss_mode: str = "uncertainty"
    enabled_losses: tuple[str, ...] = ALL_LOSSES
    val_frac: float = 0.2
    patience: Optional[int] = None
    max_new_tokens: int = 16

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.warmup_steps is not None and self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")
        if not self.enabled_losses:
            raise ConfigError("enabled loss set is empty")
        unknown = set(self.enabled_losses) - set(ALL_LOSSES)
        if unknown:
            raise ConfigError(f"unknown losses: {sorted(unknown)}")
        if self.loss_mode not in ("uncertainty", "static"):
            raise ConfigError(f"unknown loss mode {self.loss_mode!r}")


@dataclass
class EvalConfig:
    max_new_tokens: int = 16
    latency_runs: int = 20
    reference_params: Optional[int] = None


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        self.model.validate()
        self.loss.validate()
        self.train.validate()

    def to_dict(self) -> dict[str, Any]:
        return _plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, data: Optional[dict[str, Any]]) -> "RunConfig":
        return _build(cls, data or {}, "")

    def dump(self, path: Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


def _plain(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data: dict[str, Any], where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section {where or '<root>'} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"unknown config keys in {where or '<root>'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(cls(), name)
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}{name}.")
        elif isinstance(default, tuple) and isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def load_config(path: Optional[Path]) -> RunConfig:
    if path is None:
        cfg = RunConfig()
    else:
        cfg = RunConfig.from_dict(yaml.safe_load(Path(path).read_text()))
    cfg.validate()
    return cfg


def expand_losses(names) -> set[str]:
    out: set[str] = set()
    for name in names:
        if name in LOSS_GROUPS:
            out.update(LOSS_GROUPS[name])
        elif name in ALL_LOSSES:
            out.add(name)
        else:
            raise ConfigError(f"unknown loss {name!r}")
    return out


def model_config_for(dataset: DatasetConfig, base: ModelConfig, vocab_size: int) -> ModelConfig:
    """Fill the data-dependent fields of a model config."""
    return dataclasses.replace(
        base,
        vocab_size=vocab_size,
        depth_bins=dataset.depth_bins,
        n_categories=dataset.n_categories,
        max_objects=dataset.max_objects,
        n_views=dataset.n_views,
        grid=dataset.grid,
        feature_channels=dataset.feature_channels,
        spatial_grid=dataset.spatial_grid,
        spatial_channels=dataset.spatial_channels,
        depth_norm=float(max(dataset.room_size)),
    )
