"""Configuration objects and the flat key=value config format.

All architectural and loss hyperparameters live in :class:`ModelConfig`;
every optimization / run knob lives in :class:`TrainConfig`. Two presets
ship with the package: ``desk`` (runnable on one CPU in minutes) and
``paper`` (the full-scale published values, kept for documentation).
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

ENV_PREFIX = "MINIVLP_"


@dataclass
class ModelConfig:
    """Every architecture and loss hyperparameter, one authoritative home."""

    hidden_dim: int = 64
    text_layers: int = 2
    image_layers: int = 2
    cross_layers: int = 2
    num_heads: int = 4
    image_patch_size: int = 8
    image_resolution: int = 32
    vocab_size: int = 48
    max_text_len: int = 48
    tau_init: float = 0.07
    tau_min: float = 0.01
    tau_s: float = 0.1
    tau_t: float = 0.04
    ema_momentum: float = 0.995
    queue_capacity: int = 256
    queue_decay: float = 0.99
    mask_ratio: float = 0.15
    image_mask_ratio: float = 0.25
    tgd_alpha: float = 0.4
    center_momentum: float = 0.9
    freeze_image_encoder: bool = False
    # cross-attention layer used for entity heat maps; None picks the third
    # layer when there are >= 3 cross layers, else the last one
    attn_layer_index: int | None = None

    def validate(self) -> None:
        if self.hidden_dim <= 0:
            raise ValueError(f"hidden_dim must be positive, got {self.hidden_dim}")
        if self.hidden_dim % self.num_heads != 0:
            raise ValueError(
                f"hidden_dim ({self.hidden_dim}) must be divisible by num_heads ({self.num_heads})"
            )
        if self.image_resolution % self.image_patch_size != 0:
            raise ValueError(
                f"image_resolution ({self.image_resolution}) must be divisible by "
                f"image_patch_size ({self.image_patch_size})"
            )
        if self.tau_s <= 0 or self.tau_t <= 0:
            raise ValueError("tau_s and tau_t must be positive")
        if self.tau_init <= 0:
            raise ValueError("tau_init must be positive")
        for name in ("ema_momentum", "queue_decay", "tgd_alpha", "mask_ratio",
                     "image_mask_ratio", "center_momentum"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.queue_capacity <= 0:
            raise ValueError("queue_capacity must be positive")
        if self.vocab_size <= 4:
            raise ValueError("vocab_size must exceed the reserved special ids")
        if self.max_text_len < 2:
            raise ValueError("max_text_len must be at least 2")

    @property
    def num_patches(self) -> int:
        return (self.image_resolution // self.image_patch_size) ** 2


@dataclass
class TrainConfig:
    """Optimization schedule, simulated sharding, and ablation switches."""

    epochs: int = 30
    batch_size: int = 32
    shards: int = 1
    learning_rate: float = 5e-4
    weight_decay: float = 0.02
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    warmup_fraction: float = 0.05
    grad_clip: float = 1.0
    seed: int = 0
    log_every: int = 1
    # pseudo-target mixing ramps linearly from 0 over this many epochs
    tgd_ramp_epochs: float = 1.0
    # ablation flags (all on = full model)
    use_gcpr: bool = True
    use_et: bool = True
    use_mlm: bool = True
    use_tgd: bool = True
    use_fgd: bool = True
    use_cross_encoders: bool = True
    use_centering: bool = True

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (hard negatives need a batch)")
        if self.shards < 1:
            raise ValueError("shards must be >= 1")
        if self.batch_size % self.shards != 0:
            raise ValueError(
                f"batch_size ({self.batch_size}) must be divisible by shards ({self.shards})"
            )
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in [0, 1)")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


def desk_model_config() -> ModelConfig:
    return ModelConfig()


def paper_model_config() -> ModelConfig:
    """Published full-scale values. Documentation preset, not desk-runnable."""
    return ModelConfig(
        hidden_dim=768,
        text_layers=12,
        image_layers=12,
        cross_layers=6,
        num_heads=12,
        image_patch_size=16,
        image_resolution=224,
        vocab_size=21128,
        max_text_len=128,
        tau_init=0.07,
        tau_s=0.1,
        tau_t=0.04,
        ema_momentum=0.995,
        queue_capacity=36864,
        queue_decay=0.99,
        mask_ratio=0.15,
        freeze_image_encoder=True,
    )


def desk_train_config() -> TrainConfig:
    return TrainConfig()


def paper_train_config() -> TrainConfig:
    return TrainConfig(epochs=15, batch_size=4096, shards=128, learning_rate=5e-4)


def retrieval_finetune_config() -> TrainConfig:
    """Retrieval fine-tuning preset: contrastive + matching losses only."""
    return TrainConfig(epochs=20, batch_size=32, learning_rate=1e-5,
                       use_mlm=False, use_fgd=False)


def matching_finetune_config() -> TrainConfig:
    """Matching fine-tuning preset: matching loss only, labels given."""
    return TrainConfig(epochs=5, batch_size=64, learning_rate=1e-5,
                       use_gcpr=False, use_mlm=False, use_fgd=False, use_tgd=False)


_CONFIG_FIELDS: dict[str, tuple[str, type]] = {}
for _f in fields(ModelConfig):
    _CONFIG_FIELDS[_f.name] = ("model", _f.type)  # type: ignore[arg-type]
for _f in fields(TrainConfig):
    if _f.name in _CONFIG_FIELDS:
        raise RuntimeError(f"field name collision in configs: {_f.name}")
    _CONFIG_FIELDS[_f.name] = ("train", _f.type)  # type: ignore[arg-type]


class ConfigError(ValueError):
    """Raised for unknown keys or untypeable values in a config source."""


def _coerce(key: str, raw: str):
    owner_field = {f.name: f for f in fields(ModelConfig)} | {
        f.name: f for f in fields(TrainConfig)
    }
    ftype = owner_field[key].type
    raw = raw.strip()
    if ftype in ("bool",):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"key {key!r}: expected a boolean, got {raw!r}")
    if ftype in ("int",):
        try:
            return int(raw)
        except ValueError as e:
            raise ConfigError(f"key {key!r}: expected an integer, got {raw!r}") from e
    if ftype in ("float",):
        try:
            return float(raw)
        except ValueError as e:
            raise ConfigError(f"key {key!r}: expected a float, got {raw!r}") from e
    if ftype == "int | None":
        if raw.lower() in ("none", "null"):
            return None
        try:
            return int(raw)
        except ValueError as e:
            raise ConfigError(f"key {key!r}: expected an integer or none, got {raw!r}") from e
    return raw


def parse_config_text(text: str) -> dict:
    """Parse flat ``key=value`` lines; '#' starts a comment, blanks ignored."""
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {stripped!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in _CONFIG_FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, raw)
    return values


def env_overrides(environ=None) -> dict:
    """Collect ``MINIVLP_<key>`` overrides from the environment."""
    environ = os.environ if environ is None else environ
    values: dict = {}
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX):].lower()
        if key not in _CONFIG_FIELDS:
            raise ConfigError(f"unknown config key in environment: {name}")
        values[key] = _coerce(key, raw)
    return values


def preset_path(name: str) -> Path:
    if name not in ("desk", "paper"):
        raise ConfigError(f"unknown preset {name!r}; choose 'desk' or 'paper'")
    return Path(str(resources.files("minivlp").joinpath(f"presets/{name}.cfg")))


def load_configs(
    preset: str = "desk",
    config_path: str | Path | None = None,
    environ=None,
    **explicit,
) -> tuple[ModelConfig, TrainConfig]:
    """Layer config sources: preset < file < environment < explicit kwargs."""
    values = parse_config_text(preset_path(preset).read_text())
    if config_path is not None:
        values.update(parse_config_text(Path(config_path).read_text()))
    values.update(env_overrides(environ))
    for key, val in explicit.items():
        if key not in _CONFIG_FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = val

    model_kwargs = {k: v for k, v in values.items() if _CONFIG_FIELDS[k][0] == "model"}
    train_kwargs = {k: v for k, v in values.items() if _CONFIG_FIELDS[k][0] == "train"}
    model_cfg = ModelConfig(**model_kwargs)
    train_cfg = TrainConfig(**train_kwargs)
    model_cfg.validate()
    train_cfg.validate()
    return model_cfg, train_cfg


def config_to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)
