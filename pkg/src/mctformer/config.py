"""Model and run configuration."""

from dataclasses import asdict, dataclass, fields

VARIANTS = ("V1", "V2")
HEAD_MODES = ("average_pool", "max_pool", "fully_connected")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 3
    grid_side: int = 8
    embed_dim: int = 64
    num_layers: int = 6
    num_heads: int = 4
    fuse_layers: int = 3
    patch_size: int = 4
    mlp_ratio: float = 4.0
    variant: str = "V2"
    head_mode: str = "average_pool"

    def __post_init__(self):
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.grid_side < 2:
            raise ConfigError(f"grid_side must be >= 2, got {self.grid_side}")
        if self.num_layers < 1 or self.num_heads < 1 or self.patch_size < 1:
            raise ConfigError("num_layers, num_heads and patch_size must be positive")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}")
        if not 1 <= self.fuse_layers <= self.num_layers:
            raise ConfigError(f"fuse_layers must be in [1, {self.num_layers}], got {self.fuse_layers}")
        if self.mlp_ratio <= 0:
            raise ConfigError(f"mlp_ratio must be positive, got {self.mlp_ratio}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.head_mode not in HEAD_MODES:
            raise ConfigError(f"head_mode must be one of {HEAD_MODES}, got {self.head_mode!r}")

    @property
    def num_patches(self):
        return self.grid_side * self.grid_side

    @property
    def num_tokens(self):
        return self.num_classes + self.num_patches

    @property
    def head_dim(self):
        return self.embed_dim // self.num_heads

    @property
    def image_side(self):
        return self.patch_size * self.grid_side

    @property
    def mlp_hidden(self):
        return int(round(self.embed_dim * self.mlp_ratio))

    def replace(self, **changes):
        return ModelConfig(**{**asdict(self), **changes})

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass(frozen=True)
class RunParams:
    """Training-loop hyperparameters (desk-scale AdamW defaults)."""

    epochs: int = 40
    batch_size: int = 16
    lr: float = 5e-4
    min_lr: float = 1e-6
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.lr < 0 or self.min_lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr, min_lr and weight_decay must be nonnegative")

    def replace(self, **changes):
        return RunParams(**{**asdict(self), **changes})

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})
