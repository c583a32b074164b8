"""Model configuration, stage schedules, presets and the flat config grammar.

Config text is one ``key = value`` pair per line. ``#`` starts a comment,
blank lines are ignored, keys are lowercase identifiers and values are
stored verbatim (surrounding whitespace stripped). See docs/config.md.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

from .errors import ConfigError, PoolingError
from .pooling import pooled_length, pooled_length_2d

POOL_KINDS = ("max1d", "avg1d", "conv1d", "max2d")
HEAD_KINDS = ("class_token", "avg_pool")


@dataclass(frozen=True)
class ModelConfig:
    image_h: int = 224
    image_w: int = 224
    channels: int = 3
    patch_size: int = 16
    embed_dim: int = 384
    num_heads: int = 6
    num_blocks: int = 12
    num_stages: int = 0
    pool_kernel: int = 3
    pool_stride: int = 2
    pool_pad: int = 0
    pool_kind: str = "max1d"
    head_kind: str = "avg_pool"
    num_classes: int = 1000

    def __post_init__(self):
        self.validate()

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_h // self.patch_size, self.image_w // self.patch_size

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def has_cls(self) -> bool:
        return self.head_kind == "class_token"

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def validate(self) -> None:
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.type in ("int", int) and (not isinstance(v, int) or isinstance(v, bool)):
                raise ConfigError(f"{f.name} must be an integer, got {v!r}")
        positive = ("image_h", "image_w", "channels", "patch_size", "embed_dim",
                    "num_heads", "num_blocks", "pool_kernel", "pool_stride", "num_classes")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.pool_pad < 0:
            raise ConfigError("pool_pad must be >= 0")
        if self.image_h % self.patch_size or self.image_w % self.patch_size:
            raise ConfigError(
                f"image {self.image_h}x{self.image_w} is not divisible by patch size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by {self.num_heads} heads")
        if not 0 <= self.num_stages <= self.num_blocks:
            raise ConfigError(f"num_stages must lie in [0, {self.num_blocks}], got {self.num_stages}")
        if self.pool_kind not in POOL_KINDS:
            raise ConfigError(f"pool_kind must be one of {POOL_KINDS}, got {self.pool_kind!r}")
        if self.head_kind not in HEAD_KINDS:
            raise ConfigError(f"head_kind must be one of {HEAD_KINDS}, got {self.head_kind!r}")
        if self.num_stages and self.has_cls:
            raise ConfigError("pooling stages require head_kind = avg_pool (no class token)")
        try:
            stage_schedule(self)
        except PoolingError as exc:
            raise ConfigError(str(exc)) from exc

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_dict().items())

    @classmethod
    def from_mapping(cls, values: dict) -> "ModelConfig":
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name in values:
                raw = values[f.name]
                try:
                    kwargs[f.name] = raw if f.type == "str" else int(raw)
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"{f.name}: expected an integer, got {raw!r}") from exc
        return cls(**kwargs)

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        return cls.from_mapping(parse_config_text(text))


MODEL_KEYS = tuple(f.name for f in dataclasses.fields(ModelConfig))


@dataclass(frozen=True)
class StageSchedule:
    stage_starts: tuple[int, ...]      # 1-based index of each stage's first block
    seq_lengths: tuple[int, ...]       # tokens entering each block
    final_length: int                  # tokens leaving the last block
    pooled_lengths: tuple[int, ...] = field(default=())  # length after each stage's pool


def stage_sizes(num_blocks: int, num_stages: int) -> list[int]:
    """Even partition with the remainder given to the last stages."""
    if num_stages == 0:
        return []
    base, rem = divmod(num_blocks, num_stages)
    return [base + (1 if i >= num_stages - rem else 0) for i in range(num_stages)]


def stage_schedule(cfg: ModelConfig) -> StageSchedule:
    starts, b = [], 1
    for size in stage_sizes(cfg.num_blocks, cfg.num_stages):
        starts.append(b)
        b += size
    n = cfg.num_patches + (1 if cfg.has_cls else 0)
    lengths, pooled = [], []
    start_set = set(starts)
    for block in range(1, cfg.num_blocks + 1):
        lengths.append(n)
        if block in start_set:
            n = pool_output_length(cfg, n)
            pooled.append(n)
    return StageSchedule(tuple(starts), tuple(lengths), n, tuple(pooled))


def pool_output_length(cfg: ModelConfig, n: int) -> int:
    if cfg.pool_kind == "max2d":
        return pooled_length_2d(n, cfg.pool_kernel, cfg.pool_stride, cfg.pool_pad)
    return pooled_length(n, cfg.pool_kernel, cfg.pool_stride, cfg.pool_pad)


# Named architectures. Width scales as 64 * heads.
_TI = dict(embed_dim=192, num_heads=3, num_blocks=12)
_S = dict(embed_dim=384, num_heads=6, num_blocks=12)

PRESETS: dict[str, ModelConfig] = {
    "deit-ti": ModelConfig(**_TI, num_stages=0, head_kind="class_token"),
    "deit-s": ModelConfig(**_S, num_stages=0, head_kind="class_token"),
    "hvt-ti-1": ModelConfig(**_TI, num_stages=1),
    "hvt-s-1": ModelConfig(**_S, num_stages=1),
    "hvt-s-4": ModelConfig(**_S, num_stages=4),
    "scale-hvt-ti-4": ModelConfig(**_S, num_stages=4),
    "micro": ModelConfig(image_h=16, image_w=16, channels=1, patch_size=4, embed_dim=16,
                         num_heads=2, num_blocks=4, num_stages=1, num_classes=4),
}


def preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None


def parse_config_text(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key.replace("_", "").isalnum() or not key.islower():
            raise ConfigError(f"line {lineno}: bad key {key!r}")
        values[key] = value
    return values


def format_config_text(values: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in values.items())


def is_square(n: int) -> bool:
    return math.isqrt(n) ** 2 == n
