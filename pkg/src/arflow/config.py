"""Run configuration: JSON files, defaults, and the deep-shallow arch shorthand."""

from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass

from .errors import ConfigError
from .flow import FlowConfig

_ARCH_RE = re.compile(r"^(\d+)\((\d+)\)-(\d+)$")


def parse_arch(text: str):
    """"l(T)-d" -> (layers, width): one l-layer deep block plus T-1 two-layer blocks."""
    m = _ARCH_RE.match(text.strip())
    if not m:
        raise ConfigError(f"bad arch shorthand '{text}', expected like '18(6)-2048'")
    deep, blocks, width = (int(g) for g in m.groups())
    if blocks < 1:
        raise ConfigError("arch shorthand needs at least one block")
    return [deep] + [2] * (blocks - 1), width


def format_arch(layers, width: int) -> str:
    layers = list(layers)
    if any(l != 2 for l in layers[1:]):
        raise ConfigError(f"layers {layers} do not fit the deep-shallow shorthand")
    return f"{layers[0]}({len(layers)})-{width}"


@dataclass
class RunConfig:
    """Everything a training or sampling run needs, serializable as JSON."""

    arch: str = "4(3)-64"                 # shorthand, or use layers= for irregular stacks
    layers: list | None = None            # explicit per-block depths (overrides arch)
    width: int | None = None
    head_dim: int | None = None           # default width // 2
    grid_rows: int = 1
    grid_cols: int = 2
    channels: int = 1
    num_classes: int = 0
    condition_blocks: str = "deep"
    first_ordering_reversed: bool = False
    alternate_orderings: bool = True
    soft_clip: float = 5.0
    sigma_floor: float = 1e-4
    norm_penalty: float = 1e-4
    rope_alpha: float = 1.0
    # optimizer
    lr_max: float = 1e-4
    lr_min: float = 0.0
    warmup_steps: int = 0
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    grad_clip: float = 0.0                # 0 disables
    # run shape
    batch_size: int = 128
    total_images: int = 200_000
    seed: int = 0
    checkpoint_every: int = 100
    label_drop: float = 0.1               # chance a label trains the null-class row
    out_dir: str = "runs/out"
    # noisy-latent pipeline
    objective: str = "nll"                # nll | elbo
    sigma_l: float = 0.3
    sigma_dec: float = 0.1
    patch: int = 1
    latent_channels: int = 0              # 0 means model raw data channels
    image_size: int = 8
    decoder_hidden: int = 64
    decoder_lr: float = 1e-3
    decoder_steps: int = 0                # post-train decoder finetuning steps
    # guidance defaults for sampling
    omega: float = 0.0
    guidance_mode: str = "proposed"

    def __post_init__(self):
        if self.objective not in ("nll", "elbo"):
            raise ConfigError("objective must be 'nll' or 'elbo'")
        if self.batch_size < 1 or self.total_images < 1:
            raise ConfigError("batch_size and total_images must be >= 1")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")

    def resolved_arch(self):
        if self.layers is not None:
            if self.width is None:
                raise ConfigError("explicit layers list requires width")
            return [int(l) for l in self.layers], int(self.width)
        layers, width = parse_arch(self.arch)
        if self.width is not None:
            width = int(self.width)
        return layers, width

    def flow_config(self) -> FlowConfig:
        layers, width = self.resolved_arch()
        head_dim = self.head_dim if self.head_dim is not None else max(width // 2, 2)
        return FlowConfig(
            num_positions=self.grid_rows * self.grid_cols,
            channels=self.latent_channels or self.channels,
            layers_per_block=tuple(layers),
            width=width,
            head_dim=head_dim,
            grid=(self.grid_rows, self.grid_cols),
            num_classes=self.num_classes,
            condition_blocks=self.condition_blocks,
            soft_clip=self.soft_clip,
            sigma_floor=self.sigma_floor,
            norm_penalty=self.norm_penalty,
            rope_alpha=self.rope_alpha,
            alternate_orderings=self.alternate_orderings,
            first_ordering_reversed=self.first_ordering_reversed,
        )

    @property
    def total_steps(self) -> int:
        return max(1, -(-self.total_images // self.batch_size))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from None
        if not isinstance(d, dict):
            raise ConfigError("config JSON must be an object")
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_json(f.read())
