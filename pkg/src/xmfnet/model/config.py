from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Tuple

from ..errors import ConfigError


@dataclass
class ModelConfig:
    """Network hyperparameters. Defaults are the full-size ("paper") preset."""

    n_points: int = 2048
    n_decoded: int = 1024
    branches: int = 8
    branch_points: int = 128
    pc_dim: int = 256
    img_dim: int = 256
    dim: int = 256
    heads: int = 4
    edgeconv_k: int = 20
    pool_ratios: List[float] = field(default_factory=lambda: [0.25, 0.25])
    pool_knn_ks: List[int] = field(default_factory=lambda: [16, 6])
    edgeconv_dims: Optional[List[int]] = None
    image_size: Tuple[int, int] = (224, 224)
    image_channels: List[int] = field(default_factory=lambda: [32, 64, 128, 256])
    proj_dim: Optional[int] = None
    ffn_mult: int = 2
    fusion_stages: int = 2
    fps_seed: int = 0
    unimodal: bool = False

    def __post_init__(self):
        self.image_size = tuple(self.image_size)
        self.pool_ratios = list(self.pool_ratios)
        self.pool_knn_ks = list(self.pool_knn_ks)
        self.image_channels = list(self.image_channels)
        if self.edgeconv_dims is None:
            n = len(self.pool_ratios)
            self.edgeconv_dims = [max(self.pc_dim // 2 ** (n - 1 - i), 8) for i in range(n)]
        self.edgeconv_dims = list(self.edgeconv_dims)
        if self.proj_dim is None:
            self.proj_dim = self.dim
        self.validate()

    def validate(self) -> None:
        if self.branches * self.branch_points != self.n_decoded:
            raise ConfigError(f"branches*branch_points = {self.branches * self.branch_points} != n_decoded {self.n_decoded}")
        if self.n_decoded > self.n_points:
            raise ConfigError("n_decoded cannot exceed n_points")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if len(self.pool_ratios) != len(self.pool_knn_ks):
            raise ConfigError("pool_ratios and pool_knn_ks must have the same length")
        if len(self.edgeconv_dims) != len(self.pool_ratios):
            raise ConfigError("edgeconv_dims needs one entry per pooling level")
        if self.edgeconv_dims[-1] != self.pc_dim:
            raise ConfigError("last edgeconv width must equal pc_dim")
        if any(not 0 < r <= 1 for r in self.pool_ratios):
            raise ConfigError("pool ratios must lie in (0, 1]")
        if self.image_channels[-1] != self.img_dim:
            raise ConfigError("last image channel count must equal img_dim")
        stride = 2 ** len(self.image_channels)
        if self.image_size[0] % stride or self.image_size[1] % stride:
            raise ConfigError(f"image size {self.image_size} not divisible by total stride {stride}")

    @property
    def n_pc_features(self) -> int:
        """Rows of the point-cloud feature map after all pooling levels."""
        n = self.n_points
        for r in self.pool_ratios:
            n = math.ceil(r * n)
        return n

    @property
    def n_img_features(self) -> int:
        stride = 2 ** len(self.image_channels)
        return (self.image_size[0] // stride) * (self.image_size[1] // stride)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "ModelConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}: {exc.msg}") from None


def paper_config(**overrides) -> ModelConfig:
    return ModelConfig(**overrides)


def toy_config(**overrides) -> ModelConfig:
    base = dict(n_points=512, n_decoded=256, branches=4, branch_points=64, pc_dim=64, img_dim=64, dim=64,
                heads=4, image_size=(64, 64), image_channels=[16, 32, 64, 64])
    base.update(overrides)
    return ModelConfig(**base)
