"""Branched attention-based upsampling decoder."""

from __future__ import annotations

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from .config import ModelConfig
from .layers import Linear, MLP, Module


class Branch(Module):
    def __init__(self, dim: int, proj_dim: int, points: int, rng: np.random.Generator):
        self.proj = MLP([dim, proj_dim, proj_dim], rng)
        self.dec = MLP([proj_dim, proj_dim, points], rng)
        self.out = Linear(proj_dim, 3, rng, bias=False, gain=0.01)  # decoded points start near the origin

    def __call__(self, H: Tensor) -> Tensor:
        Z = self.proj(H)
        A = ad.softmax(self.dec(Z), axis=0)  # normalized over the feature sites
        return self.out(ad.matmul(ad.transpose(A, (1, 0)), Z))


class Decoder(Module):
    """K branches each mapping N_X×F features to M points; outputs are stacked."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.branches = [Branch(cfg.dim, cfg.proj_dim, cfg.branch_points, rng) for _ in range(cfg.branches)]

    def __call__(self, H: Tensor) -> Tensor:
        return ad.concat([b(H) for b in self.branches], axis=0)
