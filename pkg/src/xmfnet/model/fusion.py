"""Multi-head cross/self-attention blocks and the fusion sequence."""

from __future__ import annotations

from typing import Optional

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..errors import ConfigError
from .config import ModelConfig
from .layers import LayerNorm, Linear, MLP, Module


def multihead_attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """softmax(Q Kᵀ / sqrt(d_head)) V per head; heads concatenated along features."""
    n_q, dim = q.shape
    n_kv = k.shape[0]
    d = dim // heads
    qh = ad.transpose(ad.reshape(q, (n_q, heads, d)), (1, 0, 2))
    kh = ad.transpose(ad.reshape(k, (n_kv, heads, d)), (1, 2, 0))
    vh = ad.transpose(ad.reshape(v, (n_kv, heads, d)), (1, 0, 2))
    att = ad.softmax(ad.scale(ad.matmul(qh, kh), 1.0 / np.sqrt(d)), axis=-1)
    out = ad.matmul(att, vh)
    return ad.reshape(ad.transpose(out, (1, 0, 2)), (n_q, dim))


class AttentionBlock(Module):
    """Pre-norm transformer block.

    ``x + W_out·MHA(LN(x), LN(ctx))`` followed by ``+ FFN(LN(·))``. With no
    context it is self-attention; ``d_kv=None`` builds a self-attention-only block.
    """

    def __init__(self, d_q: int, d_kv: Optional[int], dim: int, heads: int, rng: np.random.Generator,
                 ffn_mult: int = 2):
        if dim % heads:
            raise ConfigError(f"dim {dim} is not divisible by heads {heads}")
        self.heads = heads
        self.norm_q = LayerNorm(d_q)
        self.norm_kv = None if d_kv is None else LayerNorm(d_kv)
        d_kv = d_q if d_kv is None else d_kv
        self.W_q = Linear(d_q, dim, rng, bias=False)
        self.W_k = Linear(d_kv, dim, rng, bias=False)
        self.W_v = Linear(d_kv, dim, rng, bias=False)
        self.W_out = Linear(dim, dim, rng)
        self.skip = Linear(d_q, dim, rng, bias=False) if d_q != dim else None
        self.norm_ffn = LayerNorm(dim)
        self.ffn = MLP([dim, ffn_mult * dim, dim], rng)

    def attend(self, x: Tensor, context: Optional[Tensor] = None) -> Tensor:
        """The projected attention output, before the residual."""
        qn = self.norm_q(x)
        if context is not None and self.norm_kv is None:
            raise ConfigError("this attention block was built for self-attention only")
        kvn = qn if context is None else self.norm_kv(context)
        out = multihead_attention(self.W_q(qn), self.W_k(kvn), self.W_v(kvn), self.heads)
        return self.W_out(out)

    def __call__(self, x: Tensor, context: Optional[Tensor] = None) -> Tensor:
        res = x if self.skip is None else self.skip(x)
        h = res + self.attend(x, context)
        return h + self.ffn(self.norm_ffn(h))


def cross_attention(q_feat: Tensor, kv_feat: Tensor, block: AttentionBlock) -> Tensor:
    return block(q_feat, kv_feat)


class Fusion(Module):
    """[cross(·←H_I) → self] × stages, then a cross-attention from the last stage to the first fused features.

    In unimodal mode every cross-attention becomes self-attention and the
    image features are never used.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        F, h, m = cfg.dim, cfg.heads, cfg.ffn_mult
        self.unimodal = cfg.unimodal
        ctx = cfg.img_dim
        self.cross = []
        self.self_att = []
        for i in range(cfg.fusion_stages):
            d_q = cfg.pc_dim if i == 0 else F
            self.cross.append(AttentionBlock(d_q, None if cfg.unimodal else ctx, F, h, rng, m))
            self.self_att.append(AttentionBlock(F, None, F, h, rng, m))
        self.final = AttentionBlock(F, None if cfg.unimodal else F, F, h, rng, m)

    def __call__(self, H_X: Tensor, H_I: Optional[Tensor]) -> Tensor:
        x = H_X
        first = None
        for cross, self_att in zip(self.cross, self.self_att):
            x = cross(x) if self.unimodal else cross(x, H_I)
            if first is None:
                first = x
            x = self_att(x)
        return self.final(x) if self.unimodal else self.final(x, first)
