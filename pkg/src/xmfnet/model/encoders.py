"""Point-cloud encoder (EdgeConv + self-attention graph pooling) and image encoder."""

from __future__ import annotations

import math
from typing import Optional, Tuple

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..errors import DimensionError, SizeError
from ..geometry import knn
from .config import ModelConfig
from .layers import Conv2d, Linear, Module


def edge_function(h: Tensor, neighbors: np.ndarray, W: Tensor, b: Tensor) -> Tensor:
    """max_j ([h_i ‖ h_j − h_i] W + b) over the neighbours j of every node i, before activation.

    Splitting W into the rows acting on h_i and on h_j − h_i gives
    ``h_i (W_a − W_b) + b + max_j h_j W_b``, which avoids materializing
    the n·k edge features. Max ties route the gradient to the first neighbour.
    """
    n, f = h.shape
    if neighbors.shape[0] != n:
        raise DimensionError(f"graph has {neighbors.shape[0]} rows but features have {n}")
    if W.shape[0] != 2 * f:
        raise DimensionError(f"edge weights expect {W.shape[0] // 2} input features, got {f}")
    W_self, W_nbr = W[:f], W[f:]
    own = ad.linear(h, W_self - W_nbr, b)
    k = neighbors.shape[1]
    msg = ad.matmul(h, W_nbr)
    nbr = ad.reshape(ad.gather(msg, neighbors.reshape(-1)), (n, k, W.shape[1])).max(axis=1)
    return own + nbr


class EdgeConv(Module):
    """DGCNN edge convolution with a single-layer edge MLP and leaky-ReLU."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, slope: float = 0.2):
        self.mlp = Linear(2 * d_in, d_out, rng)
        self.slope = slope

    def __call__(self, h: Tensor, neighbors: np.ndarray) -> Tensor:
        # leaky-ReLU is monotone, so it commutes with the neighbour max
        return ad.leaky_relu(edge_function(h, neighbors, self.mlp.W, self.mlp.b), self.slope)


def sag_pool(feat: Tensor, coords: np.ndarray, ratio: float, pool_knn_k: int, W: Tensor, b: Tensor,
             neighbors: Optional[np.ndarray] = None):
    """Self-attention graph pooling.

    Node scores come from one edge-function layer projecting to a scalar over a
    ``pool_knn_k`` graph; the top ``ceil(ratio·n)`` nodes (ties to the lower
    index) are kept and their features gated by ``tanh(score)``.

    Returns ``(features, kept_indices, kept_coords)``.
    """
    n = feat.shape[0]
    if not 0 < ratio <= 1:
        raise SizeError(f"pooling ratio must lie in (0, 1], got {ratio}")
    m = math.ceil(ratio * n)
    if m < 1:
        raise SizeError(f"pooling ratio {ratio} keeps no nodes out of {n}")
    if neighbors is None:
        neighbors = knn(coords, pool_knn_k)
    s = ad.reshape(edge_function(feat, neighbors, W, b), (n,))
    kept = np.argsort(-s.data, kind="stable")[:m]
    gate = ad.repeat_cols(ad.tanh(ad.gather(s, kept)), feat.shape[1])
    return ad.mul(ad.gather(feat, kept), gate), kept, np.asarray(coords)[kept]


class SAGPool(Module):
    def __init__(self, d_in: int, ratio: float, knn_k: int, rng: np.random.Generator):
        self.score = Linear(2 * d_in, 1, rng)
        self.ratio = ratio
        self.knn_k = knn_k

    def __call__(self, h: Tensor, coords: np.ndarray, neighbors: Optional[np.ndarray] = None):
        return sag_pool(h, coords, self.ratio, self.knn_k, self.score.W, self.score.b, neighbors)


class PointEncoder(Module):
    """EdgeConv → pool → EdgeConv → pool … on the partial cloud."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        dims = [3] + list(cfg.edgeconv_dims)
        self.convs = [EdgeConv(dims[i], dims[i + 1], rng) for i in range(len(cfg.edgeconv_dims))]
        self.pools = [SAGPool(dims[i + 1], r, k, rng) for i, (r, k) in enumerate(zip(cfg.pool_ratios, cfg.pool_knn_ks))]
        self.k = cfg.edgeconv_k

    def __call__(self, X) -> Tuple[Tensor, np.ndarray]:
        coords = np.asarray(getattr(X, "data", X), dtype=np.float64)
        h = ad.as_tensor(X)
        for conv, pool in zip(self.convs, self.pools):
            pk = pool.knn_k
            # one distance sort serves both neighbourhood sizes (rows are sorted by distance)
            nbrs = knn(coords, min(max(self.k, pk), coords.shape[0] - 1))
            h = conv(h, nbrs[:, : self.k])
            h, _, coords = pool(h, coords, nbrs[:, :pk])
        return h, coords


class ImageEncoder(Module):
    """Plain stack of stride-2 3×3 convolutions; the final grid is flattened to rows."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, slope: float = 0.2):
        chans = [3] + list(cfg.image_channels)
        self.convs = [Conv2d(chans[i], chans[i + 1], rng) for i in range(len(cfg.image_channels))]
        self.image_size = tuple(cfg.image_size)
        self.slope = slope

    def __call__(self, image) -> Tensor:
        img = np.asarray(getattr(image, "data", image), dtype=np.float64)
        if img.ndim == 2:
            img = np.repeat(img[..., None], 3, axis=2)
        if img.shape != (*self.image_size, 3):
            raise DimensionError(f"image shape {img.shape} does not match configured {(*self.image_size, 3)}")
        x = Tensor(np.ascontiguousarray(img.transpose(2, 0, 1)))
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = ad.leaky_relu(x, self.slope)
        c, h, w = x.shape
        return ad.transpose(ad.reshape(x, (c, h * w)), (1, 0))
