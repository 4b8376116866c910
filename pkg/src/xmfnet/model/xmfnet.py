from __future__ import annotations

from typing import Optional

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor, load_parameters, save_parameters
from ..errors import DimensionError
from ..geometry import fps
from .config import ModelConfig
from .decoder import Decoder
from .encoders import ImageEncoder, PointEncoder
from .fusion import Fusion
from .layers import Module


class XMFNet(Module):
    """Cross-modal completion network.

    ``complete(X, I)`` returns the decoder's N′ points stacked on top of
    N − N′ farthest-point samples of the partial input.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.pc_encoder = PointEncoder(cfg, rng)
        self.img_encoder = None if cfg.unimodal else ImageEncoder(cfg, rng)
        self.fusion = Fusion(cfg, rng)
        self.decoder = Decoder(cfg, rng)

    def features(self, X, image=None) -> Tensor:
        H_X, _ = self.pc_encoder(X)
        H_I = None if self.cfg.unimodal else self.img_encoder(image)
        return self.fusion(H_X, H_I)

    def decode(self, X, image=None) -> Tensor:
        return self.decoder(self.features(X, image))

    def complete(self, X, image=None) -> Tensor:
        pts = np.asarray(getattr(X, "data", X), dtype=np.float64)
        if pts.shape != (self.cfg.n_points, 3):
            raise DimensionError(f"expected a {self.cfg.n_points}×3 partial cloud, got {pts.shape}")
        decoded = self.decode(pts, image)
        keep = fps(pts, self.cfg.n_points - self.cfg.n_decoded, self.cfg.fps_seed)
        return ad.concat([decoded, Tensor(pts[keep])], axis=0)

    __call__ = complete

    def save(self, path) -> None:
        save_parameters(path, self.parameters())

    def load(self, path) -> None:
        self.load_state_dict(load_parameters(path))


def complete(X, image, cfg: Optional[ModelConfig] = None, model: Optional[XMFNet] = None) -> Tensor:
    model = model or XMFNet(cfg or ModelConfig())
    return model.complete(X, image)
