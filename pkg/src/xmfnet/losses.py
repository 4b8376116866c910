"""Point-set losses and evaluation metrics."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, SizeError
from .geometry import normalize_unit_sphere, pairwise_sq_dists


@dataclass
class LossConfig:
    beta: float = 0.75
    alpha: float = 40.0
    lam: float = 0.15
    fscore_threshold: float = 0.001

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must lie in [0, 1], got {self.beta}")
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be non-negative, got {self.lam}")
        if self.fscore_threshold <= 0:
            raise ConfigError(f"fscore threshold must be positive, got {self.fscore_threshold}")

    def to_dict(self) -> dict:
        return asdict(self)


def _pair(Y, Y_hat):
    Y, Y_hat = ad.as_tensor(Y), ad.as_tensor(Y_hat)
    if Y.shape[0] == 0 or Y_hat.shape[0] == 0:
        raise SizeError("Chamfer distance of an empty cloud")
    return Y, Y_hat


def nn_distances(Y, Y_hat):
    """Nearest-neighbour distance tensors in both directions.

    Returns ``(fwd, bwd)``: ``fwd[i] = min_j |Y_i - Ŷ_j|`` and
    ``bwd[j] = min_i |Ŷ_j - Y_i|``. Argmin ties go to the lower index.
    """
    Y, Y_hat = _pair(Y, Y_hat)
    d2 = pairwise_sq_dists(Y.data, Y_hat.data)
    to_hat = np.argmin(d2, axis=1)
    to_gt = np.argmin(d2, axis=0)
    fwd = ad.row_norm(ad.gather(Y_hat, to_hat) - Y)
    bwd = ad.row_norm(Y_hat - ad.gather(Y, to_gt))
    return fwd, bwd


def chamfer_l1(Y, Y_hat) -> Tensor:
    """Symmetric L1 Chamfer distance, each direction averaged over its own set and halved."""
    fwd, bwd = nn_distances(Y, Y_hat)
    return ad.scale(fwd.mean() + bwd.mean(), 0.5)


def chamfer_weighted(Y, Y_hat, beta: float) -> Tensor:
    """(1-β)/2N Σ_y min|y-ŷ| + β/2N Σ_ŷ min|ŷ-y|."""
    if not 0.0 <= beta <= 1.0:
        raise ConfigError(f"beta must lie in [0, 1], got {beta}")
    fwd, bwd = nn_distances(Y, Y_hat)
    return ad.scale(fwd.mean(), 0.5 * (1.0 - beta)) + ad.scale(bwd.mean(), 0.5 * beta)


def dcd(Y, Y_hat, alpha: float) -> Tensor:
    """Density-aware Chamfer term with the 1/N factor inside each summand.

    ``1/2N Σ_y (1 - e^{-α|y-w|}/N) + 1/2N Σ_ŷ (1 - e^{-α|ŷ-z|}/N)``, which for
    identical clouds equals ``1 - 1/N``.
    """
    if alpha <= 0:
        raise ConfigError(f"alpha must be positive, got {alpha}")
    fwd, bwd = nn_distances(Y, Y_hat)
    terms = []
    for d in (fwd, bwd):
        n = d.shape[0]
        decay = ad.exp(ad.scale(d, -alpha))
        # mean first: for identical clouds the mean of ones is exactly 1, so the value is exactly 1 - 1/N
        terms.append(ad.scale(1.0 - ad.scale(decay.mean(), 1.0 / n), 0.5))
    return terms[0] + terms[1]


def fscore(Y, Y_hat, threshold: float = 0.001) -> float:
    """F-score at a Euclidean distance threshold. No gradient."""
    a = np.asarray(getattr(Y, "data", Y), dtype=np.float64)
    b = np.asarray(getattr(Y_hat, "data", Y_hat), dtype=np.float64)
    d2 = pairwise_sq_dists(a, b)
    t2 = threshold * threshold
    recall = float(np.mean(d2.min(axis=1) <= t2))
    precision = float(np.mean(d2.min(axis=0) <= t2))
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


class EvalMetrics(NamedTuple):
    cd: float
    fscore: float

    @property
    def cd_e3(self) -> float:
        return self.cd * 1e3


def eval_metrics(Y, Y_hat, threshold: float = 0.001) -> EvalMetrics:
    """L1 CD and F-score after normalizing both clouds to the unit sphere."""
    y, _, _ = normalize_unit_sphere(np.asarray(getattr(Y, "data", Y)))
    yh, _, _ = normalize_unit_sphere(np.asarray(getattr(Y_hat, "data", Y_hat)))
    cd = chamfer_l1(y, yh).item()
    return EvalMetrics(cd, fscore(y, yh, threshold))


def write_metrics_csv(path, rows: Iterable) -> None:
    """Rows of ``(sample_id, EvalMetrics)`` to ``sample_id,cd_e3,fscore``."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "cd_e3", "fscore"])
        for sample_id, m in rows:
            w.writerow([sample_id, f"{m.cd_e3:.6f}", f"{m.fscore:.6f}"])
