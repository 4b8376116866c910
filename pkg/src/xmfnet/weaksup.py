"""Weakly-supervised training: resampled partials, cross-modal mixup and alternating point/image steps."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import access_phase
from .errors import ConfigError
from .losses import chamfer_l1, chamfer_weighted, dcd
from .model import XMFNet
from .render import Camera, RenderConfig, RenderTarget, render_loss
from .training import RunConfig, TrainLog, TrainResult, _Tracker, batches, check_finite, make_optimizer, mean_loss


def resample_partial(X, rng: np.random.Generator, r_min: float = 0.1, r_max: float = 0.4,
                     r: Optional[float] = None, direction=None) -> np.ndarray:
    """Cut away the fraction ``r`` of points lying furthest along a direction, then refill to N.

    Survivors keep their order; the refill draws survivors with replacement.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if r is None:
        r = rng.uniform(r_min, r_max)
    if direction is None:
        direction = rng.normal(size=3)
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    n_drop = min(int(round(r * n)), n - 1)
    if n_drop == 0:
        return X.copy()
    order = np.argsort(-(X @ d), kind="stable")
    keep = np.sort(order[n_drop:])
    survivors = X[keep]
    refill = survivors[rng.integers(0, len(survivors), n - len(survivors))]
    return np.concatenate([survivors, refill], axis=0)


@dataclass
class MixedSample:
    cloud: np.ndarray
    pseudo_gt: np.ndarray
    image: np.ndarray
    gamma: float


def mixup(a: Tuple[np.ndarray, np.ndarray, np.ndarray], b: Tuple[np.ndarray, np.ndarray, np.ndarray],
          gamma: float, rng: np.random.Generator) -> MixedSample:
    """Blend two ``(cloud, pseudo_gt, image)`` triples with coefficient ``gamma``.

    ``floor(γN)`` random points come from the first cloud and the rest from the
    second; pseudo ground truth uses the same index sets and images are blended
    pixelwise with the same ``γ``.
    """
    cloud_a, gt_a, img_a = a
    cloud_b, gt_b, img_b = b
    n = cloud_a.shape[0]
    if cloud_b.shape[0] != n or gt_a.shape[0] != n or gt_b.shape[0] != n:
        raise ConfigError("mixup needs clouds of equal size")
    if np.shape(img_a) != np.shape(img_b):
        raise ConfigError(f"mixup needs images of equal size, got {np.shape(img_a)} and {np.shape(img_b)}")
    if not 0.0 <= gamma <= 1.0:
        raise ConfigError(f"mix coefficient must lie in [0, 1], got {gamma}")
    k = int(np.floor(gamma * n))
    ia = np.sort(rng.choice(n, k, replace=False))
    ib = np.sort(rng.choice(n, n - k, replace=False))
    cloud = np.concatenate([cloud_a[ia], cloud_b[ib]])
    gt = np.concatenate([gt_a[ia], gt_b[ib]])
    image = gamma * np.asarray(img_a) + (1.0 - gamma) * np.asarray(img_b)
    return MixedSample(cloud, gt, image, float(gamma))


@dataclass
class WeakBatch:
    inputs: List[np.ndarray]
    pseudo_gt: List[np.ndarray]
    images: List[np.ndarray]
    mix_coeffs: List[float]
    # un-mixed, un-resampled partials with their true views, for the rendering term
    originals: List[np.ndarray] = field(default_factory=list)
    original_images: List[np.ndarray] = field(default_factory=list)
    targets: List[RenderTarget] = field(default_factory=list)
    cameras: List[Camera] = field(default_factory=list)


def make_weak_batch(samples: Sequence, rng: np.random.Generator, run: RunConfig,
                    target_cache: Optional[Dict[str, RenderTarget]] = None) -> WeakBatch:
    """Resample and mix a minibatch; the first half keeps its originals for rendering."""
    target_cache = {} if target_cache is None else target_cache
    partials = [np.asarray(s.partial) for s in samples]
    images = [np.asarray(s.image) for s in samples]
    resampled = [resample_partial(p, rng, run.resample_min, run.resample_max) for p in partials]
    n = len(samples)
    order = rng.permutation(n)
    # pair each sample with the next one along a random cycle so no sample mixes with itself
    partner = np.empty(n, dtype=int)
    partner[order] = np.roll(order, -1)
    batch = WeakBatch([], [], [], [])
    for i in range(n):
        j = partner[i]
        gamma = float(rng.beta(*run.mix_beta))
        m = mixup((resampled[i], partials[i], images[i]), (resampled[j], partials[j], images[j]), gamma, rng)
        batch.inputs.append(m.cloud)
        batch.pseudo_gt.append(m.pseudo_gt)
        batch.images.append(m.image)
        batch.mix_coeffs.append(m.gamma)
    for s, p, img in list(zip(samples, partials, images))[: max(1, n // 2)]:
        if s.id not in target_cache:
            target_cache[s.id] = RenderTarget.from_image(img, run.render)
        batch.originals.append(p)
        batch.original_images.append(img)
        batch.targets.append(target_cache[s.id])
        batch.cameras.append(s.camera)
    return batch


def _apply(model: XMFNet, loss: Tensor, opt, step: int) -> float:
    value = check_finite(loss, step)
    opt.zero_grad()
    ad.backward(loss)
    opt.step()
    return value


def step_pc(model: XMFNet, batch: WeakBatch, beta: float, opt, step: int = 0) -> float:
    """One Adam step on the weighted Chamfer distance to the pseudo ground truth."""
    terms = [chamfer_weighted(gt, model.complete(x, img), beta)
             for x, gt, img in zip(batch.inputs, batch.pseudo_gt, batch.images)]
    return _apply(model, mean_loss(terms), opt, step)


def image_loss(model: XMFNet, batch: WeakBatch, alpha: float, lam: float, render_cfg: RenderConfig,
               use_dcd: bool = True) -> Tensor:
    """DCD over the full minibatch plus λ times the rendering loss over the un-mixed half."""
    point_term = (lambda gt, y: dcd(gt, y, alpha)) if use_dcd else chamfer_l1
    pc = mean_loss([point_term(gt, model.complete(x, img))
                    for x, gt, img in zip(batch.inputs, batch.pseudo_gt, batch.images)])
    if lam == 0:
        return pc
    rend = mean_loss([render_loss(model.complete(x, img), target, cam, render_cfg)
                      for x, img, target, cam in zip(batch.originals, batch.original_images,
                                                     batch.targets, batch.cameras)])
    return pc + ad.scale(rend, lam)


def step_img(model: XMFNet, batch: WeakBatch, alpha: float, lam: float, opt, render_cfg: RenderConfig,
             use_dcd: bool = True, step: int = 0) -> float:
    return _apply(model, image_loss(model, batch, alpha, lam, render_cfg, use_dcd), opt, step)


def loss_type_at(step: int) -> str:
    return "pc" if step % 2 == 0 else "img"


def train_weak(train_samples: Sequence, run: RunConfig, eval_samples: Sequence = (), log_path=None,
               checkpoint=None, model: Optional[XMFNet] = None) -> TrainResult:
    """Alternate point-cloud and image steps; complete clouds are only read for evaluation."""
    if len(train_samples) == 0:
        raise ConfigError("weakly-supervised training needs a non-empty training set")
    model = model or XMFNet(run.model, seed=run.seed)
    rng = np.random.default_rng([run.seed, 2])
    opt, set_lr = make_optimizer(model, run, len(train_samples))
    tracker = _Tracker(model, run, list(eval_samples), TrainLog(log_path), checkpoint)
    it = batches(len(train_samples), run.batch_size, rng)
    cache: Dict[str, RenderTarget] = {}
    value = float("nan")
    for step in range(run.steps):
        set_lr(step)
        with access_phase("train"):
            batch = make_weak_batch([train_samples[i] for i in next(it)], rng, run, cache)
        kind = loss_type_at(step)
        if kind == "pc":
            value = step_pc(model, batch, run.loss.beta, opt, step)
        else:
            value = step_img(model, batch, run.loss.alpha, run.loss.lam, opt, run.render, run.use_dcd, step)
        tracker(step, kind, value, step == run.steps - 1)
    tracker.finish()
    return TrainResult(model, tracker.log.rows, tracker.best, value)
