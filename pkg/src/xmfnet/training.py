"""Run configuration, supervised training and evaluation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterator, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, StepSchedule, Tensor
from .data import ViewConfig, access_phase, toy_view_config
from .errors import ConfigError, DivergenceError
from .losses import LossConfig, chamfer_l1, eval_metrics
from .model import ModelConfig, XMFNet, paper_config, toy_config
from .render import RenderConfig

MODES = ("supervised", "weak", "unimodal")
SCALES = ("paper", "toy")
LOG_FIELDS = ("step", "loss_type", "loss", "eval_cd_e3", "eval_fscore")


@dataclass
class RunConfig:
    scale: str = "toy"
    mode: str = "supervised"
    seed: int = 0
    lr: float = 1e-3
    batch_size: int = 16
    steps: int = 300
    lr_milestones: Sequence[int] = (25, 125)  # in epochs
    lr_gamma: float = 0.1
    eval_every: int = 50
    shapes: int = 16
    views: int = 8
    resample_min: float = 0.1
    resample_max: float = 0.4
    mix_beta: Sequence[float] = (1.0, 1.0)
    use_dcd: bool = True
    data: Optional[str] = None
    out: Optional[str] = None
    checkpoint: Optional[str] = None
    model: ModelConfig = field(default_factory=toy_config)
    loss: LossConfig = field(default_factory=LossConfig)
    render: RenderConfig = field(default_factory=lambda: RenderConfig(rho=0.15))
    view: ViewConfig = field(default_factory=toy_view_config)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.scale not in SCALES:
            raise ConfigError(f"scale must be one of {SCALES}, got {self.scale!r}")
        for name in ("batch_size", "steps", "eval_every", "shapes", "views"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1, got {getattr(self, name)}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.resample_min <= self.resample_max < 1:
            raise ConfigError(f"resample fractions must satisfy 0 <= min <= max < 1, "
                              f"got {self.resample_min}, {self.resample_max}")
        if self.model.unimodal != (self.mode == "unimodal"):
            self.model.unimodal = self.mode == "unimodal"
        self.model.validate()
        self.loss.validate()

    @classmethod
    def preset(cls, scale: str = "toy", **overrides) -> "RunConfig":
        if scale == "paper":
            shapes, views, batch = 100, 24, 128
            # 200 epochs over the 80% training split
            steps = 200 * max(1, int(0.8 * shapes * views) // batch)
            base = dict(scale="paper", model=paper_config(), batch_size=batch, steps=steps, eval_every=500,
                        shapes=shapes, views=views, render=RenderConfig(), view=ViewConfig())
        elif scale == "toy":
            base = dict(scale="toy")
        else:
            raise ConfigError(f"scale must be one of {SCALES}, got {scale!r}")
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["model"] = self.model.to_dict()
        d["loss"] = self.loss.to_dict()
        d["render"] = asdict(self.render)
        d["view"] = asdict(self.view)
        for k in ("lr_milestones", "mix_beta"):
            d[k] = list(d[k])
        d["view"]["elevations"] = list(d["view"]["elevations"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown run config keys: {unknown}")
        nested = {"model": ModelConfig.from_dict, "loss": lambda x: LossConfig(**x),
                  "render": lambda x: RenderConfig(**x), "view": lambda x: ViewConfig(**x)}
        for key, build in nested.items():
            if isinstance(d.get(key), dict):
                try:
                    d[key] = build(d[key])
                except TypeError as exc:
                    raise ConfigError(f"{key}: {exc}") from None
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None


def check_finite(loss: Tensor, step: int) -> float:
    value = loss.item()
    if not math.isfinite(value):
        raise DivergenceError(f"loss became {value} at step {step}")
    return value


def batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Endless shuffled minibatches; each epoch drops the tail that does not fill a batch."""
    if n == 0:
        raise ConfigError("cannot train on an empty dataset")
    b = min(batch_size, n)
    while True:
        perm = rng.permutation(n)
        for start in range(0, n - b + 1, b):
            yield perm[start:start + b]


def mean_loss(terms: List[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return ad.scale(total, 1.0 / len(terms))


class TrainLog:
    """CSV training log; rows are also kept in memory."""

    def __init__(self, path=None):
        self.rows: List[dict] = []
        self._fh = None
        if path is not None:
            self._fh = open(path, "w", newline="")
            self._writer = csv.DictWriter(self._fh, fieldnames=LOG_FIELDS)
            self._writer.writeheader()

    def write(self, step: int, loss_type: str, loss: float, cd_e3=None, fscore=None) -> None:
        row = dict(step=step, loss_type=loss_type, loss=f"{loss:.9g}",
                   eval_cd_e3="" if cd_e3 is None else f"{cd_e3:.9g}",
                   eval_fscore="" if fscore is None else f"{fscore:.9g}")
        self.rows.append(row)
        if self._fh is not None:
            self._writer.writerow(row)
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


@dataclass
class TrainResult:
    model: XMFNet
    log: List[dict]
    best_cd_e3: Optional[float]
    final_loss: float


def evaluate(model: XMFNet, samples: Sequence, threshold: float = 0.001) -> List[dict]:
    """Per-sample metrics; ground truth is read under the "eval" access phase."""
    rows = []
    with access_phase("eval"):
        for s in samples:
            pred = model.complete(s.partial, s.image).data
            m = eval_metrics(s.complete, pred, threshold)
            rows.append(dict(sample_id=s.id, view=int(getattr(s, "view", 0)), cd_e3=m.cd_e3, fscore=m.fscore))
    return rows


def mean_metrics(rows: Sequence[dict]) -> tuple:
    return float(np.mean([r["cd_e3"] for r in rows])), float(np.mean([r["fscore"] for r in rows]))


def per_view_breakdown(rows: Sequence[dict]) -> List[dict]:
    """Mean metrics per view index, sorted from worst to best CD."""
    views = sorted({r["view"] for r in rows})
    out = []
    for v in views:
        sel = [r for r in rows if r["view"] == v]
        cd, f = mean_metrics(sel)
        out.append(dict(view=v, n=len(sel), cd_e3=cd, fscore=f))
    return sorted(out, key=lambda r: -r["cd_e3"])


class _Tracker:
    """Periodic evaluation and best-checkpoint bookkeeping shared by both training modes."""

    def __init__(self, model: XMFNet, run: RunConfig, eval_samples, log: TrainLog, checkpoint):
        self.model, self.run, self.eval_samples, self.log = model, run, eval_samples, log
        self.checkpoint = checkpoint
        self.best = None

    def __call__(self, step: int, loss_type: str, loss: float, last: bool) -> None:
        cd = f = None
        if self.eval_samples and ((step + 1) % self.run.eval_every == 0 or last):
            cd, f = mean_metrics(evaluate(self.model, self.eval_samples, self.run.loss.fscore_threshold))
            if self.best is None or cd < self.best:
                self.best = cd
                if self.checkpoint is not None:
                    self.model.save(self.checkpoint)
        self.log.write(step, loss_type, loss, cd, f)

    def finish(self) -> None:
        # without an eval set the final weights are the ones kept
        if self.checkpoint is not None and not self.eval_samples:
            self.model.save(self.checkpoint)
        self.log.close()


def make_optimizer(model: XMFNet, run: RunConfig, n_train: int):
    opt = Adam(model.parameters(), lr=run.lr)
    schedule = StepSchedule(run.lr, run.lr_milestones, run.lr_gamma)
    steps_per_epoch = max(1, n_train // min(run.batch_size, n_train))

    def set_lr(step: int) -> None:
        opt.lr = schedule.lr_at(step // steps_per_epoch)
    return opt, set_lr


def train_supervised(train_samples: Sequence, run: RunConfig, eval_samples: Sequence = (),
                     log_path=None, checkpoint=None, model: Optional[XMFNet] = None,
                     callback: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """Minibatch Adam on the L1 Chamfer distance to the complete clouds."""
    model = model or XMFNet(run.model, seed=run.seed)
    rng = np.random.default_rng([run.seed, 1])
    opt, set_lr = make_optimizer(model, run, len(train_samples))
    tracker = _Tracker(model, run, list(eval_samples), TrainLog(log_path), checkpoint)
    it = batches(len(train_samples), run.batch_size, rng)
    value = float("nan")
    for step in range(run.steps):
        set_lr(step)
        opt.zero_grad()
        with access_phase("train"):
            terms = [chamfer_l1(s.complete, model.complete(s.partial, s.image))
                     for s in (train_samples[i] for i in next(it))]
        loss = mean_loss(terms)
        value = check_finite(loss, step)
        ad.backward(loss)
        opt.step()
        tracker(step, "cd", value, step == run.steps - 1)
        if callback is not None:
            callback(step, value)
    tracker.finish()
    return TrainResult(model, tracker.log.rows, tracker.best, value)
