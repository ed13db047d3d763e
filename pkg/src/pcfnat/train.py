"""SGD training loop with linear warmup and cosine annealing."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Callable

import numpy as np

from . import tensor as tn
from .data import SyntheticSpeakerDataset, random_crop
from .errors import ConfigError
from .model import AamSubcenterHead, ModelConfig, SpeakerModel, aam_subcenter_loss
from .tensor import Tape, Tensor


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    epochs: int = 10
    lr_init: float = 1e-4
    lr_peak: float = 0.5
    warmup_epochs: int = 1
    cosine_epochs: int = 9
    weight_decay: float = 1e-5
    momentum: float = 0.9
    crop_frames: int = 300
    subcenters: int = 3
    margin: float = 0.2
    scale: float = 32.0
    max_steps: int | None = None
    seed: int = 0

    def __post_init__(self):
        if not self.lr_peak > self.lr_init > 0:
            raise ConfigError(f"need lr_peak > lr_init > 0, got {self.lr_peak} and {self.lr_init}")
        if self.batch_size < 1 or self.epochs < 1 or self.crop_frames < 2:
            raise ConfigError("batch_size and epochs must be >= 1, crop_frames >= 2")
        if self.warmup_epochs < 0 or self.cosine_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("weight_decay must be >= 0 and momentum in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = sorted(set(d) - {f.name for f in fields(cls)})
        if unknown:
            raise ConfigError(f"unknown train config keys: {', '.join(unknown)}")
        return cls(**d)


def steps_per_epoch(n_items: int, batch_size: int) -> int:
    n = n_items // batch_size
    if n < 1:
        raise ConfigError(f"dataset of {n_items} items is smaller than one batch of {batch_size}")
    return n


def lr_schedule(step: int, cfg: TrainConfig, per_epoch: int) -> float:
    """Linear ``lr_init -> lr_peak`` over the warmup epochs, then cosine back
    to ``lr_init`` over the cosine epochs; ``lr_init`` afterwards."""
    if step < 0:
        raise ConfigError("step must be >= 0")
    warm = cfg.warmup_epochs * per_epoch
    if step < warm:
        return cfg.lr_init + (cfg.lr_peak - cfg.lr_init) * step / warm
    decay = cfg.cosine_epochs * per_epoch
    t = 1.0 if decay == 0 else min(1.0, (step - warm) / decay)
    return cfg.lr_init + 0.5 * (cfg.lr_peak - cfg.lr_init) * (1 + math.cos(math.pi * t))


class SGD:
    """Momentum SGD with L2 weight decay folded into the gradient."""

    def __init__(self, params, momentum=0.9, weight_decay=0.0):
        self.params = list(params)
        self.momentum, self.weight_decay = momentum, weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float):
        for p, v in zip(self.params, self.velocity):
            g = p.grad if p.grad is not None else 0.0
            v *= self.momentum
            v += g + self.weight_decay * p.data
            p.data -= np.asarray(lr * v, dtype=p.dtype)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def no_augmentation(batch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return batch


@dataclass
class StepRecord:
    step: int
    lr: float
    loss: float


class Trainer:
    """Owns model, head, optimizer and the data-order RNG so that a run can
    be checkpointed and resumed exactly."""

    def __init__(self, model_cfg: ModelConfig, train_cfg: TrainConfig, n_classes: int,
                 augment: Callable = no_augmentation):
        self.model_cfg, self.cfg = model_cfg, train_cfg
        self.model = SpeakerModel(model_cfg, seed=train_cfg.seed)
        self.head = AamSubcenterHead(model_cfg.embedding_dim, n_classes, train_cfg.subcenters,
                                     train_cfg.margin, train_cfg.scale,
                                     rng=np.random.default_rng([train_cfg.seed, 1]))
        self.optimizer = SGD(self.model.parameters() + self.head.parameters(),
                             train_cfg.momentum, train_cfg.weight_decay)
        self.rng = np.random.default_rng([train_cfg.seed, 2])
        self.augment = augment
        self.step = 0
        self.log: list[StepRecord] = []
        self._order = np.empty(0, dtype=np.int64)

    def _next_batch(self, dataset):
        B = self.cfg.batch_size
        per_epoch = steps_per_epoch(len(dataset), B)
        pos = (self.step % per_epoch) * B
        if pos == 0:
            self._order = self.rng.permutation(len(dataset))
        idx = self._order[pos:pos + B]
        items = [dataset[int(i)] for i in idx]
        x = np.stack([random_crop(f, self.cfg.crop_frames, self.rng) for f, _ in items])
        return self.augment(x, self.rng), np.array([lab for _, lab in items])

    def train_step(self, dataset) -> StepRecord:
        per_epoch = steps_per_epoch(len(dataset), self.cfg.batch_size)
        lr = lr_schedule(self.step, self.cfg, per_epoch)
        x, y = self._next_batch(dataset)
        self.model.train()
        self.optimizer.zero_grad()
        with Tape() as tape:
            loss = aam_subcenter_loss(self.model(Tensor(x)), y, self.head)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(f"loss became {value} at step {self.step} (lr {lr:.4g}); "
                                   "lower lr_peak or check the input features")
        tape.backward(loss)
        self.optimizer.step(lr)
        rec = StepRecord(self.step, lr, value)
        self.log.append(rec)
        self.step += 1
        return rec

    def total_steps(self, dataset) -> int:
        if self.cfg.max_steps is not None:
            return self.cfg.max_steps
        return self.cfg.epochs * steps_per_epoch(len(dataset), self.cfg.batch_size)

    def fit(self, dataset, callback: Callable[[StepRecord], None] | None = None) -> list[StepRecord]:
        with tn.precision(np.float32):
            while self.step < self.total_steps(dataset):
                rec = self.train_step(dataset)
                if callback is not None:
                    callback(rec)
        return self.log


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, dataset: SyntheticSpeakerDataset,
          augment: Callable = no_augmentation, callback=None) -> Trainer:
    """Train from scratch; returns the trainer (model, head, optimizer, log)."""
    trainer = Trainer(model_cfg, train_cfg, dataset.config.n_speakers, augment)
    trainer.fit(dataset, callback)
    return trainer
