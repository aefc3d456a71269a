"""Balanced cross-domain pair sampling, Adam, and the epoch loop."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataset import DatasetIndex, ImageCache, PairSample
from .model import SiameseModel, save_weights

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    batch_size: int = 32
    pairs_per_epoch: int = 2048
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError(f"batch_size must be even and >= 2, got {self.batch_size}")
        if self.pairs_per_epoch < self.batch_size:
            raise ValueError(f"pairs_per_epoch ({self.pairs_per_epoch}) must be >= batch_size ({self.batch_size})")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- sampler


class PairSampler:
    """Draws balanced batches of (domain-0, domain-1) pairs from known classes.

    Positive classes and negative ordered class pairs are drawn without
    replacement inside a batch, refilling from a fresh permutation when a
    batch asks for more than the pool holds.
    """

    def __init__(self, index: DatasetIndex, config: SamplerConfig, loader: Optional[Callable] = None):
        self.index = index
        self.config = config
        self.loader = loader
        pool = list(index.known_classes) if index.is_split else list(index.classes)
        self.pos_classes = index.positive_classes(pool)
        a_side = [c for c in pool if index.images(c, 0)]
        b_side = [c for c in pool if index.images(c, 1)]
        self.neg_pairs = [(a, b) for a in a_side for b in b_side if a != b]
        if not self.pos_classes or not self.neg_pairs:
            raise TrainingError("sampler needs at least two training classes with images in both domains")

    def _draw(self, rng: np.random.Generator, n_items: int, k: int) -> list[int]:
        out: list[int] = []
        while len(out) < k:
            take = min(k - len(out), n_items)
            out.extend(rng.choice(n_items, size=take, replace=False).tolist())
        return out

    def sample(self, rng: np.random.Generator) -> list[PairSample]:
        half = self.config.batch_size // 2
        idx = self.index
        pairs = []
        for ci in self._draw(rng, len(self.pos_classes), half):
            c = self.pos_classes[ci]
            a = idx.images(c, 0)[int(rng.integers(len(idx.images(c, 0))))]
            b = idx.images(c, 1)[int(rng.integers(len(idx.images(c, 1))))]
            pairs.append((a, b, 1))
        for pi in self._draw(rng, len(self.neg_pairs), half):
            ca, cb = self.neg_pairs[pi]
            a = idx.images(ca, 0)[int(rng.integers(len(idx.images(ca, 0))))]
            b = idx.images(cb, 1)[int(rng.integers(len(idx.images(cb, 1))))]
            pairs.append((a, b, 0))
        order = rng.permutation(len(pairs))
        out = []
        for i in order:
            a, b, label = pairs[i]
            ta = self.loader(a.image_id) if self.loader else None
            tb = self.loader(b.image_id) if self.loader else None
            out.append(PairSample(a.image_id, b.image_id, label, a.class_id, b.class_id, ta, tb))
        return out


def sample_batch(index: DatasetIndex, config: SamplerConfig, rng: np.random.Generator,
                 loader: Optional[Callable] = None) -> list[PairSample]:
    return PairSampler(index, config, loader).sample(rng)


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: OptimizerConfig) -> "AdamState":
        return cls(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)


def adam_step(params: Sequence[tuple[str, Tensor]], state: AdamState) -> None:
    """One bias-corrected Adam update of every ``(name, tensor)`` in ``params``."""
    for name, p in params:
        if p.grad is None:
            raise TrainingError(f"parameter {name} has no gradient")
        if p.grad.shape != p.shape:
            raise TrainingError(f"parameter {name}: gradient shape {p.grad.shape} != {p.shape}")
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    for name, p in params:
        g = p.grad.astype(np.float64)
        m = state.m.get(name)
        if m is None:
            m = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p.data = (p.data.astype(np.float64) - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(np.float32)


# ---------------------------------------------------------------- loop


@dataclass
class TrainReport:
    epoch_loss: list[float] = field(default_factory=list)
    epoch_pairs: list[int] = field(default_factory=list)
    epoch_wall_s: list[float] = field(default_factory=list)
    initial_batch_loss: Optional[float] = None
    checkpoints: list[str] = field(default_factory=list)
    steps: int = 0
    config: dict = field(default_factory=dict)

    def to_dict(self, timing: bool = False) -> dict:
        d = asdict(self)
        if not timing:
            d.pop("epoch_wall_s")
        return d

    def write(self, path, timing: bool = False) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(timing), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def batch_arrays(batch: Sequence[PairSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    a = np.stack([p.tensor_a for p in batch])
    b = np.stack([p.tensor_b for p in batch])
    y = np.array([[p.label] for p in batch], dtype=np.float32)
    return a, b, y


def train_step(model: SiameseModel, batch: Sequence[PairSample], state: AdamState) -> float:
    a, b, y = batch_arrays(batch)
    model.zero_grad()
    p = model.score(Tensor(a), Tensor(b))
    loss = ad.bce_loss(p, Tensor(y))
    value = loss.item()
    if not math.isfinite(value):
        return value
    ad.backward(loss)
    adam_step(model.trainable_named_parameters(), state)
    return value


def train(model: SiameseModel, index: DatasetIndex, sampler_cfg: SamplerConfig,
          optimizer_cfg: OptimizerConfig, epochs: int, checkpoint_dir=None,
          loader: Optional[Callable] = None, config_echo: Optional[Mapping] = None,
          state: Optional[AdamState] = None) -> TrainReport:
    """Run ``epochs`` x (pairs_per_epoch // batch_size) optimizer steps.

    Writes ``initial.rdnw``, ``epoch_XXX.rdnw`` per epoch and ``final.rdnw``
    into ``checkpoint_dir`` when one is given.
    """
    if epochs < 0:
        raise ValueError(f"epochs must be >= 0, got {epochs}")
    if loader is None:
        raise ValueError("train() needs an image loader (e.g. dataset.ImageCache)")
    report = TrainReport(config=dict(config_echo or {}))
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt is not None:
        ckpt.mkdir(parents=True, exist_ok=True)
        save_weights(model, ckpt / "initial.rdnw")
        report.checkpoints.append("initial.rdnw")
    if epochs == 0:
        return report

    sampler = PairSampler(index, sampler_cfg, loader)
    rng = np.random.default_rng(sampler_cfg.seed)
    state = state or AdamState.from_config(optimizer_cfg)
    steps_per_epoch = sampler_cfg.pairs_per_epoch // sampler_cfg.batch_size
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        losses = []
        for step in range(steps_per_epoch):
            batch = sampler.sample(rng)
            value = train_step(model, batch, state)
            if not math.isfinite(value):
                classes = sorted({p.class_a for p in batch} | {p.class_b for p in batch})
                raise TrainingError(
                    f"non-finite loss {value} at epoch {epoch} step {step} (global {report.steps}); "
                    f"batch classes {classes}")
            if report.initial_batch_loss is None:
                report.initial_batch_loss = value
            losses.append(value)
            report.steps += 1
        mean = float(np.mean(losses))
        report.epoch_loss.append(mean)
        report.epoch_pairs.append(steps_per_epoch * sampler_cfg.batch_size)
        report.epoch_wall_s.append(time.perf_counter() - t0)
        logger.info("epoch %d: mean loss %.5f (%.1fs)", epoch, mean, report.epoch_wall_s[-1])
        if ckpt is not None:
            name = f"epoch_{epoch:03d}.rdnw"
            save_weights(model, ckpt / name)
            report.checkpoints.append(name)
    if ckpt is not None:
        save_weights(model, ckpt / "final.rdnw")
        report.checkpoints.append("final.rdnw")
    return report


def make_loader(index: DatasetIndex, spec) -> ImageCache:
    return ImageCache(index, spec)
