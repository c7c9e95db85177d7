"""SGD with momentum and coupled weight decay; pretraining and joint training loops."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .data import Dataset, network_input, sample_pairs
from .losses import LossLog, cross_entropy_loss, hybrid_loss, one_hot
from .model import Semi3Model, forward_single, forward_triple
from .params import ParameterStore
from .tensor import GradMap

log = logging.getLogger(__name__)

PRETRAIN, JOINT = 0, 1


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, reason: str):
        super().__init__(f"training diverged at step {step}: {reason}")
        self.step = step


class TyingViolation(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 2e-4
    pretrain_lr: float | None = None
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 32
    pretrain_epochs: int = 3
    joint_epochs: int = 30
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.pretrain_lr is not None and not self.pretrain_lr > 0:
            raise ValueError("pretrain_lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError("batch_size must be even and at least 2")


def sgd_step(store: ParameterStore, grads, cfg: TrainConfig, lr: float | None = None) -> None:
    """``v <- mu*v + g + wd*p``; ``p <- p - lr*v``; once per underlying tensor.

    ``grads`` is a :class:`GradMap` or a ``name -> array`` mapping; missing
    entries count as zero.
    """
    lr = cfg.lr if lr is None else lr
    for name, p in store.unique():
        if isinstance(grads, GradMap):
            g = grads[p]
        else:
            g = grads.get(name)
            if g is None:
                g = np.zeros(p.shape)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise T.DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        v = store.momentum.get(name)
        if v is None:
            v = np.zeros(p.shape)
        v = cfg.momentum * v + g + cfg.weight_decay * p.data
        store.momentum[name] = v
        p.data = p.data - lr * v


def _seed(cfg: TrainConfig, stage: int, counter: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, stage, counter]))


def _train_indices(dataset: Dataset) -> np.ndarray:
    idx = dataset.split_indices("train")
    if idx.size == 0:
        raise ValueError("dataset has an empty training split")
    return idx


def pretrain(model: Semi3Model, dataset: Dataset, cfg: TrainConfig) -> LossLog:
    """Train each branch on its own domain with cross-entropy, then apply the share plan.

    The three branches are untied during this stage and touch disjoint
    parameters, so one summed objective per step trains them independently.
    """
    train = _train_indices(dataset)
    k = model.config.num_classes
    sources = {"sketch": dataset.sketches, "image": dataset.images, "edgemap": dataset.edgemaps}
    pre_lr = cfg.lr if cfg.pretrain_lr is None else cfg.pretrain_lr
    history = LossLog()
    step = 0
    for epoch in range(cfg.pretrain_epochs):
        order = _seed(cfg, PRETRAIN, epoch).permutation(train)
        for start in range(0, order.size, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            y = one_hot(dataset.categories[idx], k)
            try:
                with T.recording():
                    ce = {}
                    for role, arr in sources.items():
                        _, logits = forward_single(model, role, T.constant(network_input(arr[idx])))
                        ce[role] = cross_entropy_loss(logits, y)
                    total = T.add(T.add(ce["sketch"], ce["image"]), ce["edgemap"])
                    grads = T.backward(total)
            except T.NonFiniteError as exc:
                raise TrainingDiverged(step, str(exc)) from exc
            _guard(total.item(), step)
            sgd_step(model.store, grads, cfg, lr=pre_lr)
            history.append(step, (ce["sketch"].item(), ce["image"].item(), ce["edgemap"].item(),
                                  0.0, 0.0, 0.0), total.item())
            step += 1
        log.info("pretrain epoch %d: total %.4f", epoch, history.rows[-1][-1])
    model.tie()
    return history


def train_joint(model: Semi3Model, dataset: Dataset, cfg: TrainConfig,
                on_epoch: Callable[[int, Semi3Model], None] | None = None) -> LossLog:
    """Joint training on 1:1 positive/negative pair batches with the hybrid objective."""
    if not model.tied:
        raise TyingViolation("train_joint requires a tied model; run pretrain or tie() first")
    train = _train_indices(dataset)
    steps_per_epoch = math.ceil(train.size / cfg.batch_size)
    history = LossLog()
    step = 0
    for epoch in range(cfg.joint_epochs):
        for _ in range(steps_per_epoch):
            seed = np.random.SeedSequence([cfg.seed, JOINT, step])
            batch = sample_pairs(dataset, cfg.batch_size, seed)
            try:
                with T.recording():
                    S, I, E = (T.constant(network_input(a)) for a in (batch.sketches, batch.images, batch.edgemaps))
                    out = forward_triple(model, S, I, E)
                    total, comps = hybrid_loss(
                        out, (batch.sketch_categories, batch.image_categories, batch.image_categories),
                        batch.l_sim, model.weights)
                    grads = T.backward(total)
            except T.NonFiniteError as exc:
                raise TrainingDiverged(step, str(exc)) from exc
            _guard(total.item(), step)
            sgd_step(model.store, grads, cfg)
            history.append(step, comps.values(), total.item())
            step += 1
        report = model.check_tied()
        if not report.ok:
            raise TyingViolation(f"share groups diverged after epoch {epoch}: {report.failed()}")
        log.info("joint epoch %d: total %.4f", epoch, history.rows[-1][-1])
        if on_epoch is not None:
            on_epoch(epoch, model)
    return history


def _guard(value: float, step: int) -> None:
    if not math.isfinite(value):
        raise TrainingDiverged(step, f"loss is {value}")
