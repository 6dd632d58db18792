"""Toy-scale training on synthetic scenes: cross-entropy with Adam."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ad
from .config import RunConfig
from .data import augment, synth_dataset, to_input
from .metrics import ConfusionMatrix, overall_accuracy
from .model import BANet

log = logging.getLogger(__name__)

LOG_EVERY = 10


@dataclass
class TrainResult:
    model: BANet
    losses: list[tuple[int, float]] = field(default_factory=list)  # (step, loss) every LOG_EVERY
    train_oa: float = float("nan")


def train_step(model: BANet, images: np.ndarray, labels: np.ndarray, state: ad.AdamState):
    """One forward/backward/update in training mode; returns (loss, new state)."""
    sc = model.scope(training=True, track=True)
    loss = ad.cross_entropy(model.forward(images, sc), labels)
    ad.backward(loss)
    grads = {name: node.grad for name, node in sc.tracked().items()}
    params, state = ad.adam_step(model.weights.parameters(), grads, state)
    for name, value in params.items():
        model.weights[name] = value
    sc.commit()
    return float(loss.value), state


def evaluate(model: BANet, images: np.ndarray, labels: np.ndarray, batch: int = 8) -> ConfusionMatrix:
    cm = ConfusionMatrix.empty(model.config.fusion.num_classes)
    for i in range(0, len(images), batch):
        cm.accumulate(model.predict(images[i:i + batch]), labels[i:i + batch])
    return cm


def train_toy(cfg: RunConfig, augment_data: bool = False, log_fn=None) -> TrainResult:
    """Train a fresh model on ``synth_dataset(cfg.images, cfg.size, K, cfg.seed)``.

    Batches cycle through a fixed per-seed shuffle of the set. With `steps`
    = 0 the returned weights are exactly the initialization.
    """
    mcfg = cfg.model_config()
    k = mcfg.fusion.num_classes
    model = BANet.initialize(mcfg, cfg.seed)
    data = synth_dataset(cfg.images, cfg.size, k, cfg.seed)
    rgb = np.stack([img for img, _ in data])
    labels = np.stack([lab for _, lab in data]).astype(np.int64)
    images = to_input(rgb)
    rng = np.random.default_rng(cfg.seed + 1)
    state = ad.AdamState(lr=cfg.lr)
    result = TrainResult(model)
    order = rng.permutation(len(data))
    cursor = 0
    for step in range(cfg.steps):
        idx = []
        while len(idx) < min(cfg.batch, len(data)):
            if cursor == len(order):
                order, cursor = rng.permutation(len(data)), 0
            idx.append(order[cursor])
            cursor += 1
        if augment_data:
            pairs = [augment(rgb[i], labels[i], rng) for i in idx]
            x = to_input(np.stack([p[0] for p in pairs]))
            y = np.stack([p[1] for p in pairs])
        else:
            x, y = images[idx], labels[idx]
        loss, state = train_step(model, x, y, state)
        if step % LOG_EVERY == 0 or step == cfg.steps - 1:
            result.losses.append((step, loss))
            (log_fn or log.info)(f"step {step:4d}  loss {loss:.4f}")
    result.train_oa = overall_accuracy(evaluate(model, images, labels, cfg.batch))
    return result
