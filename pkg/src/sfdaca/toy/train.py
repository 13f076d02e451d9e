"""Supervised source-domain pretraining for the toy detector."""

from __future__ import annotations

import logging

import numpy as np

from ..core.boxes import LabeledImage
from ..core.optim import Adam
from ..evalkit import evaluate
from .detector import ToyDetector

log = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    pass


def pretrain(detector: ToyDetector, source: list[LabeledImage], epochs: int, lr: float = 3e-3,
             batch_size: int = 16, seed: int = 0, eval_split: list[LabeledImage] | None = None):
    """Train on labeled source images; returns ``(detector, source_mAP)``.

    The detector is trained in place. ``source_mAP`` is measured on
    ``eval_split`` when given, otherwise on the training images. With
    ``epochs == 0`` the parameters are left untouched.
    """
    rng = np.random.default_rng(seed)
    opt = Adam(detector.parameters, lr=lr)
    usable = [d for d in source if d.labels]
    n_batches = max(1, len(usable) // batch_size)
    total_steps = max(1, epochs * n_batches)
    step = 0
    for ep in range(epochs):
        order = rng.permutation(len(usable))
        running = []
        for b in range(n_batches):
            idx = order[b * batch_size:(b + 1) * batch_size]
            # cosine decay to 5% of the base rate
            opt.lr = lr * (0.05 + 0.95 * 0.5 * (1 + np.cos(np.pi * step / total_steps)))
            images = np.stack([usable[i].image for i in idx])
            loss, grads = detector.loss_and_grad_batch(images, [usable[i].labels for i in idx])
            if not np.isfinite(loss):
                raise NonFiniteLossError(f"non-finite pretraining loss at epoch {ep}, batch {b}")
            opt.step(grads)
            running.append(loss)
            step += 1
        log.info("pretrain epoch %d loss %.4f", ep, float(np.mean(running)) if running else float("nan"))
    split = eval_split if eval_split is not None else source
    return detector, evaluate(detector, split).mAP
