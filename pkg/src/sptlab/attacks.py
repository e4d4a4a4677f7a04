"""L-infinity baseline attacks (FGSM, PGD) and PGD adversarial training."""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from . import autodiff as ad
from .data import Dataset
from .errors import DimensionError, UsageError
from .models import ClassifierModel, build, train_classifier

EVAL_PGD_ITERS = 40
TRAIN_PGD_ITERS = 7


@dataclass(frozen=True)
class PerturbationConfig:
    epsilon: float = 0.3
    step_size: float = 0.01
    iterations: int = EVAL_PGD_ITERS
    random_start: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise UsageError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if not 0.0 <= self.step_size <= self.epsilon:
            raise UsageError(f"step_size must lie in [0, epsilon], got {self.step_size} with epsilon {self.epsilon}")
        if self.iterations < 1:
            raise UsageError("iterations must be >= 1")

    def as_dict(self) -> dict:
        return asdict(self)


def input_gradient(model: ClassifierModel, images: np.ndarray, onehot: np.ndarray) -> np.ndarray:
    """Gradient of the batch cross-entropy with respect to the input pixels."""
    x = ad.Tensor(images, requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.softmax_cross_entropy(model.logits(x), onehot)
    tape.backward(loss)
    return x.grad


def _check(images: np.ndarray, onehot: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    images = np.asarray(images, dtype=np.float64)
    onehot = np.asarray(onehot, dtype=np.float64)
    if images.ndim != 4 or onehot.ndim != 2 or len(images) != len(onehot):
        raise DimensionError(f"images {images.shape} and labels {onehot.shape} do not align")
    return images, onehot


def _chunks(n: int, size: int):
    return [slice(i, min(i + size, n)) for i in range(0, n, size)]


def fgsm(target: ClassifierModel, images, labels_onehot, cfg: PerturbationConfig,
         chunk: int = 500) -> np.ndarray:
    images, onehot = _check(images, labels_onehot)
    out = np.empty_like(images)
    for sl in _chunks(len(images), chunk):
        g = input_gradient(target, images[sl], onehot[sl])
        out[sl] = np.clip(images[sl] + cfg.epsilon * np.sign(g), 0.0, 1.0)
    return out


def pgd(target: ClassifierModel, images, labels_onehot, cfg: PerturbationConfig,
        chunk: int = 500) -> np.ndarray:
    """Projected signed-gradient ascent inside the epsilon ball and [0, 1]."""
    images, onehot = _check(images, labels_onehot)
    rng = np.random.default_rng(cfg.seed)
    out = np.empty_like(images)
    for sl in _chunks(len(images), chunk):
        x0 = images[sl]
        lo, hi = x0 - cfg.epsilon, x0 + cfg.epsilon
        if cfg.random_start:
            x = np.clip(x0 + rng.uniform(-cfg.epsilon, cfg.epsilon, x0.shape), 0.0, 1.0)
        else:
            x = x0.copy()
        for _ in range(cfg.iterations):
            g = input_gradient(target, x, onehot[sl])
            x = np.clip(np.clip(x + cfg.step_size * np.sign(g), lo, hi), 0.0, 1.0)
        out[sl] = x
    return out


def adversarial_train(spec_id: str, dataset: Dataset, cfg: PerturbationConfig | None = None,
                      epochs: int = 10, batch_size: int = 64, seed: int = 0, lr: float = 1e-3,
                      model_seed: int | None = None, eval_set: Dataset | None = None
                      ) -> ClassifierModel:
    """Train from scratch on PGD batches crafted against the current weights."""
    cfg = cfg or PerturbationConfig(iterations=TRAIN_PGD_ITERS)

    def hook(model, images, onehot, step):
        return pgd(model, images, onehot, replace(cfg, seed=cfg.seed + step), chunk=len(images))

    model = train_classifier(build(spec_id, model_seed), dataset, epochs, batch_size, seed, lr,
                             batch_hook=hook, eval_set=eval_set)
    model.metadata["adversarial_training"] = cfg.as_dict()
    return model
