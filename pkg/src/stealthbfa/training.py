"""Plain SGD training and mixture adversarial training.

Weights are trained in float64 starting from the dequantized codes and are
re-quantized at the end of every epoch, so the model state between epochs is
always exactly representable by a checkpoint.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np

from . import tensor as T
from .data import LabeledDataset
from .metrics import cross_entropy, evaluate
from .models import Model, forward
from .quant import quantize
from .tensor import ContractError, Tensor

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, message: str, epoch: int):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 64
    learning_rate: float = 0.1
    seed: int = 0
    adv_fraction: float = 0.0
    adv_step_size: float = 0.01
    adv_steps: int = 10
    adv_epsilon: float = 0.1
    consistency_weight: float = 0.0
    # samples used for the per-epoch curve row; 0 = whole training set
    curve_samples: int = 1000

    def __post_init__(self):
        if self.epochs < 0:
            raise ContractError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ContractError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.adv_fraction <= 1.0:
            raise ContractError(f"adv_fraction must lie in [0, 1], got {self.adv_fraction}")
        if self.adv_steps < 0 or self.adv_step_size < 0 or self.adv_epsilon < 0:
            raise ContractError("adversarial step count, step size and epsilon must be non-negative")
        if self.consistency_weight < 0:
            raise ContractError(f"consistency_weight must be >= 0, got {self.consistency_weight}")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    accuracy: float
    robustness: float


@dataclass
class TrainResult:
    model: Model
    history: List[EpochRecord] = field(default_factory=list)


def pgd_perturb(
    model: Model,
    params,
    x: np.ndarray,
    y: np.ndarray,
    epsilon: float,
    step_size: float,
    steps: int,
) -> np.ndarray:
    """L-inf projected gradient ascent on the cross-entropy, kept inside [0, 1]."""
    x_adv = x.copy()
    if epsilon == 0 or steps == 0 or step_size == 0:
        return x_adv
    frozen = [(Tensor(w.data), Tensor(b.data)) for w, b in params]
    for _ in range(steps):
        xt = Tensor(x_adv, requires_grad=True)
        T.backward(cross_entropy(forward(model, xt, frozen), y))
        x_adv = x_adv + step_size * np.sign(xt.grad)
        x_adv = np.clip(x_adv, x - epsilon, x + epsilon)
        x_adv = np.clip(x_adv, 0.0, 1.0)
    return x_adv


def _kl_consistency(clean_logits: Tensor, adv_logits: Tensor) -> Tensor:
    """Mean KL(softmax(clean) || softmax(adv))."""
    lp = T.log_softmax(clean_logits)
    lq = T.log_softmax(adv_logits)
    p = np.exp(lp.data)
    return T.mean(T.tsum(T.mul(T.add(lp, T.mul(lq, -1.0)), p), axis=1))


def train(model: Model, dataset: LabeledDataset, config: TrainConfig) -> TrainResult:
    """Mini-batch SGD on cross-entropy; adversarial mixing when adv_fraction > 0."""
    if len(dataset) == 0:
        raise ContractError("training dataset is empty")
    dataset.check_classes(model.class_count)
    rng = np.random.default_rng(config.seed)
    history: List[EpochRecord] = []
    n = len(dataset)
    curve = dataset if not config.curve_samples else dataset.head(min(config.curve_samples, n))

    for epoch in range(config.epochs):
        params = model.param_tensors(requires_grad=True)
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            x = dataset.inputs[idx]
            y = dataset.labels[idx]
            n_adv = int(round(config.adv_fraction * idx.size))
            clean_logits = None
            if n_adv:
                x_adv = pgd_perturb(
                    model, params, x[:n_adv], y[:n_adv],
                    config.adv_epsilon, config.adv_step_size, config.adv_steps,
                )
                if config.consistency_weight > 0:
                    clean_logits = forward(model, x[:n_adv], params)
                x = np.concatenate([x_adv, x[n_adv:]], axis=0)
            logits = forward(model, x, params)
            loss = cross_entropy(logits, y)
            if clean_logits is not None:
                adv_part = T.slice_rows(logits, 0, n_adv)
                loss = T.add(loss, T.mul(_kl_consistency(clean_logits, adv_part), config.consistency_weight))
            if not np.isfinite(loss.data).all():
                raise TrainingError("loss became non-finite", epoch)
            T.backward(loss)
            for w, b in params:
                w.data -= config.learning_rate * w.grad
                b.data -= config.learning_rate * b.grad
                w.grad = None
                b.grad = None
        for li, (w, b) in enumerate(params):
            if not (np.isfinite(w.data).all() and np.isfinite(b.data).all()):
                raise TrainingError(f"parameters of layer {li} became non-finite", epoch)
        model = model.with_params([quantize(w.data) for w, _ in params], [b.data.copy() for _, b in params])
        stats = evaluate(model, curve)
        if not np.isfinite(stats["loss"]):
            raise TrainingError("loss became non-finite", epoch)
        history.append(EpochRecord(epoch + 1, stats["loss"], stats["accuracy"], stats["robustness"]))
        log.info("epoch %d loss=%.4f acc=%.4f rho=%.5f", epoch + 1, stats["loss"], stats["accuracy"], stats["robustness"])
    return TrainResult(model, history)


def adversarial_train(model: Model, dataset: LabeledDataset, config: TrainConfig) -> TrainResult:
    """Protection step: :func:`train` with a share of each batch made adversarial."""
    return train(model, dataset, config)

