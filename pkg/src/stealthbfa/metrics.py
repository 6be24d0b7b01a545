"""Loss, accuracy, robustness metrics and the DeepFool perturbation search."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .data import LabeledDataset
from .models import Model, forward
from .tensor import ContractError, Tensor


class RobustnessError(RuntimeError):
    """Empirical robustness could not be measured."""


@dataclass
class PerturbationResult:
    perturbation: np.ndarray
    iterations: int
    succeeded: bool
    original_label: int
    new_label: int

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.perturbation))


@dataclass
class EmpiricalRobustness:
    value: float
    successes: int
    failures: int


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    n, classes = logits.shape
    if labels.shape != (n,):
        raise ContractError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ContractError(f"labels must lie in [0, {classes}), got range [{labels.min()}, {labels.max()}]")
    return T.mul(T.mean(T.take_rows(T.log_softmax(logits), labels)), -1.0)


def _require_nonempty(dataset: LabeledDataset) -> None:
    if len(dataset) == 0:
        raise ContractError("dataset is empty")


def _logits(model: Model, inputs: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    out = []
    with T.no_grad():
        for start in range(0, inputs.shape[0], batch_size):
            out.append(forward(model, inputs[start:start + batch_size]).data)
    return np.concatenate(out, axis=0)


def accuracy(model: Model, dataset: LabeledDataset) -> float:
    _require_nonempty(dataset)
    pred = np.argmax(_logits(model, dataset.inputs), axis=1)
    return float(np.mean(pred == dataset.labels))


def mean_loss(model: Model, dataset: LabeledDataset) -> float:
    _require_nonempty(dataset)
    logits = _logits(model, dataset.inputs)
    with T.no_grad():
        return cross_entropy(Tensor(logits), dataset.labels).item()


def input_norms(inputs: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(inputs.reshape(inputs.shape[0], -1), axis=1)
    if np.any(norms == 0):
        bad = int(np.flatnonzero(norms == 0)[0])
        raise ContractError(f"sample {bad} has zero L2 norm; robustness is undefined")
    return norms


def confidence_gap(logits: Tensor, norms: np.ndarray) -> Tensor:
    """Mean of (p_top1 - p_top2) / ||x||; the top-two class indices are held fixed."""
    probs = T.softmax(logits)
    order = np.argsort(-probs.data, axis=1, kind="stable")
    top1 = T.take_rows(probs, order[:, 0])
    top2 = T.take_rows(probs, order[:, 1])
    return T.mean(T.mul(T.add(top1, T.mul(top2, -1.0)), 1.0 / norms))


def confidence_gap_robustness(
    model: Model,
    dataset: LabeledDataset,
    params: Optional[Sequence[Tuple[Tensor, Tensor]]] = None,
) -> Tensor:
    """Differentiable confidence-gap robustness over the whole dataset."""
    _require_nonempty(dataset)
    norms = input_norms(dataset.inputs)
    return confidence_gap(forward(model, dataset.inputs, params), norms)


def robustness_value(model: Model, dataset: LabeledDataset) -> float:
    _require_nonempty(dataset)
    norms = input_norms(dataset.inputs)
    logits = _logits(model, dataset.inputs)
    with T.no_grad():
        return confidence_gap(Tensor(logits), norms).item()


def evaluate(model: Model, dataset: LabeledDataset) -> dict:
    """Accuracy, mean loss and confidence-gap robustness from one forward pass."""
    _require_nonempty(dataset)
    norms = input_norms(dataset.inputs)
    logits = _logits(model, dataset.inputs)
    with T.no_grad():
        loss = cross_entropy(Tensor(logits), dataset.labels).item()
        rho = confidence_gap(Tensor(logits), norms).item()
    acc = float(np.mean(np.argmax(logits, axis=1) == dataset.labels))
    return {"accuracy": acc, "loss": loss, "robustness": rho}


# DeepFool ------------------------------------------------------------------

def _logits_and_jacobian(model: Model, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Logits (B, K) and d logits / d input (B, K, *input) for a batch."""
    b = x.shape[0]
    k = model.class_count
    rep = Tensor(np.repeat(x, k, axis=0), requires_grad=True)
    logits = forward(model, rep)
    # row (i, j) of the repeated batch selects logit j of sample i
    pick = T.take_rows(logits, np.tile(np.arange(k), b))
    T.backward(T.tsum(pick))
    jac = rep.grad.reshape((b, k) + x.shape[1:])
    return logits.data[::k], jac


def deepfool_batch(
    model: Model,
    inputs: np.ndarray,
    max_iter: int = 50,
    overshoot: float = 0.02,
) -> list:
    """Run DeepFool independently on each sample of ``inputs``.

    Samples are linearized together for speed; each stops updating as soon as
    its own label changes.
    """
    if max_iter < 1:
        raise ContractError(f"max_iter must be >= 1, got {max_iter}")
    x0 = np.asarray(inputs, dtype=np.float64)
    n = x0.shape[0]
    flat_dim = int(np.prod(x0.shape[1:]))
    with T.no_grad():
        labels0 = np.argmax(forward(model, x0).data, axis=1)
    r_tot = np.zeros_like(x0)
    active = np.ones(n, dtype=bool)
    succeeded = np.zeros(n, dtype=bool)
    stuck = np.zeros(n, dtype=bool)
    iterations = np.zeros(n, dtype=np.int64)
    new_labels = labels0.copy()

    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        x = x0[idx] + (1.0 + overshoot) * r_tot[idx]
        logits, jac = _logits_and_jacobian(model, x)
        cur = labels0[idx]
        rows = np.arange(idx.size)
        jac = jac.reshape(idx.size, model.class_count, flat_dim)
        w = jac - jac[rows, cur][:, None, :]
        f = logits - logits[rows, cur][:, None]
        wnorm = np.linalg.norm(w, axis=2)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.abs(f) / wnorm
        ratio[rows, cur] = np.inf
        ratio[wnorm == 0] = np.inf
        best = np.argmin(ratio, axis=1)
        best_ratio = ratio[rows, best]
        dead = ~np.isfinite(best_ratio)
        if np.any(dead):
            stuck[idx[dead]] = True
            active[idx[dead]] = False
        live = ~dead
        li = idx[live]
        wk = w[rows[live], best[live]]
        wn = wnorm[rows[live], best[live]]
        # |f| / ||w||^2 * w lands on the linearized boundary; the overshoot carries it across.
        # The 1e-8 floor only matters for points sitting exactly on a boundary (f == 0).
        step = (np.maximum(best_ratio[live], 1e-8) / wn)[:, None] * wk
        r_tot[li] += step.reshape((li.size,) + x0.shape[1:])
        iterations[li] += 1
        with T.no_grad():
            lab = np.argmax(forward(model, x0[li] + (1.0 + overshoot) * r_tot[li]).data, axis=1)
        changed = lab != labels0[li]
        new_labels[li] = lab
        succeeded[li[changed]] = True
        active[li[changed]] = False

    results = []
    for i in range(n):
        r = (1.0 + overshoot) * r_tot[i]
        results.append(
            PerturbationResult(
                perturbation=r,
                iterations=int(iterations[i]),
                succeeded=bool(succeeded[i]),
                original_label=int(labels0[i]),
                new_label=int(new_labels[i]),
            )
        )
    return results


def deepfool(model: Model, x: np.ndarray, max_iter: int = 50, overshoot: float = 0.02) -> PerturbationResult:
    """Minimal L2 perturbation that changes the predicted label of one input."""
    x = np.asarray(x, dtype=np.float64)
    return deepfool_batch(model, x[None], max_iter, overshoot)[0]


def empirical_robustness(
    model: Model,
    dataset: LabeledDataset,
    max_iter: int = 50,
    overshoot: float = 0.02,
    batch_size: int = 128,
) -> EmpiricalRobustness:
    """Mean ||r|| / ||x|| over samples DeepFool manages to flip."""
    _require_nonempty(dataset)
    norms = input_norms(dataset.inputs)
    ratios = []
    failures = 0
    for start in range(0, len(dataset), batch_size):
        chunk = dataset.inputs[start:start + batch_size]
        for j, res in enumerate(deepfool_batch(model, chunk, max_iter, overshoot)):
            if res.succeeded:
                ratios.append(res.norm / norms[start + j])
            else:
                failures += 1
    if not ratios:
        raise RobustnessError(
            f"DeepFool failed on all {len(dataset)} samples; increase max_iter (currently {max_iter})"
        )
    return EmpiricalRobustness(float(np.mean(ratios)), len(ratios), failures)
