"""Gradient-ranked iterative bit search that lowers robustness but not accuracy.

Each weight bit gets two first-order scores: the derivative of the
confidence-gap robustness and of the cross-entropy loss with respect to that
bit (chain rule through the bit's two's-complement place value). A bit is a
flip candidate only when flipping it is predicted to lower *both* quantities.
Each iteration proposes the top-n candidates of every layer, measures each
layer's proposal on held-out data, and commits the single best layer whose
cumulative loss increase stays below ``delta``.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from . import tensor as T
from .data import LabeledDataset
from .metrics import confidence_gap_robustness, cross_entropy, empirical_robustness, evaluate
from .models import Model, apply_flips, forward
from .quant import PLACE_VALUES, BitLocation, bits_of
from .tensor import ContractError

log = logging.getLogger(__name__)

TARGET_REACHED = "target_reached"
DELTA_EXCEEDED = "delta_exceeded"
MAX_ITERATIONS = "max_iterations"
NO_CANDIDATES = "no_candidates"


class AttackError(RuntimeError):
    """The attack cannot start or produced unusable gradients."""


@dataclass
class AttackConfig:
    n: int = 10
    delta: float = 0.1
    target_drop: float = 0.3
    max_iterations: int = 40
    attack_batch: int = 256
    eval_batch: int = 512
    seed: int = 0
    # "rho" ranks by |d_rho|; "product" by |d_rho * d_loss|
    rank_by: str = "rho"
    # also reject a layer if clean accuracy on the eval split drops by more than this (None = off)
    max_accuracy_drop: Optional[float] = None

    def __post_init__(self):
        if self.n < 1:
            raise ContractError(f"n must be >= 1, got {self.n}")
        if not self.delta > 0:
            raise ContractError(f"delta must be > 0, got {self.delta}")
        if not 0.0 <= self.target_drop <= 1.0:
            raise ContractError(f"target_drop must lie in [0, 1], got {self.target_drop}")
        if self.max_iterations < 0:
            raise ContractError(f"max_iterations must be >= 0, got {self.max_iterations}")
        if self.attack_batch < 1 or self.eval_batch < 1:
            raise ContractError("attack_batch and eval_batch must be >= 1")
        if self.rank_by not in ("rho", "product"):
            raise ContractError(f"rank_by must be 'rho' or 'product', got {self.rank_by!r}")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class BitGradients:
    """Per-layer arrays of shape (weights, 8); column i is bit i (7 = sign)."""

    d_rho: List[np.ndarray]
    d_loss: List[np.ndarray]
    # per-weight gradients the bit tables were expanded from
    w_rho: List[np.ndarray]
    w_loss: List[np.ndarray]


@dataclass
class TrajectoryRow:
    iteration: int
    layer_id: int
    flips: int
    robustness: float
    accuracy: float
    loss: float
    loss_increase: float


@dataclass
class AttackReport:
    committed_flips: List[BitLocation] = field(default_factory=list)
    trajectory: List[TrajectoryRow] = field(default_factory=list)
    baseline: dict = field(default_factory=dict)
    final: dict = field(default_factory=dict)
    total_weights: int = 0
    termination_reason: str = ""
    config: dict = field(default_factory=dict)

    @property
    def flip_count(self) -> int:
        return len(self.committed_flips)

    @property
    def flip_percentage(self) -> float:
        """Committed flips as a percentage of all weight bits."""
        return 100.0 * self.flip_count / (8 * self.total_weights) if self.total_weights else 0.0

    @property
    def robustness_drop(self) -> float:
        base = self.baseline.get("robustness", 0.0)
        return (base - self.final.get("robustness", base)) / base if base else 0.0


# gradients / mask / ranking -------------------------------------------------

def compute_bit_gradients(model: Model, batch: LabeledDataset) -> BitGradients:
    """Bit-level derivatives of robustness and loss on ``batch``."""
    if len(batch) == 0:
        raise ContractError("attack batch is empty")
    params = model.param_tensors(requires_grad=True)
    T.backward(confidence_gap_robustness(model, batch, params))
    w_rho = [w.grad.reshape(-1).copy() if w.grad is not None else np.zeros(w.size) for w, _ in params]

    params = model.param_tensors(requires_grad=True)
    T.backward(cross_entropy(forward(model, batch.inputs, params), batch.labels))
    w_loss = [w.grad.reshape(-1).copy() if w.grad is not None else np.zeros(w.size) for w, _ in params]

    d_rho, d_loss = [], []
    for layer_id, q in enumerate(model.weights):
        if not (np.isfinite(w_rho[layer_id]).all() and np.isfinite(w_loss[layer_id]).all()):
            raise AttackError(f"non-finite gradient in layer {layer_id}")
        place = q.scale * PLACE_VALUES
        d_rho.append(w_rho[layer_id][:, None] * place[None, :])
        d_loss.append(w_loss[layer_id][:, None] * place[None, :])
    return BitGradients(d_rho, d_loss, w_rho, w_loss)


def flip_mask(b, sign_rho, sign_loss):
    """NOT((b XOR s_rho) OR (s_rho XOR s_loss)); works on ints or uint8 arrays.

    Signs use 1 for a positive gradient and 0 for a negative one.
    """
    if isinstance(b, np.ndarray) or isinstance(sign_rho, np.ndarray) or isinstance(sign_loss, np.ndarray):
        b = np.asarray(b, dtype=np.uint8)
        sr = np.asarray(sign_rho, dtype=np.uint8)
        sl = np.asarray(sign_loss, dtype=np.uint8)
        return (1 - ((b ^ sr) | (sr ^ sl))).astype(np.uint8)
    for v in (b, sign_rho, sign_loss):
        if v not in (0, 1):
            raise ContractError(f"flip_mask arguments must be bits, got {(b, sign_rho, sign_loss)}")
    return 1 - ((b ^ sign_rho) | (sign_rho ^ sign_loss))


def layer_mask(model: Model, grads: BitGradients, layer_id: int) -> np.ndarray:
    """Eligibility table (weights, 8): mask is 1 and both gradients are nonzero."""
    dr = grads.d_rho[layer_id]
    dl = grads.d_loss[layer_id]
    bits = bits_of(model.weights[layer_id].codes.reshape(-1))
    m = flip_mask(bits, (dr > 0).astype(np.uint8), (dl > 0).astype(np.uint8))
    return (m == 1) & (dr != 0) & (dl != 0)


def rank_layer_candidates(
    layer_id: int,
    grads: BitGradients,
    model: Model,
    n: int,
    exclude: Optional[set] = None,
    rank_by: str = "rho",
) -> List[BitLocation]:
    """Top-n eligible bits of one layer by |d_rho| (ties: weight, then bit ascending)."""
    eligible = layer_mask(model, grads, layer_id)
    if exclude:
        for lid, wi, bi in exclude:
            if lid == layer_id:
                eligible[wi, bi] = False
    wi, bi = np.nonzero(eligible)
    if wi.size == 0:
        return []
    score = np.abs(grads.d_rho[layer_id][wi, bi])
    if rank_by == "product":
        score = score * np.abs(grads.d_loss[layer_id][wi, bi])
    # lexsort: last key is primary
    order = np.lexsort((bi, wi, -score))[:n]
    return [BitLocation(layer_id, int(wi[k]), int(bi[k])) for k in order]


# search ------------------------------------------------------------------

def _split_batches(attack_data: LabeledDataset, eval_data: LabeledDataset, config: AttackConfig):
    rng = np.random.default_rng(config.seed)
    a_idx = np.sort(rng.permutation(len(attack_data))[: min(config.attack_batch, len(attack_data))])
    e_idx = np.sort(rng.permutation(len(eval_data))[: min(config.eval_batch, len(eval_data))])
    return attack_data.subset(a_idx, "attack"), eval_data.subset(e_idx, "eval")


def iterative_bit_search(
    model: Model,
    attack_data: LabeledDataset,
    eval_data: LabeledDataset,
    config: AttackConfig,
    deepfool_samples: int = 0,
    deepfool_max_iter: int = 50,
    deepfool_overshoot: float = 0.02,
) -> Tuple[Model, AttackReport]:
    """Run the search; returns the attacked model and its report.

    ``deepfool_samples`` > 0 additionally reports DeepFool-based robustness
    before and after on that many eval samples.
    """
    attack_batch, eval_batch = _split_batches(attack_data, eval_data, config)
    if len(attack_batch) == 0 or len(eval_batch) == 0:
        raise ContractError("attack and evaluation data must be non-empty")
    base = evaluate(model, eval_batch)
    if not all(np.isfinite(v) for v in base.values()):
        raise AttackError(f"baseline metrics are not finite: {base}")
    if base["robustness"] <= 0:
        raise AttackError("baseline robustness is zero; there is nothing to drop")

    report = AttackReport(baseline=dict(base), total_weights=model.weight_count, config=config.as_dict())
    committed: List[BitLocation] = []
    committed_set: set = set()
    current = model
    cur_rho = base["robustness"]
    reason = MAX_ITERATIONS

    for it in range(config.max_iterations + 1):
        if (base["robustness"] - cur_rho) / base["robustness"] >= config.target_drop:
            reason = TARGET_REACHED
            break
        if it == config.max_iterations:
            reason = MAX_ITERATIONS
            break
        grads = compute_bit_gradients(current, attack_batch)
        best = None
        saw_candidates = False
        blocked = False
        for layer_id in range(current.num_param_layers):
            cands = rank_layer_candidates(layer_id, grads, current, config.n, committed_set, config.rank_by)
            if not cands:
                continue
            saw_candidates = True
            trial = apply_flips(current, cands)
            stats = evaluate(trial, eval_batch)
            increase = stats["loss"] - base["loss"]
            log.debug("iter %d layer %d: rho=%.6f loss+=%.5f acc=%.4f", it, layer_id, stats["robustness"], increase, stats["accuracy"])
            if not increase < config.delta:
                blocked = True
                continue
            if config.max_accuracy_drop is not None and base["accuracy"] - stats["accuracy"] > config.max_accuracy_drop:
                blocked = True
                continue
            if stats["robustness"] >= cur_rho:
                continue
            if best is None or stats["robustness"] < best[2]["robustness"]:
                best = (layer_id, cands, stats, trial, increase)
        if best is None:
            reason = DELTA_EXCEEDED if blocked else NO_CANDIDATES
            if saw_candidates and not blocked:
                log.info("iteration %d: no layer lowers robustness", it)
            break
        layer_id, cands, stats, current, increase = best
        committed.extend(cands)
        committed_set.update(cands)
        cur_rho = stats["robustness"]
        report.trajectory.append(
            TrajectoryRow(it, layer_id, len(cands), stats["robustness"], stats["accuracy"], stats["loss"], increase)
        )
        log.info(
            "iter %d: layer %d, %d flips (total %d), rho %.5f (%.1f%% drop), acc %.4f, loss +%.4f",
            it, layer_id, len(cands), len(committed), cur_rho,
            100 * (base["robustness"] - cur_rho) / base["robustness"], stats["accuracy"], increase,
        )

    report.committed_flips = committed
    report.termination_reason = reason
    report.final = dict(evaluate(current, eval_batch))
    if deepfool_samples:
        probe = eval_batch.head(min(deepfool_samples, len(eval_batch)))
        report.baseline["empirical_robustness"] = empirical_robustness(
            model, probe, deepfool_max_iter, deepfool_overshoot).value
        report.final["empirical_robustness"] = empirical_robustness(
            current, probe, deepfool_max_iter, deepfool_overshoot).value
    return current, report
