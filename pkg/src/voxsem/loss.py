"""Cross-entropy and classwise entropy losses with analytic logit gradients.

All functions accept probability volumes with the class axis first, shape
(K, ...). Ground truth uses 0 for empty and 255 for ignored voxels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import DomainError, ShapeError
from .grid import IGNORE, ProbVolume

LOG_CLAMP = 1e-12


@dataclass
class LossReport:
    value: float
    grad_logits: np.ndarray
    selected_classes: List[int] = field(default_factory=list)
    per_class_entropy: Dict[int, float] = field(default_factory=dict)


@dataclass
class CombinedLoss:
    value: float
    grad_stage1: np.ndarray
    grad_stage2: np.ndarray
    terms: Dict[str, float]


def _labels(gt) -> np.ndarray:
    return np.asarray(getattr(gt, "labels", gt))


def _check(probs: ProbVolume, gt: np.ndarray) -> None:
    if probs.logits.shape[1:] != gt.shape:
        raise ShapeError(f"probabilities {probs.logits.shape[1:]} and labels {gt.shape} are misaligned")


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Chain a gradient w.r.t. softmax outputs back onto logits (class axis 0)."""
    return probs * (grad_probs - np.sum(grad_probs * probs, axis=0, keepdims=True))


def entropy(p) -> float:
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0):
        raise DomainError(f"probability vector has negative components: {p}")
    return float(-np.sum(p * np.log(np.maximum(p, LOG_CLAMP))))


def _membership(gt: np.ndarray, K: int) -> np.ndarray:
    """(N, K) one-hot class membership; ignore and out-of-range labels get no row bit."""
    return (gt.reshape(-1)[:, None] == np.arange(K)[None, :]).astype(np.float64)


def select_classes(probs: ProbVolume, gt) -> Tuple[List[int], Dict[int, np.ndarray], Dict[int, int]]:
    """Classes that enter the entropy term, with their mean probability vectors.

    Class c > 0 is selected when it has ground-truth voxels and its mean
    predicted distribution has a strict maximum at c.
    """
    gt = _labels(gt)
    _check(probs, gt)
    K = probs.num_classes
    onehot = _membership(gt, K)
    n_per_class = onehot.sum(axis=0)
    sums = probs.probs.reshape(K, -1) @ onehot  # column c: summed distribution of class c
    present = n_per_class > 0
    mean = sums / np.where(present, n_per_class, 1.0)[None, :]
    rivals = np.where(np.eye(K, dtype=bool), -np.inf, mean).max(axis=0)
    strict = present & (np.diag(mean) > rivals)
    selected, means, counts = [], {}, {}
    for c in np.flatnonzero(present[1:]) + 1:
        c = int(c)
        means[c] = mean[:, c]
        counts[c] = int(n_per_class[c])
        if strict[c]:
            selected.append(c)
    return selected, means, counts


def classwise_entropy_loss(probs: ProbVolume, gt) -> LossReport:
    gt = _labels(gt)
    selected, means, counts = select_classes(probs, gt)
    if not selected:
        return LossReport(0.0, np.zeros_like(probs.logits), [], {})
    K = probs.num_classes
    per_class = {}
    coeff = np.zeros((K, K))
    for c in selected:
        pbar = means[c]
        per_class[c] = entropy(pbar)
        # d entropy / d mean, spread evenly over the class members
        coeff[:, c] = -(np.log(np.maximum(pbar, LOG_CLAMP)) + 1.0) / (len(selected) * counts[c])
    grad_p = (coeff @ _membership(gt, K).T).reshape(probs.probs.shape)
    value = sum(per_class.values()) / len(selected)
    return LossReport(float(value), softmax_backward(probs.probs, grad_p), selected, per_class)


def cross_entropy_loss(probs: ProbVolume, gt, class_weights: Optional[np.ndarray] = None) -> LossReport:
    """Weighted mean of -log p[gt] over non-ignored voxels."""
    gt = _labels(gt)
    _check(probs, gt)
    K = probs.num_classes
    weights = np.ones(K) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    if weights.shape != (K,) or np.any(weights < 0):
        raise ValueError(f"class_weights must be {K} non-negative values")
    valid = gt != IGNORE
    target = np.where(valid, gt, 0).astype(np.int64)
    w = np.where(valid, weights[target], 0.0)
    total = w.sum()
    if total == 0:
        return LossReport(0.0, np.zeros_like(probs.logits))
    p_true = np.take_along_axis(probs.probs, target[None], axis=0)[0]
    value = float(np.sum(w * -np.log(np.maximum(p_true, LOG_CLAMP))) / total)
    grad = probs.probs.copy()
    np.put_along_axis(grad, target[None], np.take_along_axis(grad, target[None], axis=0) - 1.0, axis=0)
    grad *= (w / total)[None]
    return LossReport(value, grad)


def combined_loss(stage1, stage2, lambda1: float, lambda2: float, class_weights=None) -> CombinedLoss:
    """Sum of per-stage cross-entropy plus weighted classwise entropy terms.

    ``stage1``/``stage2`` are (ProbVolume, ground truth) pairs.
    """
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError("loss weights must be non-negative")
    ce1 = cross_entropy_loss(*stage1, class_weights=class_weights)
    ent1 = classwise_entropy_loss(*stage1)
    ce2 = cross_entropy_loss(*stage2, class_weights=class_weights)
    ent2 = classwise_entropy_loss(*stage2)
    value = ce1.value + lambda1 * ent1.value + ce2.value + lambda2 * ent2.value
    return CombinedLoss(
        value=value,
        grad_stage1=ce1.grad_logits + lambda1 * ent1.grad_logits,
        grad_stage2=ce2.grad_logits + lambda2 * ent2.grad_logits,
        terms={"ce1": ce1.value, "ent1": ent1.value, "ce2": ce2.value, "ent2": ent2.value},
    )


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute difference scaled by the largest gradient magnitude."""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def numeric_logit_grad(fn, logits: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central finite differences of ``fn(logits) -> float``."""
    grad = np.zeros_like(logits)
    flat = logits.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn(logits)
        flat[i] = orig - h
        down = fn(logits)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def gradcheck_losses(seed: int, num_classes: int, num_voxels: int, h: float = 1e-4) -> Dict[str, float]:
    """Relative error of both loss gradients on one random instance."""
    rng = np.random.default_rng(seed)
    logits = rng.normal(scale=2.0, size=(num_classes, num_voxels))
    gt = rng.integers(0, num_classes, size=num_voxels)
    # bias logits toward ground truth so several classes enter the entropy term
    logits[gt, np.arange(num_voxels)] += 2.5
    gt[rng.random(num_voxels) < 0.1] = IGNORE

    out = {}
    for name, fn in (("entropy", classwise_entropy_loss), ("cross_entropy", cross_entropy_loss)):
        analytic = fn(ProbVolume(logits), gt).grad_logits
        numeric = numeric_logit_grad(lambda z: fn(ProbVolume(z), gt).value, logits.copy(), h)
        out[name] = relative_error(analytic, numeric)
    return out
