"""Weighted BCE, L2 penalty, and learned (Gaussian-likelihood) task weighting."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import ConfigError, DomainError, ShapeError
from .layers import LayerParams, Module, parameter
from .tensor import Tensor, clamp, exp, log, reduce_mean, reduce_sum

EPS = 1e-7


@dataclass
class LossConfig:
    alpha: float = 1.5
    eps: float = EPS
    learn_weights: bool = True
    s1_init: float = 0.0
    s2_init: float = 0.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if not 0 < self.eps < 0.5:
            raise ConfigError("eps must lie in (0, 0.5)")


def road_weight(target: np.ndarray) -> np.ndarray:
    """Per-sample ``1 - road_pixels / total_pixels``, shaped to broadcast over the sample."""
    t = np.asarray(target, dtype=bool)
    n = t.shape[0]
    frac = t.reshape(n, -1).mean(axis=1)
    return (1.0 - frac).reshape((n,) + (1,) * (t.ndim - 1))


def wbce(pred: Tensor, target: np.ndarray, alpha: float = 1.5, eps: float = EPS) -> Tensor:
    """``-(1/N) sum(alpha*w*g*log p + (1-g)*log(1-p))`` over all pixels.

    ``w`` is computed per sample from its own mask; ``p`` is clamped to
    ``[eps, 1-eps]``.
    """
    target = np.asarray(target)
    if pred.size == 0:
        raise DomainError("wbce of an empty tensor")
    if target.shape != pred.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    g = target.astype(pred.dtype)
    pos = (alpha * road_weight(target) * g).astype(pred.dtype)
    p = clamp(pred, eps, 1.0 - eps)
    per_pixel = log(p) * pos + log(1.0 - p) * (1.0 - g)
    return -reduce_mean(per_pixel)


def l2_penalty(registry: Iterable[LayerParams]) -> Tensor:
    """``0.5 * sum ||w||^2`` over weight tensors (biases and norm affines excluded)."""
    total = None
    for lp in registry:
        if not lp.name.endswith(".weight"):
            continue
        term = reduce_sum(lp.tensor * lp.tensor)
        total = term if total is None else total + term
    if total is None:
        return Tensor(np.zeros(()))
    return total * 0.5


def total_loss(l_wbce: Tensor, l_l2: Tensor, s1: Tensor, s2: Tensor) -> Tensor:
    """``exp(-s1)*L_wbce + exp(-s2)*L_2 + s1 + s2``."""
    return exp(-s1) * l_wbce + exp(-s2) * l_l2 + s1 + s2


class TaskWeights(Module):
    """Learnable log-variances; effective weights are ``exp(-s)``."""

    def __init__(self, cfg: LossConfig, dtype=np.float32):
        super().__init__()
        self.s1 = parameter(np.array(cfg.s1_init, dtype=dtype))
        self.s2 = parameter(np.array(cfg.s2_init, dtype=dtype))
        if not cfg.learn_weights:
            self.s1.requires_grad = False
            self.s2.requires_grad = False

    def effective(self) -> tuple[float, float]:
        return float(np.exp(-self.s1.data)), float(np.exp(-self.s2.data))


class RoadLoss:
    """Full objective bound to a config and a set of task weights."""

    def __init__(self, cfg: LossConfig, weights: TaskWeights):
        self.cfg = cfg
        self.weights = weights

    def __call__(self, pred: Tensor, target: np.ndarray, registry) -> tuple[Tensor, Tensor, Tensor]:
        lw = wbce(pred, target, self.cfg.alpha, self.cfg.eps)
        l2 = l2_penalty(registry)
        return total_loss(lw, l2, self.weights.s1, self.weights.s2), lw, l2
