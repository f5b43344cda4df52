"""Context-guided skip filter: deep features gate shallow ones."""
from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .layers import Conv2d, Module
from .tensor import Tensor, concat, reduce_max, reduce_mean, sigmoid


def channel_pool(x2: Tensor) -> tuple[Tensor, Tensor]:
    """Per-pixel mean and max across channels, each [N, 1, H, W]."""
    return reduce_mean(x2, axis=1, keepdims=True), reduce_max(x2, axis=1, keepdims=True)


class CFilter(Module):
    """``out = sigmoid(conv([avg(X2), max(X2)])) * X1 + X2``.

    X1 is the encoder skip, X2 the upsampled decoder feature. The gate is a
    single spatial map shared by all channels.
    """

    def __init__(self, rng, kernel_size: int = 7, dtype=np.float32):
        super().__init__()
        self.conv = Conv2d(2, 1, kernel_size, rng, pad=kernel_size // 2, dtype=dtype)
        self.last_gate: np.ndarray | None = None

    def gate(self, x2: Tensor) -> Tensor:
        avg, mx = channel_pool(x2)
        return sigmoid(self.conv(concat([avg, mx], axis=1)))

    def forward(self, x1: Tensor, x2: Tensor) -> Tensor:
        if x1.shape != x2.shape:
            raise ShapeError(f"cfilter inputs differ: {x1.shape} vs {x2.shape}")
        g = self.gate(x2)
        self.last_gate = g.data
        return g * x1 + x2


def plain_merge(x1: Tensor, x2: Tensor) -> Tensor:
    """Ablation stand-in for the filter: unweighted addition."""
    if x1.shape != x2.shape:
        raise ShapeError(f"merge inputs differ: {x1.shape} vs {x2.shape}")
    return x1 + x2
