"""Module containers and the convolution / normalisation building blocks."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import kernels
from .errors import DomainError, ShapeError
from .tensor import Tensor, make_result, relu


@dataclass(frozen=True)
class LayerParams:
    """A learnable tensor and the dotted name that identifies it in checkpoints."""

    name: str
    tensor: Tensor


def make_rng(seed: int) -> np.random.Generator:
    """Philox4x64-10 keyed by ``seed``; the one generator family used everywhere."""
    return np.random.Generator(np.random.Philox(key=int(seed)))


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def trunc_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    return np.clip(rng.normal(0.0, std, size=shape), -2 * std, 2 * std).astype(dtype)


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


class Module:
    """Minimal parameter container.

    Assigning a trainable tensor or a sub-module to an attribute registers it
    under that attribute name. Consumers that need a stable order (the
    parameter registry, checkpoints) sort the dotted names.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        t = Tensor(value)
        self._buffers[name] = t
        object.__setattr__(self, name, t)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, m in self._modules.items():
            yield from m.named_buffers(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for m in self._modules.values():
            yield from m.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover
        raise NotImplementedError


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        for i, layer in enumerate(layers):
            setattr(self, str(i), layer)
        object.__setattr__(self, "layers", list(layers))

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class ReLU(Module):
    def forward(self, x):
        return relu(x)


class Identity(Module):
    def forward(self, x):
        return x


# ------------------------------------------------------------ functional


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of an NCHW batch with a [C_out, C_in, k, k] kernel, zero padded."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    c_out, c_in, k, k2 = w.shape
    if k != k2:
        raise ShapeError("conv2d supports square kernels only")
    if c != c_in:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, kernel expects {c_in}")
    hp, wp = h + 2 * pad, wd + 2 * pad
    if k > hp or k > wp:
        raise ShapeError(f"kernel {k} larger than padded input {hp}x{wp}")
    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    cols6 = kernels.im2col(xp, k, stride)
    _, ho, wo = cols6.shape[:3]
    cols = cols6.reshape(n * ho * wo, c * k * k)
    w2 = w.data.reshape(c_out, -1)
    out = cols @ w2.T
    if b is not None:
        out = out + b.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2))

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        gx = gw = gb = None
        if x.requires_grad:
            dcols = (g2 @ w2).reshape(n, ho, wo, c, k, k)
            gxp = kernels.col2im(dcols, hp, wp, stride)
            gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        if w.requires_grad:
            gw = (g2.T @ cols).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=0)
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return make_result(out, parents, bw, "conv2d")


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 2) -> Tensor:
    """Adjoint of an unpadded conv2d; kernel is [C_in, C_out, k, k], output (H-1)*s+k."""
    n, c, h, wd = x.shape
    c_in, c_out, k, _ = w.shape
    if c != c_in:
        raise ShapeError(f"conv_transpose2d channel mismatch: input has {c}, kernel expects {c_in}")
    ho, wo = (h - 1) * stride + k, (wd - 1) * stride + k
    xr = x.data.transpose(0, 2, 3, 1).reshape(-1, c)
    w2 = w.data.reshape(c_in, -1)
    cols = (xr @ w2).reshape(n, h, wd, c_out, k, k)
    out = kernels.col2im(cols, ho, wo, stride)
    if b is not None:
        out = out + b.data.reshape(1, -1, 1, 1)

    def bw(g):
        dcols = kernels.im2col(g, k, stride).reshape(n * h * wd, c_out * k * k)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.ascontiguousarray((dcols @ w2.T).reshape(n, h, wd, c).transpose(0, 3, 1, 2))
        if w.requires_grad:
            gw = (xr.T @ dcols).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return make_result(out, parents, bw, "conv_transpose2d")


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalisation of NCHW input.

    Train mode normalises by batch statistics and updates the running
    arrays in place; eval mode uses the running arrays. Running variance
    tracks the biased batch variance so eval reproduces train output once
    the running stats have converged on a fixed batch.
    """
    xd = x.data
    c = xd.shape[1]
    bshape = (1, c, 1, 1)
    if training:
        m = xd.size // c
        if m < 2:
            raise DomainError("batch_norm2d in train mode needs at least 2 values per channel")
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        m = 0
        mean, var = running_mean.astype(xd.dtype), running_var.astype(xd.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mean.reshape(bshape)) * inv.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def bw(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma.data.reshape(bshape)
        if training:
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx = (inv.reshape(bshape) / m) * (m * dxhat - s1 - xhat * s2)
        else:
            gx = dxhat * inv.reshape(bshape)
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), bw, "batch_norm2d")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    xd = x.data
    d = xd.shape[-1]
    if d < 1:
        raise ShapeError("layer_norm over an empty axis")
    mean = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean) * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead)
        gbeta = g.sum(axis=lead)
        dxhat = g * gamma.data
        gx = (inv / d) * (d * dxhat - dxhat.sum(-1, keepdims=True) - xhat * (dxhat * xhat).sum(-1, keepdims=True))
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), bw, "layer_norm")


# --------------------------------------------------------------- modules


class Conv2d(Module):
    def __init__(self, c_in, c_out, k, rng, stride=1, pad=None, bias=True, dtype=np.float32):
        super().__init__()
        self.stride = stride
        self.pad = k // 2 if pad is None else pad
        fan_in = c_in * k * k
        self.weight = parameter(kaiming_uniform(rng, (c_out, c_in, k, k), fan_in, dtype))
        self.bias = parameter(np.zeros(c_out, dtype=dtype)) if bias else None

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.pad)


class ConvTranspose2d(Module):
    def __init__(self, c_in, c_out, rng, k=2, stride=2, bias=True, dtype=np.float32):
        super().__init__()
        self.stride = stride
        self.weight = parameter(kaiming_uniform(rng, (c_in, c_out, k, k), c_in, dtype))
        self.bias = parameter(np.zeros(c_out, dtype=dtype)) if bias else None

    def forward(self, x):
        return conv_transpose2d(x, self.weight, self.bias, self.stride)


class BatchNorm2d(Module):
    def __init__(self, c, momentum=0.1, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.gamma = parameter(np.ones(c, dtype=dtype))
        self.beta = parameter(np.zeros(c, dtype=dtype))
        self.register_buffer("running_mean", np.zeros(c, dtype=dtype))
        self.register_buffer("running_var", np.ones(c, dtype=dtype))

    def forward(self, x):
        return batch_norm2d(
            x, self.gamma, self.beta, self.running_mean.data, self.running_var.data,
            self.training, self.momentum, self.eps,
        )


class LayerNorm(Module):
    def __init__(self, d, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.eps = eps
        self.gamma = parameter(np.ones(d, dtype=dtype))
        self.beta = parameter(np.zeros(d, dtype=dtype))

    def forward(self, x):
        return layer_norm(x, self.gamma, self.beta, self.eps)


class Linear(Module):
    """``y = x @ weight + bias`` with weight stored [in, out]."""

    def __init__(self, d_in, d_out, rng, bias=True, dtype=np.float32):
        super().__init__()
        self.weight = parameter(trunc_normal(rng, (d_in, d_out), 0.02, dtype))
        self.bias = parameter(np.zeros(d_out, dtype=dtype)) if bias else None

    def forward(self, x):
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


def conv_bn_relu(c_in, c_out, rng, k=3, stride=1, dtype=np.float32) -> Sequential:
    return Sequential(
        Conv2d(c_in, c_out, k, rng, stride=stride, bias=False, dtype=dtype),
        BatchNorm2d(c_out, dtype=dtype),
        ReLU(),
    )


class ResNetBasicBlock(Module):
    """conv3x3-BN-ReLU-conv3x3-BN plus identity or 1x1-projection shortcut, then ReLU."""

    def __init__(self, c_in, c_out, rng, stride=1, dtype=np.float32):
        super().__init__()
        self.conv1 = Conv2d(c_in, c_out, 3, rng, stride=stride, bias=False, dtype=dtype)
        self.bn1 = BatchNorm2d(c_out, dtype=dtype)
        self.conv2 = Conv2d(c_out, c_out, 3, rng, bias=False, dtype=dtype)
        self.bn2 = BatchNorm2d(c_out, dtype=dtype)
        if stride != 1 or c_in != c_out:
            self.shortcut = Sequential(
                Conv2d(c_in, c_out, 1, rng, stride=stride, bias=False, dtype=dtype),
                BatchNorm2d(c_out, dtype=dtype),
            )
        else:
            self.shortcut = Identity()

    def forward(self, x):
        y = relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        return relu(y + self.shortcut(x))


class UpsampleBlock(Module):
    """2x transposed-conv upsampling followed by two conv3x3-BN-ReLU layers.

    ``merge(skip, up)`` (when given) combines the upsampled map with an
    encoder skip before the conv pair, where U-Net would concatenate.
    """

    def __init__(self, c_in, c_out, rng, dtype=np.float32):
        super().__init__()
        self.up = ConvTranspose2d(c_in, c_out, rng, dtype=dtype)
        self.conv1 = conv_bn_relu(c_out, c_out, rng, dtype=dtype)
        self.conv2 = conv_bn_relu(c_out, c_out, rng, dtype=dtype)

    def forward(self, x, skip=None, merge=None):
        y = self.up(x)
        if merge is not None:
            y = merge(skip, y)
        return self.conv2(self.conv1(y))
