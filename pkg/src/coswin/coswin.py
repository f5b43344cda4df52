"""Dual-branch CoSwin stages (residual CNN + Swin) and the three-stage encoder."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .layers import BatchNorm2d, Conv2d, Identity, Module, ReLU, ResNetBasicBlock, Sequential
from .swin import SwinBlock
from .tensor import Tensor, tanh

FUSIONS = ("tanh", "batchnorm", "none")


@dataclass(frozen=True)
class CoSwinStageConfig:
    in_channels: int
    out_channels: int
    num_res_blocks: int = 1
    window_size: int = 4
    num_heads: int = 2
    swin_depth: int = 1
    qkv_bias: bool = True
    downsample: bool = True
    fusion: str = "tanh"

    def __post_init__(self):
        if self.fusion not in FUSIONS:
            raise ConfigError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.num_res_blocks < 1:
            raise ConfigError("num_res_blocks must be >= 1")
        if self.out_channels % self.num_heads:
            raise ConfigError(
                f"out_channels {self.out_channels} not divisible by num_heads {self.num_heads}"
            )


class CoSwinBlock(Module):
    """``Y = f(X) + fuse(g(X))`` with f the residual branch and g the Swin branch.

    ``fusion='tanh'`` is the method; ``batchnorm`` and ``none`` exist for the
    alignment ablation. With ``use_swin=False`` the stage is f alone.
    """

    def __init__(self, cfg: CoSwinStageConfig, rng, use_swin: bool = True, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.use_swin = use_swin
        stride = 2 if cfg.downsample else 1
        blocks = [ResNetBasicBlock(cfg.in_channels, cfg.out_channels, rng, stride=stride, dtype=dtype)]
        blocks += [
            ResNetBasicBlock(cfg.out_channels, cfg.out_channels, rng, dtype=dtype)
            for _ in range(cfg.num_res_blocks - 1)
        ]
        self.res = Sequential(*blocks)
        if use_swin:
            if cfg.downsample:
                self.reduce = Conv2d(cfg.in_channels, cfg.out_channels, 2, rng, stride=2, pad=0, dtype=dtype)
            elif cfg.in_channels != cfg.out_channels:
                self.reduce = Conv2d(cfg.in_channels, cfg.out_channels, 1, rng, dtype=dtype)
            else:
                self.reduce = Identity()
            self.swin = SwinBlock(
                cfg.out_channels, cfg.num_heads, cfg.window_size, rng,
                depth=cfg.swin_depth, qkv_bias=cfg.qkv_bias, dtype=dtype,
            )
            if cfg.fusion == "batchnorm":
                self.align = BatchNorm2d(cfg.out_channels, dtype=dtype)

    def branches(self, x: Tensor) -> tuple[Tensor, Tensor | None]:
        """Return (f(X), g(X)); g is None for a residual-only stage."""
        if x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"stage expects {self.cfg.in_channels} channels, got {x.shape[1]}")
        f = self.res(x)
        if not self.use_swin:
            return f, None
        return f, self.swin(self.reduce(x))

    def fuse(self, f: Tensor, g: Tensor | None) -> Tensor:
        if g is None:
            return f
        if self.cfg.fusion == "tanh":
            return f + tanh(g)
        if self.cfg.fusion == "batchnorm":
            return f + self.align(g)
        return f + g

    def forward(self, x: Tensor) -> Tensor:
        return self.fuse(*self.branches(x))


class Encoder(Module):
    """Stride-2 7x7 stem, then three downsampling CoSwin stages.

    ``forward`` returns ``(bottleneck, skips)`` where ``skips[i]`` is the
    input of stage ``i`` (the feature before that stage downsamples).
    """

    def __init__(self, widths, rng, num_heads=(2, 4, 8), window_size=4, num_res_blocks=1,
                 swin_depth=1, fusion="tanh", use_coswin=True, qkv_bias=True, dtype=np.float32):
        super().__init__()
        w0, w1, w2 = widths
        self.stem = Sequential(
            Conv2d(3, w0, 7, rng, stride=2, pad=3, bias=False, dtype=dtype),
            BatchNorm2d(w0, dtype=dtype),
            ReLU(),
        )
        stages = []
        for i, (cin, cout) in enumerate(((w0, w0), (w0, w1), (w1, w2))):
            cfg = CoSwinStageConfig(
                cin, cout, num_res_blocks, window_size, num_heads[i], swin_depth, qkv_bias, True, fusion
            )
            stage = CoSwinBlock(cfg, rng, use_swin=use_coswin, dtype=dtype)
            setattr(self, f"stage{i + 1}", stage)
            stages.append(stage)
        object.__setattr__(self, "stages", stages)

    def forward(self, image: Tensor) -> tuple[Tensor, list[Tensor]]:
        n, c, h, w = image.shape
        if c != 3:
            raise ShapeError(f"encoder expects 3 input channels, got {c}")
        if h % 16 or w % 16:
            raise ShapeError(
                f"input {h}x{w} must be divisible by 16 (stride-2 stem + three stride-2 stages); "
                f"minimum size is 16x16"
            )
        x = self.stem(image)
        skips = []
        for stage in self.stages:
            skips.append(x)
            x = stage(x)
        return x, skips


def encode(encoder: Encoder, image: Tensor) -> tuple[Tensor, list[Tensor]]:
    return encoder(image)
