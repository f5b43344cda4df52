"""Shifted-window multi-head self-attention and the Swin block."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigError, ShapeError
from .layers import LayerNorm, Linear, Module, parameter, trunc_normal
from .tensor import Tensor, gelu, getitem, pad, reshape, roll, softmax, take, transpose

MASK_NEG = -100.0


@dataclass(frozen=True)
class WindowAttentionConfig:
    window_size: int
    num_heads: int
    embed_dim: int
    shift: int = 0
    qkv_bias: bool = True

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.shift not in (0, self.window_size // 2):
            raise ConfigError(f"shift must be 0 or {self.window_size // 2}, got {self.shift}")


# ------------------------------------------------------- window plumbing


def window_partition(x: Tensor, m: int) -> Tensor:
    """[N, H, W, C] -> [N * H/m * W/m, m*m, C], windows in raster order."""
    n, h, w, c = x.shape
    if h % m or w % m:
        raise ShapeError(f"feature map {h}x{w} not divisible by window {m}; pad first")
    y = reshape(x, (n, h // m, m, w // m, m, c))
    y = transpose(y, (0, 1, 3, 2, 4, 5))
    return reshape(y, (n * (h // m) * (w // m), m * m, c))


def window_reverse(windows: Tensor, m: int, h: int, w: int) -> Tensor:
    """Exact inverse of ``window_partition``."""
    c = windows.shape[-1]
    n = windows.shape[0] // ((h // m) * (w // m))
    y = reshape(windows, (n, h // m, w // m, m, m, c))
    y = transpose(y, (0, 1, 3, 2, 4, 5))
    return reshape(y, (n, h, w, c))


def cyclic_shift(x: Tensor, s: int) -> Tensor:
    """Torus roll of an NHWC map by (-s, -s)."""
    if s == 0:
        return x
    return roll(x, (-s, -s), (1, 2))


def inverse_shift(x: Tensor, s: int) -> Tensor:
    if s == 0:
        return x
    return roll(x, (s, s), (1, 2))


def region_labels(h: int, w: int, m: int, s: int) -> np.ndarray:
    """Label each position of the shifted frame by its pre-shift region (3x3 cut grid)."""
    labels = np.zeros((h, w), dtype=np.int64)
    cuts_h = (slice(0, h - m), slice(h - m, h - s), slice(h - s, h))
    cuts_w = (slice(0, w - m), slice(w - m, w - s), slice(w - s, w))
    cnt = 0
    for hs in cuts_h:
        for ws in cuts_w:
            labels[hs, ws] = cnt
            cnt += 1
    return labels


@lru_cache(maxsize=64)
def _shift_mask_cached(h: int, w: int, m: int, s: int) -> np.ndarray:
    nw = (h // m) * (w // m)
    if s == 0:
        return np.zeros((nw, m * m, m * m))
    lab = region_labels(h, w, m, s)
    win = lab.reshape(h // m, m, w // m, m).transpose(0, 2, 1, 3).reshape(nw, m * m)
    diff = win[:, None, :] != win[:, :, None]
    mask = np.where(diff, MASK_NEG, 0.0)
    mask.setflags(write=False)
    return mask


def build_shift_mask(h: int, w: int, m: int, s: int) -> np.ndarray:
    """Additive attention mask [num_windows, m*m, m*m] with entries in {0, MASK_NEG}."""
    if h % m or w % m:
        raise ShapeError(f"mask size {h}x{w} not divisible by window {m}")
    if s not in (0, m // 2):
        raise ConfigError(f"shift must be 0 or {m // 2}")
    return _shift_mask_cached(h, w, m, s)


def relative_position_index(m: int) -> np.ndarray:
    """[m*m, m*m] index into the (2m-1)^2 bias table."""
    coords = np.stack(np.meshgrid(np.arange(m), np.arange(m), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (m - 1)
    return rel[0] * (2 * m - 1) + rel[1]


# ------------------------------------------------------------ attention


class WindowAttention(Module):
    def __init__(self, cfg: WindowAttentionConfig, rng, dtype=np.float32, rel_bias: bool = True):
        super().__init__()
        self.cfg = cfg
        c, h, m = cfg.embed_dim, cfg.num_heads, cfg.window_size
        self.head_dim = c // h
        self.scale = self.head_dim ** -0.5
        self.qkv = Linear(c, 3 * c, rng, bias=cfg.qkv_bias, dtype=dtype)
        self.proj = Linear(c, c, rng, dtype=dtype)
        self.use_rel_bias = rel_bias
        self.rel_pos_table = parameter(trunc_normal(rng, ((2 * m - 1) ** 2, h), 0.02, dtype))
        self.rel_index = relative_position_index(m).reshape(-1)
        self.last_attn: np.ndarray | None = None

    def forward(self, tokens: Tensor, mask: np.ndarray | None = None) -> Tensor:
        bw, t, c = tokens.shape
        m2 = self.cfg.window_size ** 2
        if t != m2:
            raise ShapeError(f"window attention expects {m2} tokens, got {t}")
        heads, d = self.cfg.num_heads, self.head_dim
        qkv = reshape(self.qkv(tokens), (bw, t, 3, heads, d))
        qkv = transpose(qkv, (2, 0, 3, 1, 4))
        q = getitem(qkv, 0) * self.scale
        k = getitem(qkv, 1)
        v = getitem(qkv, 2)
        attn = q @ transpose(k, (0, 1, 3, 2))
        if self.use_rel_bias:
            bias = reshape(take(self.rel_pos_table, self.rel_index, axis=0), (t, t, heads))
            attn = attn + transpose(bias, (2, 0, 1))
        if mask is not None and np.any(mask):
            nw = mask.shape[0]
            if bw % nw:
                raise ShapeError(f"{bw} windows not a multiple of mask windows {nw}")
            attn = reshape(attn, (bw // nw, nw, heads, t, t))
            attn = attn + Tensor(mask[None, :, None].astype(attn.dtype))
            attn = reshape(attn, (bw, heads, t, t))
        attn = softmax(attn, axis=-1)
        self.last_attn = attn.data
        out = transpose(attn @ v, (0, 2, 1, 3))
        return self.proj(reshape(out, (bw, t, c)))


class Mlp(Module):
    def __init__(self, c, hidden, rng, dtype=np.float32):
        super().__init__()
        self.fc1 = Linear(c, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, c, rng, dtype=dtype)

    def forward(self, x):
        return self.fc2(gelu(self.fc1(x)))


class SwinSubBlock(Module):
    """LN -> (S)W-MSA -> residual -> LN -> MLP -> residual on an NHWC map.

    Maps whose sides are not multiples of the window are zero padded on the
    bottom/right after the first LayerNorm and cropped after attention.
    """

    def __init__(self, cfg: WindowAttentionConfig, rng, mlp_ratio: int = 4, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.norm1 = LayerNorm(cfg.embed_dim, dtype=dtype)
        self.attn = WindowAttention(cfg, rng, dtype=dtype)
        self.norm2 = LayerNorm(cfg.embed_dim, dtype=dtype)
        self.mlp = Mlp(cfg.embed_dim, mlp_ratio * cfg.embed_dim, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        n, h, w, c = x.shape
        m, s = self.cfg.window_size, self.cfg.shift
        y = self.norm1(x)
        ph, pw = (-h) % m, (-w) % m
        if ph or pw:
            y = pad(y, ((0, 0), (0, ph), (0, pw), (0, 0)))
        hp, wp = h + ph, w + pw
        y = cyclic_shift(y, s)
        mask = build_shift_mask(hp, wp, m, s) if s else None
        y = window_reverse(self.attn(window_partition(y, m), mask), m, hp, wp)
        y = inverse_shift(y, s)
        if ph or pw:
            y = getitem(y, (slice(None), slice(0, h), slice(0, w)))
        x = x + y
        return x + self.mlp(self.norm2(x))


class SwinBlock(Module):
    """``depth`` pairs of (W-MSA, SW-MSA) sub-blocks on an NCHW feature map."""

    def __init__(self, dim, num_heads, window_size, rng, depth: int = 1, qkv_bias: bool = True,
                 mlp_ratio: int = 4, dtype=np.float32):
        super().__init__()
        subs = []
        for i in range(2 * depth):
            cfg = WindowAttentionConfig(window_size, num_heads, dim, 0 if i % 2 == 0 else window_size // 2, qkv_bias)
            sub = SwinSubBlock(cfg, rng, mlp_ratio, dtype)
            setattr(self, f"blk{i}", sub)
            subs.append(sub)
        object.__setattr__(self, "blocks", subs)

    def forward(self, x: Tensor) -> Tensor:
        y = transpose(x, (0, 2, 3, 1))
        for blk in self.blocks:
            y = blk(y)
        return transpose(y, (0, 3, 1, 2))
