"""The U-shaped road segmentation network and its parameter registry."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from .cfilter import CFilter, plain_merge
from .coswin import FUSIONS, Encoder
from .errors import ConfigError, ContractError, DomainError, ShapeError
from .layers import BatchNorm2d, Conv2d, ConvTranspose2d, LayerParams, Module, UpsampleBlock, make_rng
from .tensor import Tensor, relu, sigmoid

log = logging.getLogger(__name__)

ABLATIONS = {
    "none": (False, False),
    "cfilter": (False, True),
    "coswin": (True, False),
    "both": (True, True),
}


@dataclass
class NetworkConfig:
    tile_size: int = 64
    widths: tuple[int, int, int] = (32, 64, 128)
    window_size: int = 4
    num_heads: tuple[int, int, int] = (2, 4, 8)
    res_blocks: int = 1
    swin_depth: int = 1
    cfilter_kernel: int = 7
    fusion: str = "tanh"
    use_coswin: bool = True
    use_cfilter: bool = True
    qkv_bias: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        heads = self.num_heads
        self.num_heads = (int(heads),) * 3 if isinstance(heads, int) else tuple(int(h) for h in heads)
        if len(self.widths) != 3 or len(self.num_heads) != 3:
            raise ConfigError("widths and num_heads need exactly three entries")
        if self.tile_size % 16:
            raise ConfigError(f"tile_size {self.tile_size} must be divisible by 16")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"fusion must be one of {FUSIONS}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.cfilter_kernel % 2 == 0:
            raise ConfigError("cfilter_kernel must be odd")
        if self.use_coswin:
            for w, h in zip(self.widths, self.num_heads):
                if w % h:
                    raise ConfigError(f"stage width {w} not divisible by {h} heads")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @classmethod
    def for_ablation(cls, name: str, **kw) -> "NetworkConfig":
        if name not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {sorted(ABLATIONS)}")
        use_coswin, use_cfilter = ABLATIONS[name]
        return cls(use_coswin=use_coswin, use_cfilter=use_cfilter, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["num_heads"] = list(self.num_heads)
        return d


class _Filters(Module):
    pass


class RoadNet(Module):
    """Stem + three CoSwin stages, three gated skips, U-Net decoder, sigmoid head."""

    def __init__(self, cfg: NetworkConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = make_rng(seed)
        dt = cfg.np_dtype
        w0, w1, w2 = cfg.widths
        self.enc = Encoder(
            cfg.widths, rng, cfg.num_heads, cfg.window_size, cfg.res_blocks, cfg.swin_depth,
            cfg.fusion, cfg.use_coswin, cfg.qkv_bias, dt,
        )
        self.dec3 = UpsampleBlock(w2, w1, rng, dtype=dt)
        self.dec2 = UpsampleBlock(w1, w0, rng, dtype=dt)
        self.dec1 = UpsampleBlock(w0, w0, rng, dtype=dt)
        if cfg.use_cfilter:
            self.cfilter = _Filters()
            for i in (1, 2, 3):
                setattr(self.cfilter, str(i), CFilter(rng, cfg.cfilter_kernel, dt))
        head_c = max(w0 // 2, 1)
        self.head_up = ConvTranspose2d(w0, head_c, rng, dtype=dt)
        self.head_bn = BatchNorm2d(head_c, dtype=dt)
        self.head = Conv2d(head_c, 1, 1, rng, pad=0, dtype=dt)

    def _merge(self, i: int):
        if self.cfg.use_cfilter:
            return getattr(self.cfilter, str(i))
        return plain_merge

    def forward(self, image: Tensor, return_decoder: bool = False):
        t = self.cfg.tile_size
        if image.ndim != 4 or image.shape[1:] != (3, t, t):
            raise ShapeError(f"expected input [N, 3, {t}, {t}], got {image.shape}")
        bottleneck, skips = self.enc(image)
        d3 = self.dec3(bottleneck, skips[2], self._merge(3))
        d2 = self.dec2(d3, skips[1], self._merge(2))
        d1 = self.dec1(d2, skips[0], self._merge(1))
        y = relu(self.head_bn(self.head_up(d1)))
        prob = sigmoid(self.head(y))
        if return_decoder:
            return prob, (d1, d2, d3), skips
        return prob


def predict_mask(prob, threshold: float = 0.5) -> np.ndarray:
    """Binary road mask: ``prob >= threshold``."""
    if not 0.0 < threshold < 1.0:
        raise DomainError(f"threshold must lie in (0, 1), got {threshold}")
    p = prob.data if isinstance(prob, Tensor) else np.asarray(prob)
    return p >= threshold


def parameter_registry(model: Module) -> list[LayerParams]:
    """Sorted, duplicate-free list of every learnable tensor in ``model``."""
    seen: dict[str, LayerParams] = {}
    ids = set()
    for name, t in model.named_parameters():
        if name in seen:
            raise ContractError(f"duplicate parameter name {name!r}")
        if id(t) in ids:
            raise ContractError(f"tensor registered twice (at {name!r})")
        ids.add(id(t))
        seen[name] = LayerParams(name, t)
    reg = [seen[k] for k in sorted(seen)]
    log.info("parameter registry: %d tensors, %d scalars", len(reg), sum(p.tensor.size for p in reg))
    return reg


def count_parameters(model: Module) -> int:
    return sum(p.tensor.size for p in parameter_registry(model))
