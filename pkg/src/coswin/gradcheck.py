"""Central-difference gradient verification for every layer kind.

All checks run in float64. Each check reduces the op's output to a scalar
through a fixed random projection, so every output element contributes.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .cfilter import CFilter
from .coswin import CoSwinBlock, CoSwinStageConfig
from .layers import (
    ResNetBasicBlock, UpsampleBlock, batch_norm2d, conv2d, conv_transpose2d, layer_norm, make_rng,
)
from .loss import l2_penalty, total_loss, wbce
from .roadnet import NetworkConfig, RoadNet, parameter_registry
from .swin import SwinBlock, WindowAttention, WindowAttentionConfig, build_shift_mask
from .tensor import Tensor, backward, no_grad

STEP = 1e-3
PRIMITIVE_TOL = 1e-6
LAYER_TOL = 1e-4
F64 = np.float64


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max abs difference scaled by the larger of the two gradients' max magnitudes."""
    a, n = np.asarray(analytic, F64).ravel(), np.asarray(numeric, F64).ravel()
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(n), initial=0.0), 1e-12)
    return float(np.max(np.abs(a - n), initial=0.0) / scale)


def _same_pattern(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def numeric_grad(f: Callable[[], Tensor], t: Tensor, indices, step: float = STEP,
                 smooth_only: bool = False):
    """Central differences at ``indices`` of ``t``.

    With ``smooth_only`` returns ``(values, smooth)`` where ``smooth[j]`` is
    False when the +/-step stencil changes the branch of any non-smooth op
    (the difference quotient is then not a derivative estimate).
    """
    flat = t.data.reshape(-1)
    out = np.empty(len(indices))
    smooth = np.ones(len(indices), dtype=bool)
    with no_grad():
        if smooth_only:
            with T.record_kinks() as base:
                f()
        for j, i in enumerate(indices):
            orig = flat[i]
            with T.record_kinks() as kp:
                flat[i] = orig + step
                fp = f().item()
            with T.record_kinks() as km:
                flat[i] = orig - step
                fm = f().item()
            flat[i] = orig
            out[j] = (fp - fm) / (2 * step)
            if smooth_only:
                smooth[j] = _same_pattern(kp, base) and _same_pattern(km, base)
    return (out, smooth) if smooth_only else out


@dataclass
class GradReport:
    worst: float
    checked: int
    skipped: int


def check_gradients(f: Callable[[], Tensor], tensors: list[Tensor], step: float = STEP,
                    max_entries: int | None = None, rng=None, pooled: bool = False) -> GradReport:
    """Compare taped gradients with central differences.

    Entries whose stencil straddles a kink are skipped and replaced by other
    randomly drawn entries. ``max_entries`` caps the checked entries per
    tensor, or overall when ``pooled``.
    """
    rng = rng if rng is not None else make_rng(0)
    for t in tensors:
        t.grad = None
    backward(f())
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    def probe(t, a, order, want):
        got_a, got_n, skipped = [], [], 0
        for chunk in np.array_split(order, max(1, len(order) // 16)):
            vals, ok = numeric_grad(f, t, chunk, step, smooth_only=True)
            skipped += int((~ok).sum())
            got_a.extend(a.reshape(-1)[chunk[ok]])
            got_n.extend(vals[ok])
            if want is not None and len(got_a) >= want:
                return got_a[:want], got_n[:want], skipped
        return got_a, got_n, skipped

    all_a, all_n, skipped = [], [], 0
    if pooled:
        sizes = np.array([t.size for t in tensors])
        offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        order = rng.permutation(int(sizes.sum()))
        want = max_entries or len(order)
        for flat_i in order:
            if len(all_a) >= want:
                break
            k = int(np.searchsorted(offsets, flat_i, side="right") - 1)
            a_k, n_k, sk = probe(tensors[k], analytic[k], np.array([flat_i - offsets[k]]), 1)
            all_a += a_k
            all_n += n_k
            skipped += sk
        return GradReport(rel_error(all_a, all_n) if all_a else float("inf"), len(all_a), skipped)
    worst = 0.0
    for t, a in zip(tensors, analytic):
        order = rng.permutation(t.size)
        a_t, n_t, sk = probe(t, a, order, max_entries)
        skipped += sk
        all_a += a_t
        if not a_t:
            return GradReport(float("inf"), 0, skipped)
        worst = max(worst, rel_error(a_t, n_t))
    return GradReport(worst, len(all_a), skipped)


def _projected(out_fn: Callable[[], Tensor], rng) -> Callable[[], Tensor]:
    """Scalar ``sum(out * R)`` for a fixed random R matching the output shape."""
    with no_grad():
        shape = out_fn().shape
    r = Tensor(rng.normal(size=shape))
    return lambda: (out_fn() * r).sum()


def _leaf(rng, shape, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def _module_params(m) -> list[Tensor]:
    return [p for _, p in sorted(m.named_parameters(), key=lambda kv: kv[0])]


# ------------------------------------------------------------ the suite


@dataclass
class CheckResult:
    name: str
    worst: float
    tol: float
    seconds: float
    checked: int = 0
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return bool(self.worst < self.tol)


def _elementwise(op):
    def build(rng):
        if op in ("add", "sub", "mul", "div"):
            a = _leaf(rng, (3, 4))
            b = _leaf(rng, (1, 4), 1.0, 2.0)  # broadcast operand
            return _projected(lambda: T.elementwise(op, a, b), rng), [a, b], None
        lo, hi = (0.5, 2.0) if op == "log" else (-2.0, 2.0)
        a = _leaf(rng, (3, 5), lo, hi)
        return _projected(lambda: T.elementwise(op, a), rng), [a], None
    return build


def _matmul(rng):
    a, b = _leaf(rng, (4, 5)), _leaf(rng, (5, 3))
    return _projected(lambda: a @ b, rng), [a, b], None


def _reduce(op):
    def build(rng):
        a = _leaf(rng, (3, 4, 5))
        return _projected(lambda: T.reduce(op, a, 1), rng), [a], None
    return build


def _softmax(rng):
    a = _leaf(rng, (3, 6), -2, 2)
    return _projected(lambda: T.softmax(a, -1), rng), [a], None


def _conv2d(rng):
    x, w, b = _leaf(rng, (2, 3, 8, 8)), _leaf(rng, (4, 3, 3, 3)), _leaf(rng, (4,))
    return _projected(lambda: conv2d(x, w, b, 1, 1), rng), [x, w, b], None


def _conv2d_strided(rng):
    x, w = _leaf(rng, (2, 3, 9, 9)), _leaf(rng, (4, 3, 3, 3))
    return _projected(lambda: conv2d(x, w, None, 2, 1), rng), [x, w], None


def _conv_transpose(rng):
    x, w, b = _leaf(rng, (2, 3, 4, 4)), _leaf(rng, (3, 2, 2, 2)), _leaf(rng, (2,))
    return _projected(lambda: conv_transpose2d(x, w, b, 2), rng), [x, w, b], None


def _batch_norm(training):
    def build(rng):
        x = _leaf(rng, (3, 4, 5, 5), -2, 2)
        g, b = _leaf(rng, (4,), 0.5, 1.5), _leaf(rng, (4,))
        rm, rv = rng.normal(size=4) * 0.1, rng.uniform(0.5, 1.5, size=4)
        return _projected(lambda: batch_norm2d(x, g, b, rm.copy(), rv.copy(), training), rng), [x, g, b], None
    return build


def _layer_norm(rng):
    x = _leaf(rng, (4, 16), -2, 2)
    g, b = _leaf(rng, (16,), 0.5, 1.5), _leaf(rng, (16,))
    return _projected(lambda: layer_norm(x, g, b), rng), [x, g, b], None


def _window_attention(shift):
    def build(rng):
        cfg = WindowAttentionConfig(2, 2, 8, 1 if shift else 0)
        attn = WindowAttention(cfg, rng, dtype=F64)
        _randomise(attn, rng)
        x = _leaf(rng, (4, 4, 8))
        mask = build_shift_mask(4, 4, 2, 1) if shift else None
        return _projected(lambda: attn(x, mask), rng), [x] + _module_params(attn), 40
    return build


def _randomise(module, rng, scale=0.3):
    """Replace tiny inits with O(scale) values so every path carries signal."""
    for _, p in module.named_parameters():
        if p.ndim >= 1:
            p.data = rng.normal(0, scale, size=p.shape) + (1.0 if p.data.size and np.all(p.data == 1) else 0.0)


def _swin_block(rng):
    blk = SwinBlock(8, 2, 4, rng, dtype=F64)
    _randomise(blk, rng)
    x = _leaf(rng, (1, 8, 8, 8))
    return _projected(lambda: blk(x), rng), [x] + _module_params(blk), 25


def _resnet_block(rng):
    blk = ResNetBasicBlock(8, 8, rng, dtype=F64)
    x = _leaf(rng, (1, 8, 8, 8))
    return _projected(lambda: blk(x), rng), [x] + _module_params(blk), 40


def _upsample_block(rng):
    blk = UpsampleBlock(4, 4, rng, dtype=F64)
    x = _leaf(rng, (2, 4, 4, 4))
    return _projected(lambda: blk(x), rng), [x] + _module_params(blk), 40


def _coswin_block(rng):
    cfg = CoSwinStageConfig(8, 8, 1, 4, 2, 1, True, True, "tanh")
    blk = CoSwinBlock(cfg, rng, dtype=F64)
    x = _leaf(rng, (1, 8, 16, 16))
    return _projected(lambda: blk(x), rng), [x] + _module_params(blk), 20


def _cfilter(rng):
    cf = CFilter(rng, 7, dtype=F64)
    x1, x2 = _leaf(rng, (1, 4, 8, 8)), _leaf(rng, (1, 4, 8, 8))
    return _projected(lambda: cf(x1, x2), rng), [x1, x2] + _module_params(cf), 60


def _wbce(rng):
    p = _leaf(rng, (2, 1, 6, 6), 0.2, 0.8)
    target = rng.uniform(size=(2, 1, 6, 6)) < 0.3
    return (lambda: wbce(p, target, 1.5)), [p], None


def _total_loss(rng):
    lw, l2 = _leaf(rng, (), 0.2, 1.0), _leaf(rng, (), 1.0, 3.0)
    s1, s2 = _leaf(rng, (), -0.5, 0.5), _leaf(rng, (), -0.5, 0.5)
    return (lambda: total_loss(lw, l2, s1, s2)), [lw, l2, s1, s2], None


def _network(rng):
    cfg = NetworkConfig(tile_size=32, widths=(8, 8, 16), num_heads=(2, 2, 2), dtype="float64")
    net = RoadNet(cfg, seed=int(rng.integers(1 << 31)))
    x = Tensor(rng.uniform(size=(1, 3, 32, 32)))
    target = rng.uniform(size=(1, 1, 32, 32)) < 0.2
    reg = parameter_registry(net)
    s1, s2 = Tensor(np.array(0.1), requires_grad=True), Tensor(np.array(-0.2), requires_grad=True)

    def f():
        return total_loss(wbce(net(x), target, 1.5), l2_penalty(reg), s1, s2)

    return f, [lp.tensor for lp in reg], ("pooled", 50)


SUITE: list[tuple[str, float, Callable]] = (
    [(f"elementwise.{op}", PRIMITIVE_TOL, _elementwise(op))
     for op in ("add", "sub", "mul", "div", "tanh", "sigmoid", "gelu", "exp", "log")]
    + [
        ("matmul", PRIMITIVE_TOL, _matmul),
        ("reduce.sum", PRIMITIVE_TOL, _reduce("sum")),
        ("reduce.mean", PRIMITIVE_TOL, _reduce("mean")),
        ("reduce.max", PRIMITIVE_TOL, _reduce("max")),
        ("softmax", PRIMITIVE_TOL, _softmax),
        ("conv2d", LAYER_TOL, _conv2d),
        ("conv2d.stride2", LAYER_TOL, _conv2d_strided),
        ("conv_transpose2d", LAYER_TOL, _conv_transpose),
        ("batch_norm2d.train", LAYER_TOL, _batch_norm(True)),
        ("batch_norm2d.eval", LAYER_TOL, _batch_norm(False)),
        ("layer_norm", LAYER_TOL, _layer_norm),
        ("window_attention", LAYER_TOL, _window_attention(False)),
        ("window_attention.shifted", LAYER_TOL, _window_attention(True)),
        ("swin_block", LAYER_TOL, _swin_block),
        ("resnet_basic_block", LAYER_TOL, _resnet_block),
        ("upsample_block", LAYER_TOL, _upsample_block),
        ("coswin_block", LAYER_TOL, _coswin_block),
        ("cfilter", LAYER_TOL, _cfilter),
        ("wbce", LAYER_TOL, _wbce),
        ("total_loss", LAYER_TOL, _total_loss),
        ("roadnet.end_to_end", LAYER_TOL, _network),
    ]
)


def run_check(name: str, tol: float, build: Callable, seed: int = 0, step: float = STEP) -> CheckResult:
    rng = make_rng(seed)
    t0 = time.perf_counter()
    f, tensors, limit = build(rng)
    if isinstance(limit, tuple):
        rep = check_gradients(f, tensors, step, limit[1], rng, pooled=True)
    else:
        rep = check_gradients(f, tensors, step, limit, rng)
    return CheckResult(name, rep.worst, tol, time.perf_counter() - t0, rep.checked, rep.skipped)


def run_suite(seed: int = 0, only: list[str] | None = None) -> list[CheckResult]:
    return [
        run_check(name, tol, build, seed)
        for name, tol, build in SUITE
        if only is None or name in only
    ]
