"""Hot inner loops, each in a numba flavour and a pure-numpy flavour.

The public names (``im2col``, ``col2im``, ``gelu_forward``, ``gelu_backward``,
``segment_distance``, ``crc64``)
point at whichever flavour ``COSWIN_NUMBA`` selects. ``NUMBA_KERNELS`` and
``NUMPY_KERNELS`` expose both sets for benchmarking and parity tests.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._jit import USE_NUMBA, njit

# ---------------------------------------------------------------- im2col


def _im2col_numpy(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> (N, Ho, Wo, C, k, k), contiguous."""
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))


@njit
def _im2col_numba(xp, k, stride):
    n, c, hp, wp = xp.shape
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    out = np.empty((n, ho, wo, c, k, k), dtype=xp.dtype)
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                r0 = i * stride
                c0 = j * stride
                for ch in range(c):
                    for di in range(k):
                        for dj in range(k):
                            out[b, i, j, ch, di, dj] = xp[b, ch, r0 + di, c0 + dj]
    return out


# ---------------------------------------------------------------- col2im


def _col2im_numpy(cols: np.ndarray, hp: int, wp: int, stride: int) -> np.ndarray:
    """Adjoint of im2col: (N, Ho, Wo, C, k, k) -> (N, C, Hp, Wp)."""
    n, ho, wo, c, k, _ = cols.shape
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for di in range(k):
        for dj in range(k):
            out[:, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride] += (
                cols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
            )
    return out


@njit
def _col2im_numba(cols, hp, wp, stride):
    n, ho, wo, c, k, _ = cols.shape
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                r0 = i * stride
                c0 = j * stride
                for ch in range(c):
                    for di in range(k):
                        for dj in range(k):
                            out[b, ch, r0 + di, c0 + dj] += cols[b, i, j, ch, di, dj]
    return out


# ------------------------------------------------- polyline rasterisation


def _segment_distance_numpy(segments: np.ndarray, h: int, w: int) -> np.ndarray:
    """Distance from every pixel centre to the nearest segment.

    ``segments`` is (S, 4) float64 rows ``x0, y0, x1, y1`` in pixel units.
    """
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    best = np.full((h, w), np.inf)
    for x0, y0, x1, y1 in segments:
        dx, dy = x1 - x0, y1 - y0
        ll = dx * dx + dy * dy
        if ll > 0.0:
            t = np.clip(((xx - x0) * dx + (yy - y0) * dy) / ll, 0.0, 1.0)
        else:
            t = np.zeros_like(xx)
        px = xx - (x0 + t * dx)
        py = yy - (y0 + t * dy)
        np.minimum(best, np.sqrt(px * px + py * py), out=best)
    return best


@njit
def _segment_distance_numba(segments, h, w):
    best = np.full((h, w), np.inf)
    for s in range(segments.shape[0]):
        x0 = segments[s, 0]
        y0 = segments[s, 1]
        dx = segments[s, 2] - x0
        dy = segments[s, 3] - y0
        ll = dx * dx + dy * dy
        for yi in range(h):
            for xi in range(w):
                t = 0.0
                if ll > 0.0:
                    t = ((xi - x0) * dx + (yi - y0) * dy) / ll
                    if t < 0.0:
                        t = 0.0
                    elif t > 1.0:
                        t = 1.0
                px = xi - (x0 + t * dx)
                py = yi - (y0 + t * dy)
                d = np.sqrt(px * px + py * py)
                if d < best[yi, xi]:
                    best[yi, xi] = d
    return best


# ------------------------------------------------------------------ GELU

_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_K = 0.044715


def _gelu_fwd_numpy(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_K * (x * x * x))))


def _gelu_bwd_numpy(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    x2 = x * x
    t = np.tanh(_GELU_C * (x + _GELU_K * x2 * x))
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_K * x2)
    return g * (0.5 * (1.0 + t) + 0.5 * x * dt)


@njit
def _gelu_fwd_loop(x, out):
    for i in range(x.shape[0]):
        v = x[i]
        out[i] = 0.5 * v * (1.0 + np.tanh(_GELU_C * (v + _GELU_K * v * v * v)))


@njit
def _gelu_bwd_loop(x, g, out):
    for i in range(x.shape[0]):
        v = x[i]
        v2 = v * v
        t = np.tanh(_GELU_C * (v + _GELU_K * v2 * v))
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_K * v2)
        out[i] = g[i] * (0.5 * (1.0 + t) + 0.5 * v * dt)


def _gelu_fwd_numba(x: np.ndarray) -> np.ndarray:
    xc = np.ascontiguousarray(x)
    out = np.empty_like(xc)
    _gelu_fwd_loop(xc.reshape(-1), out.reshape(-1))
    return out


def _gelu_bwd_numba(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    xc = np.ascontiguousarray(x)
    gc = np.ascontiguousarray(np.broadcast_to(g, xc.shape), dtype=xc.dtype)
    out = np.empty_like(xc)
    _gelu_bwd_loop(xc.reshape(-1), gc.reshape(-1), out.reshape(-1))
    return out


# ---------------------------------------------------------------- CRC-64

# CRC-64/XZ: reflected ECMA-182 polynomial, init and xorout all ones.
_CRC64_POLY = np.uint64(0xC96C5795D7870F42)


def _crc64_table() -> np.ndarray:
    table = np.zeros(256, dtype=np.uint64)
    for i in range(256):
        crc = i
        for _ in range(8):
            crc = (crc >> 1) ^ 0xC96C5795D7870F42 if crc & 1 else crc >> 1
        table[i] = crc
    return table


_CRC64_TABLE = _crc64_table()
_CRC64_TABLE_PY = [int(v) for v in _CRC64_TABLE]


def _crc64_numpy(buf: np.ndarray) -> int:
    table = _CRC64_TABLE_PY
    crc = 0xFFFFFFFFFFFFFFFF
    for byte in buf.tobytes():
        crc = table[(crc ^ byte) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFFFFFFFFFF


@njit
def _crc64_loop(buf, table):
    crc = np.uint64(0xFFFFFFFFFFFFFFFF)
    mask = np.uint64(0xFF)
    eight = np.uint64(8)
    for i in range(buf.shape[0]):
        crc = table[(crc ^ np.uint64(buf[i])) & mask] ^ (crc >> eight)
    return crc ^ np.uint64(0xFFFFFFFFFFFFFFFF)


def _crc64_numba(buf: np.ndarray) -> int:
    return int(_crc64_loop(buf, _CRC64_TABLE))


NUMBA_KERNELS = {
    "im2col": _im2col_numba,
    "col2im": _col2im_numba,
    "segment_distance": _segment_distance_numba,
    "crc64": _crc64_numba,
    # numpy's SIMD tanh beats numba's scalar libm call, so GELU stays on numpy
    "gelu_fwd": _gelu_fwd_numpy,
    "gelu_bwd": _gelu_bwd_numpy,
}
# Jitted loops not on the dispatch path, kept so the benchmark shows why.
UNUSED_NUMBA = {"gelu_fwd": _gelu_fwd_numba, "gelu_bwd": _gelu_bwd_numba}
NUMPY_KERNELS = {
    "im2col": _im2col_numpy,
    "col2im": _col2im_numpy,
    "segment_distance": _segment_distance_numpy,
    "crc64": _crc64_numpy,
    "gelu_fwd": _gelu_fwd_numpy,
    "gelu_bwd": _gelu_bwd_numpy,
}

_ACTIVE = NUMBA_KERNELS if USE_NUMBA else NUMPY_KERNELS


def im2col(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    return _ACTIVE["im2col"](np.ascontiguousarray(xp), k, stride)


def col2im(cols: np.ndarray, hp: int, wp: int, stride: int) -> np.ndarray:
    return _ACTIVE["col2im"](np.ascontiguousarray(cols), hp, wp, stride)


def segment_distance(segments: np.ndarray, h: int, w: int) -> np.ndarray:
    segs = np.ascontiguousarray(segments, dtype=np.float64).reshape(-1, 4)
    return _ACTIVE["segment_distance"](segs, h, w)


def crc64(data: bytes | np.ndarray) -> int:
    buf = np.frombuffer(data, dtype=np.uint8) if isinstance(data, (bytes, bytearray, memoryview)) else data
    return _ACTIVE["crc64"](np.ascontiguousarray(buf, dtype=np.uint8))


def gelu_forward(x: np.ndarray) -> np.ndarray:
    """Tanh-approximation GELU."""
    return _ACTIVE["gelu_fwd"](x)


def gelu_backward(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    return _ACTIVE["gelu_bwd"](x, g)
