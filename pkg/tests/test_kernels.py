import os
import subprocess
import sys
import zlib

import numpy as np
import pytest
from scipy.ndimage import distance_transform_edt

from coswin import kernels
from coswin.kernels import NUMBA_KERNELS, NUMPY_KERNELS, UNUSED_NUMBA


@pytest.mark.parametrize("stride", [1, 2])
def test_im2col_backends_agree(rng, stride):
    xp = rng.normal(size=(2, 3, 9, 9)).astype(np.float32)
    a = NUMBA_KERNELS["im2col"](xp, 3, stride)
    b = NUMPY_KERNELS["im2col"](xp, 3, stride)
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("stride", [1, 2])
def test_col2im_is_adjoint_of_im2col(rng, stride):
    xp = rng.normal(size=(2, 3, 9, 9))
    cols = rng.normal(size=NUMPY_KERNELS["im2col"](xp, 3, stride).shape)
    for backend in (NUMBA_KERNELS, NUMPY_KERNELS):
        lhs = np.sum(backend["im2col"](xp, 3, stride) * cols)
        rhs = np.sum(xp * backend["col2im"](cols, 9, 9, stride))
        assert lhs == pytest.approx(rhs, rel=1e-12)


def test_segment_distance_backends_agree(rng):
    segs = rng.uniform(-5, 40, size=(5, 4))
    a = NUMBA_KERNELS["segment_distance"](segs, 32, 32)
    b = NUMPY_KERNELS["segment_distance"](segs, 32, 32)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_segment_distance_matches_edt_on_axis_line():
    # pixel centres sit on integer coordinates; segment spans row 10 end to end
    seg = np.array([[0.0, 10.0, 31.0, 10.0]])
    d = kernels.segment_distance(seg, 32, 32)
    on_line = np.ones((32, 32), dtype=bool)
    on_line[10, :] = False
    np.testing.assert_allclose(d, distance_transform_edt(on_line), atol=1e-12)


@pytest.mark.parametrize("name", ["gelu_fwd", "gelu_bwd"])
def test_gelu_loop_kernel_matches_numpy(rng, name):
    x = rng.normal(size=(3, 50))
    args = (x,) if name == "gelu_fwd" else (x, rng.normal(size=x.shape))
    np.testing.assert_allclose(UNUSED_NUMBA[name](*args), NUMPY_KERNELS[name](*args), rtol=1e-12, atol=1e-14)


def test_crc64_check_value():
    # published check value of CRC-64/XZ over ASCII "123456789"
    assert kernels.crc64(b"123456789") == 0x995DC9BBDF1939FA
    buf = np.frombuffer(b"123456789", dtype=np.uint8)
    assert NUMPY_KERNELS["crc64"](buf) == NUMBA_KERNELS["crc64"](buf)


def test_crc64_differs_from_crc32_domain():
    # sanity: a single flipped bit changes the checksum
    data = bytearray(os.urandom(64))
    before = kernels.crc64(bytes(data))
    data[7] ^= 1
    assert kernels.crc64(bytes(data)) != before
    assert zlib.crc32(bytes(data)) != before


def test_numpy_backend_selected_by_env():
    code = "from coswin import kernels, _jit; print(_jit.USE_NUMBA, kernels._ACTIVE is kernels.NUMPY_KERNELS)"
    env = dict(os.environ, COSWIN_NUMBA="0")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["False", "True"]
