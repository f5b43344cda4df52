import numpy as np
import pytest

from coswin.coswin import CoSwinBlock, CoSwinStageConfig, Encoder
from coswin.errors import ConfigError, ShapeError
from coswin.layers import make_rng
from coswin.tensor import Tensor


def zero_g_branch(block: CoSwinBlock) -> None:
    """Make g(X) identically zero: zero the reducing conv and every additive
    term inside the Swin branch, so LN, attention and MLP all map 0 to 0."""
    for name, p in block.named_parameters():
        if name.startswith("reduce.") or (name.startswith("swin.") and name.endswith((".bias", ".beta"))):
            p.data[...] = 0


@pytest.fixture
def block():
    cfg = CoSwinStageConfig(4, 8, num_heads=2, window_size=2)
    return CoSwinBlock(cfg, make_rng(0), dtype=np.float64)


def test_stage_halves_resolution(block, rng):
    y = block(Tensor(rng.normal(size=(2, 4, 8, 8))))
    assert y.shape == (2, 8, 4, 4)


def test_fusion_deviation_bounded_by_one(block, rng):
    x = Tensor(rng.normal(scale=10.0, size=(3, 4, 8, 8)))
    f, g = block.branches(x)
    y = block.fuse(f, g).data
    added = np.tanh(g.data)
    assert np.abs(added).max() <= 1.0
    np.testing.assert_array_equal(y, f.data + added)
    # recomputing y - f rounds once more, so allow one ulp of the operands
    slack = np.finfo(y.dtype).eps * np.maximum(np.abs(y), np.abs(f.data))
    assert (np.abs(y - f.data) <= 1.0 + slack).all()


def test_zeroed_g_branch_leaves_f_bitwise(block, rng):
    zero_g_branch(block)
    x = Tensor(rng.normal(size=(2, 4, 8, 8)))
    f, g = block.branches(x)
    assert not g.data.any()
    np.testing.assert_array_equal(block.fuse(f, g).data, f.data)


def test_residual_only_stage(rng):
    blk = CoSwinBlock(CoSwinStageConfig(4, 8, num_heads=2), make_rng(0), use_swin=False)
    f, g = blk.branches(Tensor(rng.normal(size=(2, 4, 8, 8)).astype(np.float32)))
    assert g is None
    assert not any(n.startswith("swin") for n, _ in blk.named_parameters())


@pytest.mark.parametrize("fusion", ["batchnorm", "none"])
def test_alternative_fusions_run(rng, fusion):
    blk = CoSwinBlock(CoSwinStageConfig(4, 8, num_heads=2, fusion=fusion), make_rng(0))
    assert blk(Tensor(rng.normal(size=(2, 4, 8, 8)).astype(np.float32))).shape == (2, 8, 4, 4)


def test_stage_config_validation():
    with pytest.raises(ConfigError):
        CoSwinStageConfig(4, 8, fusion="sum")
    with pytest.raises(ConfigError):
        CoSwinStageConfig(4, 6, num_heads=4)


def test_channel_mismatch(block, rng):
    with pytest.raises(ShapeError):
        block(Tensor(rng.normal(size=(1, 3, 8, 8))))


class TestEncoder:
    def test_skip_and_bottleneck_shapes(self, rng):
        enc = Encoder((8, 16, 32), make_rng(0), num_heads=(2, 2, 4))
        bottleneck, skips = enc(Tensor(rng.normal(size=(2, 3, 64, 64)).astype(np.float32)))
        assert [s.shape for s in skips] == [(2, 8, 32, 32), (2, 8, 16, 16), (2, 16, 8, 8)]
        assert bottleneck.shape == (2, 32, 4, 4)

    def test_minimum_input_is_16(self, rng):
        enc = Encoder((8, 8, 8), make_rng(0), num_heads=(2, 2, 2))
        assert enc(Tensor(rng.normal(size=(2, 3, 16, 16)).astype(np.float32)))[0].shape == (2, 8, 1, 1)
        with pytest.raises(ShapeError, match="divisible by 16"):
            enc(Tensor(np.zeros((1, 3, 24, 24), dtype=np.float32)))
