import numpy as np
import pytest

from coswin.errors import ConfigError, DomainError, ShapeError
from coswin.roadnet import ABLATIONS, NetworkConfig, RoadNet, count_parameters, parameter_registry, predict_mask
from coswin.tensor import Tensor


def swin_sub_block_params(c, heads, m):
    ln = 2 * c
    attn = (3 * c * c + 3 * c) + (c * c + c) + (2 * m - 1) ** 2 * heads
    mlp = (4 * c * c + 4 * c) + (4 * c * c + c)
    return 2 * ln + attn + mlp


def test_forward_shape_and_range(rng, tiny_net_cfg):
    net = RoadNet(tiny_net_cfg, seed=0)
    p = net(Tensor(rng.random((2, 3, 32, 32)).astype(np.float32)))
    assert p.shape == (2, 1, 32, 32)
    assert p.dtype == np.float32
    assert ((p.data > 0) & (p.data < 1)).all()


def test_decoder_resolutions(rng, tiny_net_cfg):
    net = RoadNet(tiny_net_cfg, seed=0)
    _, (d1, d2, d3), skips = net(Tensor(rng.random((2, 3, 32, 32)).astype(np.float32)), return_decoder=True)
    assert [d.shape[2] for d in (d3, d2, d1)] == [4, 8, 16]
    assert [s.shape[2] for s in skips] == [16, 8, 4]


def test_wrong_input_size_rejected(tiny_net_cfg):
    with pytest.raises(ShapeError):
        RoadNet(tiny_net_cfg)(Tensor(np.zeros((1, 3, 64, 64), dtype=np.float32)))


def test_ablation_parameter_deltas():
    base = NetworkConfig()
    counts = {name: count_parameters(RoadNet(NetworkConfig.for_ablation(name))) for name in ABLATIONS}
    k = base.cfilter_kernel
    assert counts["cfilter"] - counts["none"] == 3 * (2 * k * k + 1)
    w0, w1, w2 = base.widths
    swin = 0
    for cin, cout, heads in zip((w0, w0, w1), base.widths, base.num_heads):
        swin += cin * cout * 4 + cout + 2 * swin_sub_block_params(cout, heads, base.window_size)
    assert counts["coswin"] - counts["none"] == swin
    assert counts["both"] == counts["coswin"] + counts["cfilter"] - counts["none"]


def test_registry_sorted_and_unique(tiny_net_cfg):
    names = [lp.name for lp in parameter_registry(RoadNet(tiny_net_cfg))]
    assert names == sorted(names)
    assert len(set(names)) == len(names)


def test_seed_controls_init(tiny_net_cfg):
    a, b, c = RoadNet(tiny_net_cfg, 1), RoadNet(tiny_net_cfg, 1), RoadNet(tiny_net_cfg, 2)
    wa, wb, wc = (dict(m.named_parameters())["head.weight"].data for m in (a, b, c))
    np.testing.assert_array_equal(wa, wb)
    assert not np.array_equal(wa, wc)


def test_predict_mask_threshold():
    np.testing.assert_array_equal(predict_mask(np.array([0.2, 0.5, 0.9])), [False, True, True])
    with pytest.raises(DomainError):
        predict_mask(np.array([0.5]), 1.0)


@pytest.mark.parametrize("kw", [
    {"tile_size": 40}, {"fusion": "concat"}, {"dtype": "float16"}, {"cfilter_kernel": 4},
    {"widths": (8, 8)}, {"widths": (6, 6, 6), "num_heads": (4, 4, 4)},
])
def test_network_config_validation(kw):
    with pytest.raises(ConfigError):
        NetworkConfig(**kw)


def test_unknown_ablation():
    with pytest.raises(ConfigError):
        NetworkConfig.for_ablation("swin")
