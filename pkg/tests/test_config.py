import pytest

from coswin import config
from coswin.config import RunConfig
from coswin.errors import ConfigError
from coswin.roadnet import NetworkConfig


def test_default_roundtrip():
    cfg = RunConfig()
    assert config.loads(cfg.dumps()) == cfg


def test_nondefault_roundtrip(tmp_path):
    cfg = config.loads("""
seed = 7
[network]
tile_size = 32
widths = [8, 8, 16]
num_heads = [2, 2, 2]
use_cfilter = false
[optim]
epochs = 3
""")
    assert cfg.network.widths == (8, 8, 16)
    assert cfg.network.use_cfilter is False
    cfg.save(tmp_path / "c.toml")
    assert config.load(tmp_path / "c.toml") == cfg


def test_tuples_survive_roundtrip():
    cfg = RunConfig(network=NetworkConfig(tile_size=32, widths=(8, 8, 16), num_heads=(2, 2, 2)))
    back = config.loads(cfg.dumps())
    assert isinstance(back.network.widths, tuple)


@pytest.mark.parametrize("text,match", [
    ("colour = 1", "top-level"),
    ("[network]\ndepth = 3", r"\[network\]"),
    ("[optim]\nbatch_size = 1", "batch_size"),
    ("[loss]\nalpha = -1", "alpha"),
    ("[network]\ntile_size = 40", "16"),
    ("network = 3", "table"),
    ("[optim\nlr = 1", "TOML"),
])
def test_invalid_configs(text, match):
    with pytest.raises(ConfigError, match=match):
        config.loads(text)
