import re
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from coswin.cli import main
from coswin.dataio import MANIFEST, read_manifest

ERROR_LINE = re.compile(r"^error kind=\w+ msg=\S.*$")

TINY = """
seed = 1
[network]
tile_size = 32
widths = [8, 8, 16]
num_heads = [2, 2, 2]
[optim]
epochs = 1
"""


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def error_lines(err):
    return [ln for ln in err.splitlines() if ln.startswith("error ")]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["synth", "--count", "20", "--size", "32", "--seed", "5", "--out", str(out), "--force"]) == 0
    return out


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, dataset):
    root = tmp_path_factory.mktemp("run")
    cfg = root / "tiny.toml"
    cfg.write_text(TINY)
    assert main(["train", str(cfg), "--data", str(dataset), "--out", str(root / "out")]) == 0
    return root / "out"


def test_synth_writes_count_and_splits(capsys, tmp_path):
    code, out, _ = run(capsys, "synth", "--count", 10, "--size", 32, "--out", tmp_path / "d")
    assert code == 0
    rows = read_manifest(tmp_path / "d" / MANIFEST)
    assert len(rows) == 10
    assert len(list((tmp_path / "d" / "images").iterdir())) == 10
    assert "train 8, val 1, test 1" in out


def test_synth_manifest_hash_reproducible(capsys, tmp_path):
    hashes = []
    for name in ("a", "b"):
        _, out, _ = run(capsys, "synth", "--count", 4, "--size", 32, "--seed", 9, "--out", tmp_path / name)
        hashes.append(re.search(r"sha256 (\w+)", out).group(1))
    assert hashes[0] == hashes[1]


def test_synth_refuses_non_empty_dir(capsys, tmp_path):
    (tmp_path / "keep.txt").write_text("x")
    code, _, err = run(capsys, "synth", "--count", 2, "--size", 32, "--out", tmp_path)
    assert code == 2
    assert ERROR_LINE.match(error_lines(err)[0])
    assert "--force" in err
    assert (tmp_path / "keep.txt").read_text() == "x"


def test_synth_bad_size(capsys, tmp_path):
    code, _, err = run(capsys, "synth", "--count", 2, "--size", 60, "--out", tmp_path / "d")
    assert code == 2
    (line,) = error_lines(err)
    assert line.startswith("error kind=ConfigError msg=") and "16" in line


def test_train_outputs(run_dir):
    for name in ("config.toml", "metrics.csv", "best.ckpt", "last.ckpt"):
        assert (run_dir / name).exists()
    lines = (run_dir / "metrics.csv").read_text().splitlines()
    assert lines[0].startswith("epoch,train_loss") and len(lines) == 2


def test_eval_checkpoint(capsys, run_dir, dataset, tmp_path):
    code, out, _ = run(capsys, "eval", run_dir / "best.ckpt", "--data", dataset, "--csv", tmp_path / "r.csv")
    assert code == 0
    header, row = (tmp_path / "r.csv").read_text().splitlines()
    assert header == "model,precision,recall,f1,iou,oa"
    assert row.startswith("best,")
    assert "%" in out


def test_eval_oracle_masks_score_one(capsys, dataset, tmp_path):
    preds = tmp_path / "pred"
    preds.mkdir()
    for sid, split, _, _ in read_manifest(dataset / MANIFEST):
        if split == "test":
            Image.open(dataset / "masks" / f"{sid}.png").save(preds / f"{sid}.png")
    code, out, _ = run(capsys, "eval", "--data", dataset, "--pred-dir", preds)
    assert code == 0
    assert out.splitlines()[1] == "masks,1.0000,1.0000,1.0000,1.0000,1.0000"


def test_infer_writes_pngs(capsys, run_dir, tmp_path, rng):
    img = tmp_path / "scene.png"
    Image.fromarray((rng.random((40, 50, 3)) * 255).astype(np.uint8)).save(img)
    code, _, _ = run(capsys, "infer", run_dir / "best.ckpt", img, "--out", tmp_path / "o")
    assert code == 0
    prob = np.asarray(Image.open(tmp_path / "o" / "scene_prob.png"))
    mask = np.asarray(Image.open(tmp_path / "o" / "scene_mask.png"))
    assert prob.shape == mask.shape == (40, 50)
    assert set(np.unique(mask)) <= {0, 255}


def test_truncated_checkpoint_exit_code(capsys, run_dir, dataset, tmp_path):
    bad = tmp_path / "best.ckpt"
    bad.write_bytes((run_dir / "best.ckpt").read_bytes()[:100])
    (tmp_path / "config.toml").write_bytes((run_dir / "config.toml").read_bytes())
    code, _, err = run(capsys, "eval", bad, "--data", dataset)
    assert code == 4
    (line,) = error_lines(err)
    assert line.startswith("error kind=TruncatedError msg=")


def test_missing_image_exit_code(capsys, run_dir, tmp_path):
    code, _, err = run(capsys, "infer", run_dir / "best.ckpt", tmp_path / "nope.png", "--out", tmp_path)
    assert code == 3
    assert ERROR_LINE.match(error_lines(err)[0])


def test_config_error_on_unknown_key(capsys, tmp_path):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("[optim]\nwarmup = 3\n")
    code, _, err = run(capsys, "train", cfg)
    assert code == 2
    assert "warmup" in error_lines(err)[0]


def test_gradcheck_subset(capsys):
    code, out, err = run(capsys, "gradcheck", "--only", "elementwise.tanh", "matmul")
    assert code == 0
    assert out.count("ok  ") == 2
    assert not error_lines(err)


def test_console_script_entry():
    res = subprocess.run([sys.executable, "-m", "coswin.cli", "synth", "--count", "1", "--size", "33",
                          "--out", "/nonexistent/x"], capture_output=True, text=True)
    assert res.returncode == 2
    assert res.stderr.strip().splitlines()[-1].startswith("error kind=ConfigError")
