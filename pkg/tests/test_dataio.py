import numpy as np
import pytest
from PIL import Image
from scipy.ndimage import distance_transform_edt

from coswin.dataio import (
    MANIFEST, Sample, SynthConfig, augment, load_dataset, load_image_pair, manifest_hash, read_manifest,
    road_geometry, split_for_index, stitch_mean, synth_dataset, synth_sample, tile, tile_origins, untile,
    write_dataset,
)
from coswin.errors import ConfigError, ImageIOError, ImageSizeError, MaskValueError, ShapeError


class TestSynth:
    def test_deterministic(self):
        cfg = SynthConfig(seed=3)
        a, b = synth_sample(cfg, 17), synth_sample(cfg, 17)
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.mask, b.mask)
        assert not np.array_equal(a.mask, synth_sample(cfg, 18).mask)

    def test_independent_of_worker_count(self, monkeypatch):
        cfg = SynthConfig(tile_size=32, seed=1)
        monkeypatch.setenv("COSWIN_THREADS", "1")
        serial = synth_dataset(cfg, 12)
        monkeypatch.setenv("COSWIN_THREADS", "4")
        threaded = synth_dataset(cfg, 12)
        for s, t in zip(serial, threaded):
            np.testing.assert_array_equal(s.image, t.image)

    def test_split_proportions(self):
        splits = [split_for_index(i) for i in range(250)]
        assert (splits.count("train"), splits.count("val"), splits.count("test")) == (200, 25, 25)

    def test_road_fraction_in_open_interval(self):
        cfg = SynthConfig(seed=0)
        for i in range(30):
            frac = synth_sample(cfg, i).mask.mean()
            assert 0 < frac < 0.5

    def test_images_are_8bit_quantised(self):
        img = synth_sample(SynthConfig(), 0).image
        assert img.dtype == np.float32
        np.testing.assert_array_equal(np.round(img * 255) / 255, img.astype(np.float64).astype(np.float32))

    @pytest.mark.parametrize("width", [3, 4, 5, 6])
    def test_rasterised_width_matches_edt(self, width):
        # straight single road: the deepest road pixel sits about width/2 from the edge
        cfg = SynthConfig(roads=(1, 1), road_width=(width, width), curvature=0.0, seed=width)
        for i in range(5):
            _, mask, _ = road_geometry(cfg, i)
            # pad so the world outside the tile counts as background
            depth = distance_transform_edt(np.pad(mask, 1)).max()
            assert abs(2 * depth - width) <= 2.0

    def test_size_must_be_divisible_by_16(self):
        with pytest.raises(ConfigError, match="divisible by 16"):
            SynthConfig(tile_size=60)


class TestFiles:
    def test_roundtrip_and_manifest(self, tmp_path):
        samples = synth_dataset(SynthConfig(tile_size=32, seed=2), 10)
        manifest = write_dataset(samples, tmp_path)
        assert len(read_manifest(manifest)) == 10
        loaded = load_dataset(tmp_path, verify=True)
        got = {s.id: s for split in loaded.values() for s in split}
        for s in samples:
            np.testing.assert_array_equal(got[s.id].image, s.image)
            np.testing.assert_array_equal(got[s.id].mask, s.mask)
            assert got[s.id].split == s.split

    def test_manifest_hash_reproducible(self, tmp_path):
        cfg = SynthConfig(tile_size=32, seed=4)
        h1 = manifest_hash(write_dataset(synth_dataset(cfg, 6), tmp_path / "a"))
        h2 = manifest_hash(write_dataset(synth_dataset(cfg, 6), tmp_path / "b"))
        assert h1 == h2

    def test_tampered_file_detected(self, tmp_path):
        write_dataset(synth_dataset(SynthConfig(tile_size=32), 3), tmp_path)
        victim = sorted((tmp_path / "masks").iterdir())[0]
        Image.fromarray(np.zeros((32, 32), dtype=np.uint8)).save(victim)
        with pytest.raises(ConfigError, match="hash"):
            load_dataset(tmp_path, verify=True)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(ConfigError):
            load_dataset(tmp_path)

    def test_malformed_manifest(self, tmp_path):
        (tmp_path / MANIFEST).write_text("a\tnowhere\tx\ty\n")
        with pytest.raises(ConfigError):
            read_manifest(tmp_path / MANIFEST)


def _pair(tmp_path, mask, suffix=".png", size=(8, 8)):
    img = tmp_path / f"img{suffix}"
    Image.fromarray(np.full(size + (3,), 100, dtype=np.uint8)).save(img)
    m = tmp_path / "mask.png"
    Image.fromarray(mask).save(m)
    return img, m


class TestImagePairs:
    def test_mask_binarised_at_128(self, tmp_path):
        mask = np.zeros((8, 8), dtype=np.uint8)
        mask[0, :2] = [200, 255]
        s = load_image_pair(*_pair(tmp_path, mask))
        assert s.mask.sum() == 2
        assert s.image.shape == (3, 8, 8)

    def test_ambiguous_mask_rejected(self, tmp_path):
        mask = np.full((8, 8), 128, dtype=np.uint8)
        with pytest.raises(MaskValueError):
            load_image_pair(*_pair(tmp_path, mask))

    def test_size_mismatch(self, tmp_path):
        with pytest.raises(ImageSizeError):
            load_image_pair(*_pair(tmp_path, np.zeros((8, 8), dtype=np.uint8), size=(8, 9)))

    def test_jpeg_mask_rejected(self, tmp_path):
        img, _ = _pair(tmp_path, np.zeros((8, 8), dtype=np.uint8))
        jpg = tmp_path / "mask.jpg"
        Image.fromarray(np.zeros((8, 8), dtype=np.uint8)).save(jpg)
        with pytest.raises(MaskValueError):
            load_image_pair(img, jpg)

    def test_jpeg_image_warns(self, tmp_path):
        with pytest.warns(UserWarning, match="lossy"):
            load_image_pair(*_pair(tmp_path, np.zeros((8, 8), dtype=np.uint8), suffix=".jpg"))

    def test_unreadable(self, tmp_path):
        bad = tmp_path / "x.png"
        bad.write_bytes(b"not an image")
        with pytest.raises(ImageIOError):
            load_image_pair(bad, bad)

    def test_sample_contract(self):
        with pytest.raises(ShapeError):
            Sample(np.zeros((1, 4, 4), np.float32), np.zeros((4, 4), bool), "x")
        with pytest.raises(MaskValueError):
            Sample(np.zeros((3, 4, 4), np.float32), np.zeros((4, 4), np.uint8), "x")


class TestTiling:
    @pytest.mark.parametrize("extent,size,stride", [(64, 32, 32), (70, 32, 32), (40, 32, 16), (32, 32, 32)])
    def test_origins_cover_flush(self, extent, size, stride):
        o = tile_origins(extent, size, stride)
        covered = np.zeros(extent, dtype=bool)
        for s in o:
            covered[s:s + size] = True
        assert covered.all()
        assert o[-1] + size == extent
        assert o == sorted(set(o))

    def test_tile_too_big(self):
        with pytest.raises(ShapeError):
            tile_origins(20, 32, 32)

    def test_tile_untile_roundtrip(self, rng):
        img = rng.random((3, 50, 70)).astype(np.float32)
        s = Sample(img, rng.random((50, 70)) < 0.3, "big")
        tiles = tile(s, 32)
        back = untile(tiles, 50, 70)
        np.testing.assert_array_equal(back.image, img)
        np.testing.assert_array_equal(back.mask, s.mask)
        assert back.id == "big"

    def test_stitch_mean_overlap(self):
        # two 4-wide tiles on a 6-wide strip overlap in columns 2..3
        a, b = np.full((4, 4), 0.2), np.full((4, 4), 0.8)
        out = stitch_mean([a, b], [(0, 0), (0, 2)], 4, 6)
        np.testing.assert_allclose(out[:, :2], 0.2)
        np.testing.assert_allclose(out[:, 2:4], 0.5)
        np.testing.assert_allclose(out[:, 4:], 0.8)


def test_augment_keeps_image_and_mask_aligned(rng):
    img = rng.random((3, 8, 8)).astype(np.float32)
    mask = img[0] > 0.5
    for _ in range(20):
        a, m = augment(img, mask, rng)
        np.testing.assert_array_equal(a[0] > 0.5, m)
        assert sorted(a.ravel()) == sorted(img.ravel())
