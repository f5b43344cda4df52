"""Synthetic road tiles, PNG/JPEG ingestion, tiling, splits and manifests."""
from __future__ import annotations

import hashlib
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import kernels
from ._jit import worker_count
from .errors import ConfigError, ImageIOError, ImageSizeError, MaskValueError, ShapeError

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
MANIFEST = "manifest.tsv"
# Mask pixels strictly inside this band count as ambiguous.
MASK_AMBIGUOUS = (64, 192)
MASK_AMBIGUOUS_FRACTION = 0.01


@dataclass
class Sample:
    image: np.ndarray  # float32 [3, H, W] in [0, 1]
    mask: np.ndarray  # bool [H, W]
    id: str
    split: str = "train"
    origin: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ShapeError(f"image must be [3, H, W], got {self.image.shape}")
        if self.mask.shape != self.image.shape[1:]:
            raise ImageSizeError(f"mask {self.mask.shape} does not match image {self.image.shape[1:]}")
        if self.mask.dtype != bool:
            raise MaskValueError("mask must be boolean")
        if self.split not in SPLITS:
            raise ConfigError(f"split must be one of {SPLITS}")


@dataclass
class SynthConfig:
    tile_size: int = 64
    roads: tuple[int, int] = (1, 3)
    road_width: tuple[int, int] = (3, 6)
    curvature: float = 0.35  # max heading change per polyline step, radians
    step: float = 8.0
    occluders: tuple[int, int] = (0, 3)
    occluder_size: tuple[int, int] = (4, 9)
    noise_sigma: float = 0.04
    seed: int = 0

    def __post_init__(self):
        self.roads = tuple(int(v) for v in self.roads)
        self.road_width = tuple(int(v) for v in self.road_width)
        self.occluders = tuple(int(v) for v in self.occluders)
        self.occluder_size = tuple(int(v) for v in self.occluder_size)
        if self.tile_size % 16:
            raise ConfigError(f"tile size {self.tile_size} must be divisible by 16")
        if not 1 <= self.roads[0] <= self.roads[1]:
            raise ConfigError("roads range must satisfy 1 <= lo <= hi")
        if not 1 <= self.road_width[0] <= self.road_width[1]:
            raise ConfigError("road_width range must satisfy 1 <= lo <= hi")
        if not 0 <= self.occluders[0] <= self.occluders[1]:
            raise ConfigError("occluders range must satisfy 0 <= lo <= hi")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def split_for_index(index: int) -> str:
    """80/10/10 by index modulo 10."""
    r = index % 10
    return "train" if r < 8 else ("val" if r == 8 else "test")


# --------------------------------------------------------------- synthesis


def _streams(seed: int, index: int) -> tuple[np.random.Generator, np.random.Generator]:
    bitgen = np.random.Philox(key=np.array([seed, index], dtype=np.uint64))
    return np.random.Generator(bitgen), np.random.Generator(bitgen.jumped())


def _polyline(rng: np.random.Generator, size: int, curvature: float, step: float) -> np.ndarray:
    """Random walk entering from a border, heading inward, until it leaves the tile."""
    side = rng.integers(4)
    t = rng.uniform(0.15, 0.85) * size
    start, heading = {
        0: ((t, -1.0), math.pi / 2),
        1: ((size, t), math.pi),
        2: ((t, size), -math.pi / 2),
        3: ((-1.0, t), 0.0),
    }[int(side)]
    heading += rng.uniform(-0.5, 0.5)
    pts = [start]
    x, y = start
    margin = 2 * step
    for _ in range(int(8 * size / step)):
        heading += rng.uniform(-curvature, curvature)
        x += step * math.cos(heading)
        y += step * math.sin(heading)
        pts.append((x, y))
        if x < -margin or y < -margin or x > size + margin or y > size + margin:
            break
    return np.asarray(pts)


def _smooth_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    grid = rng.uniform(-1, 1, size=(cells + 1, cells + 1))
    img = Image.fromarray(grid.astype(np.float32), mode="F").resize((size, size), Image.BILINEAR)
    return np.asarray(img, dtype=np.float64)


def road_geometry(cfg: SynthConfig, index: int):
    """Centre-line segments and per-road widths for sample ``index``."""
    rng, _ = _streams(cfg.seed, index)
    size = cfg.tile_size
    while True:
        roads = []
        for _ in range(int(rng.integers(cfg.roads[0], cfg.roads[1] + 1))):
            pts = _polyline(rng, size, cfg.curvature, cfg.step)
            width = int(rng.integers(cfg.road_width[0], cfg.road_width[1] + 1))
            roads.append((np.concatenate([pts[:-1], pts[1:]], axis=1), width))
        mask = np.zeros((size, size), dtype=bool)
        for segs, width in roads:
            mask |= kernels.segment_distance(segs, size, size) <= width / 2.0
        frac = mask.mean()
        if 0.0 < frac < 0.5:
            return roads, mask, rng


def render(cfg: SynthConfig, index: int, occlude: bool = True) -> Sample:
    roads, mask, rng = road_geometry(cfg, index)
    _, occ_rng = _streams(cfg.seed, index)
    size = cfg.tile_size
    sigma = cfg.noise_sigma

    # background: green-brown base, low-frequency field texture, pixel noise
    base = np.array([rng.uniform(0.25, 0.45), rng.uniform(0.35, 0.55), rng.uniform(0.15, 0.3)])
    tex = _smooth_noise(rng, size, 4) * 0.08 + _smooth_noise(rng, size, 12) * 0.04
    img = base[:, None, None] + tex[None] + rng.normal(0, sigma, size=(3, size, size))

    gray = rng.uniform(0.48, 0.68)
    road = gray + 0.02 * rng.uniform(-1, 1, size=3)[:, None, None] + rng.normal(0, sigma, size=(3, size, size))
    img = np.where(mask[None], road, img)

    if occlude:
        n_occ = int(occ_rng.integers(cfg.occluders[0], cfg.occluders[1] + 1))
        road_px = np.argwhere(mask)
        yy, xx = np.mgrid[0:size, 0:size]
        for _ in range(n_occ):
            cy, cx = road_px[occ_rng.integers(len(road_px))]
            r = occ_rng.uniform(cfg.occluder_size[0], cfg.occluder_size[1]) / 2.0
            if occ_rng.uniform() < 0.5:
                # tree canopy: dark green disc
                blob = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
                colour = np.array([0.12, occ_rng.uniform(0.25, 0.4), 0.1])
                img = np.where(blob[None], colour[:, None, None] + occ_rng.normal(0, sigma, (3, size, size)), img)
            else:
                # building shadow: darkened rectangle
                ry = r * occ_rng.uniform(0.6, 1.4)
                blob = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= r)
                img = np.where(blob[None], img * 0.35, img)

    img8 = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    image = img8.astype(np.float32) / 255.0
    return Sample(image, mask, f"synth-{cfg.seed}-{index:05d}", split_for_index(index))


def synth_sample(cfg: SynthConfig, index: int) -> Sample:
    """Deterministic synthetic tile ``index``: bit-identical for identical (cfg, index)."""
    return render(cfg, index, occlude=True)


def synth_dataset(cfg: SynthConfig, count: int) -> list[Sample]:
    workers = min(worker_count(), max(count, 1))
    if workers == 1:
        return [synth_sample(cfg, i) for i in range(count)]
    with ThreadPoolExecutor(workers) as ex:
        return list(ex.map(lambda i: synth_sample(cfg, i), range(count)))


# --------------------------------------------------------------------- I/O


def open_image(path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
        return img
    except (OSError, UnidentifiedImageError) as exc:
        raise ImageIOError(f"cannot read image {path}: {exc}") from None


def _is_jpeg(path) -> bool:
    return Path(path).suffix.lower() in (".jpg", ".jpeg")


def load_image_pair(image_path, mask_path, sample_id: str | None = None, split: str = "train") -> Sample:
    """Read an RGB image and a single-channel mask; mask binarised at 128."""
    if _is_jpeg(mask_path):
        raise MaskValueError(f"mask {mask_path} must be lossless (PNG), not JPEG")
    if _is_jpeg(image_path):
        warnings.warn(f"{image_path}: JPEG input is lossy", stacklevel=2)
    img = open_image(image_path)
    msk = open_image(mask_path)
    if msk.mode not in ("L", "1", "P", "I", "I;16"):
        raise MaskValueError(f"mask {mask_path} is not single-channel (mode {msk.mode})")
    if img.size != msk.size:
        raise ImageSizeError(f"image {img.size} and mask {msk.size} sizes differ")
    rgb = np.asarray(img.convert("RGB"), dtype=np.uint8)
    m = np.asarray(msk.convert("L"), dtype=np.uint8)
    lo, hi = MASK_AMBIGUOUS
    ambiguous = np.count_nonzero((m > lo) & (m < hi))
    if ambiguous > MASK_AMBIGUOUS_FRACTION * m.size:
        raise MaskValueError(f"mask {mask_path} is not binary: {ambiguous} ambiguous pixels")
    image = rgb.transpose(2, 0, 1).astype(np.float32) / 255.0
    return Sample(image, m >= 128, sample_id or Path(image_path).stem, split)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)


def save_png(array: np.ndarray, path) -> None:
    Image.fromarray(array).save(path, format="PNG")


def save_sample(sample: Sample, image_path, mask_path) -> None:
    save_png(to_uint8(sample.image).transpose(1, 2, 0), image_path)
    save_png(sample.mask.astype(np.uint8) * 255, mask_path)


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_dataset(samples: Sequence[Sample], out_dir) -> Path:
    """Write PNG pairs under ``images/`` and ``masks/`` plus the manifest."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        ip, mp = out / "images" / f"{s.id}.png", out / "masks" / f"{s.id}.png"
        save_sample(s, ip, mp)
        lines.append(f"{s.id}\t{s.split}\t{sha256_file(ip)}\t{sha256_file(mp)}\n")
    manifest = out / MANIFEST
    manifest.write_text("".join(lines))
    return manifest


def read_manifest(path) -> list[tuple[str, str, str, str]]:
    rows = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4 or parts[1] not in SPLITS:
            raise ConfigError(f"{path}:{ln}: malformed manifest line")
        rows.append(tuple(parts))
    return rows


def manifest_hash(path) -> str:
    return sha256_file(path)


def load_dataset(data_dir, verify: bool = False) -> dict[str, list[Sample]]:
    """Load every manifest entry, grouped by split."""
    root = Path(data_dir)
    manifest = root / MANIFEST
    if not manifest.exists():
        raise ConfigError(f"no {MANIFEST} in {root}")
    out: dict[str, list[Sample]] = {s: [] for s in SPLITS}
    for sid, split, ih, mh in read_manifest(manifest):
        ip, mp = root / "images" / f"{sid}.png", root / "masks" / f"{sid}.png"
        if verify and (sha256_file(ip) != ih or sha256_file(mp) != mh):
            raise ConfigError(f"content hash mismatch for sample {sid}")
        out[split].append(load_image_pair(ip, mp, sid, split))
    return out


# ------------------------------------------------------------------ tiling


def tile_origins(extent: int, size: int, stride: int) -> list[int]:
    if size > extent:
        raise ShapeError(f"tile size {size} larger than image extent {extent}")
    starts = list(range(0, extent - size + 1, stride))
    if starts[-1] + size < extent:
        starts.append(extent - size)
    return starts


def tile(sample: Sample, size: int, stride: int | None = None) -> list[Sample]:
    """Raster-order tiles; the last row/column sits flush with the image edge."""
    stride = stride or size
    _, h, w = sample.image.shape
    tiles = []
    for y in tile_origins(h, size, stride):
        for x in tile_origins(w, size, stride):
            tiles.append(Sample(
                np.ascontiguousarray(sample.image[:, y:y + size, x:x + size]),
                np.ascontiguousarray(sample.mask[y:y + size, x:x + size]),
                f"{sample.id}-r{y}-c{x}", sample.split, (y, x),
            ))
    return tiles


def untile(tiles: Sequence[Sample], h: int, w: int) -> Sample:
    """Paste tiles back at their origins (later tiles overwrite overlaps)."""
    image = np.zeros((3, h, w), dtype=np.float32)
    mask = np.zeros((h, w), dtype=bool)
    for t in tiles:
        y, x = t.origin
        s = t.mask.shape[0]
        image[:, y:y + s, x:x + s] = t.image
        mask[y:y + s, x:x + s] = t.mask
    base_id = tiles[0].id.rsplit("-r", 1)[0]
    return Sample(image, mask, base_id, tiles[0].split)


def stitch_mean(maps: Sequence[np.ndarray], origins: Sequence[tuple[int, int]], h: int, w: int) -> np.ndarray:
    """Average overlapping [s, s] tile maps into an [h, w] canvas."""
    acc = np.zeros((h, w), dtype=np.float64)
    hits = np.zeros((h, w), dtype=np.int64)
    for m, (y, x) in zip(maps, origins):
        s = m.shape[0]
        acc[y:y + s, x:x + s] += m
        hits[y:y + s, x:x + s] += 1
    return acc / np.maximum(hits, 1)


# ------------------------------------------------------------ augmentation


def augment(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator):
    """Random horizontal/vertical flip and 90-degree rotation."""
    k = int(rng.integers(4))
    if rng.uniform() < 0.5:
        image, mask = image[:, :, ::-1], mask[:, ::-1]
    if rng.uniform() < 0.5:
        image, mask = image[:, ::-1, :], mask[::-1, :]
    image = np.rot90(image, k, axes=(1, 2))
    mask = np.rot90(mask, k)
    return np.ascontiguousarray(image), np.ascontiguousarray(mask)
