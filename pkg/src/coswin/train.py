"""SGD training loop, evaluation and tiled inference."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import apply_state, collect_state, save_checkpoint
from .config import RunConfig
from .dataio import SPLITS, Sample, augment, load_dataset, stitch_mean, synth_dataset, tile_origins
from .errors import ConfigError, TensorMismatchError, TrainingDiverged
from .layers import make_rng
from .loss import RoadLoss, TaskWeights
from .metrics import ConfusionCounts, Scores, confusion, micro_scores
from .roadnet import ABLATIONS, RoadNet, parameter_registry, predict_mask
from .tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)

METRIC_HEADER = ("epoch", "train_loss", "precision", "recall", "f1", "iou", "oa", "w_wbce", "w_l2")


class SGD:
    """Momentum SGD with polynomial learning-rate decay."""

    def __init__(self, named_params, lr=0.01, momentum=0.9, total_steps=1, power=0.9):
        self.params = [(n, t) for n, t in named_params]
        self.lr, self.momentum = lr, momentum
        self.total_steps, self.power = max(int(total_steps), 1), power
        self.buffers = {n: np.zeros_like(t.data) for n, t in self.params}
        self.step_count = 0

    def current_lr(self) -> float:
        frac = min(self.step_count / self.total_steps, 1.0)
        return self.lr * (1.0 - frac) ** self.power

    def zero_grad(self) -> None:
        for _, t in self.params:
            t.grad = None

    def step(self) -> None:
        lr = self.current_lr()
        for n, t in self.params:
            if t.grad is None or not t.requires_grad:
                continue
            buf = self.buffers[n]
            buf *= self.momentum
            buf += t.grad
            t.data -= (lr * buf).astype(t.dtype, copy=False)
        self.step_count += 1

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"optim.momentum.{n}": b for n, b in self.buffers.items()}
        state["optim.step"] = np.array(self.step_count, dtype=np.float64)
        return state

    def load_state_dict(self, state, strict: bool = True) -> None:
        for n, buf in self.buffers.items():
            key = f"optim.momentum.{n}"
            if key not in state:
                if strict:
                    raise TensorMismatchError(f"checkpoint lacks optimizer moment {key!r}", key)
                continue
            if state[key].shape != buf.shape:
                raise TensorMismatchError(f"optimizer moment {key!r} has shape {state[key].shape}", key)
            self.buffers[n] = state[key].astype(buf.dtype, copy=True)
        if "optim.step" in state:
            self.step_count = int(state["optim.step"])


@dataclass
class TrainResult:
    model: RoadNet
    weights: TaskWeights
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_iou: float = -1.0
    best_state: dict = field(default_factory=dict, repr=False)

    def restore_best(self) -> RoadNet:
        """Load the best-val-IoU weights into ``model`` and return it."""
        if self.best_state:
            apply_state(self.best_state, self.model, self.weights)
        return self.model


def stack(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([s.image for s in samples]).astype(np.float32)
    masks = np.stack([s.mask for s in samples])[:, None]
    return images, masks


def predict(model: RoadNet, images: np.ndarray, batch: int = 8) -> np.ndarray:
    """Probabilities [N, 1, H, W] in eval mode, without taping."""
    was_training = model.training
    model.eval()
    dt = model.cfg.np_dtype
    out = []
    with no_grad():
        for i in range(0, len(images), batch):
            out.append(model(Tensor(images[i:i + batch].astype(dt))).data)
    model.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, 1) + images.shape[2:], dtype=dt)


def evaluate(model: RoadNet, samples: Sequence[Sample], threshold: float = 0.5) -> tuple[Scores, list[ConfusionCounts]]:
    images, masks = stack(samples)
    pred = predict_mask(predict(model, images), threshold)
    counts = [confusion(p, m) for p, m in zip(pred, masks)]
    return micro_scores(counts), counts


def build(cfg: RunConfig) -> tuple[RoadNet, TaskWeights]:
    model = RoadNet(cfg.network, seed=cfg.seed)
    weights = TaskWeights(cfg.loss, dtype=cfg.network.np_dtype)
    return model, weights


def train(cfg: RunConfig, data: dict[str, list[Sample]], out_dir=None, verbose: bool = False) -> TrainResult:
    """Train per ``cfg``; writes config.toml, metrics.csv, best.ckpt and last.ckpt to ``out_dir``."""
    train_set, val_set = data.get("train", []), data.get("val", [])
    if len(train_set) < 2 or not val_set:
        raise ConfigError("training needs >= 2 train samples and a non-empty val split")
    for s in train_set[:1]:
        if s.image.shape[1:] != (cfg.network.tile_size,) * 2:
            raise ConfigError(f"samples are {s.image.shape[1:]}, config tile size is {cfg.network.tile_size}")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.toml")

    model, weights = build(cfg)
    registry = parameter_registry(model)
    objective = RoadLoss(cfg.loss, weights)
    oc = cfg.optim
    bs = oc.batch_size
    steps_per_epoch = len(train_set) // bs + (1 if len(train_set) % bs >= 2 else 0)
    named = [(lp.name, lp.tensor) for lp in registry] + [("loss.s1", weights.s1), ("loss.s2", weights.s2)]
    opt = SGD(named, oc.lr, oc.momentum, oc.epochs * steps_per_epoch, oc.poly_power)
    rng = make_rng(cfg.seed + 1_000_003)
    images, masks = stack(train_set)
    dt = cfg.network.np_dtype
    result = TrainResult(model, weights)

    writer = None
    fh = None
    if out is not None:
        fh = open(out / "metrics.csv", "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_HEADER)
    try:
        for epoch in range(1, oc.epochs + 1):
            model.train()
            order = rng.permutation(len(train_set))
            losses = []
            for start in range(0, len(order), bs):
                idx = order[start:start + bs]
                if len(idx) < 2:
                    continue
                xb, yb = images[idx], masks[idx]
                if oc.augment:
                    pairs = [augment(x, y[0], rng) for x, y in zip(xb, yb)]
                    xb = np.stack([p[0] for p in pairs])
                    yb = np.stack([p[1] for p in pairs])[:, None]
                opt.zero_grad()
                pred = model(Tensor(xb.astype(dt)))
                loss, _, _ = objective(pred, yb, registry)
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
                backward(loss)
                opt.step()
                losses.append(value)
            val, _ = evaluate(model, val_set, cfg.threshold)
            w1, w2 = weights.effective()
            row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "precision": val.precision,
                   "recall": val.recall, "f1": val.f1, "iou": val.iou, "oa": val.oa,
                   "w_wbce": w1, "w_l2": w2}
            result.history.append(row)
            if writer is not None:
                writer.writerow([epoch] + [repr(float(row[k])) for k in METRIC_HEADER[1:]])
                fh.flush()
            if verbose:
                log.info("epoch %d loss %.4f val f1 %.4f iou %.4f", epoch, row["train_loss"], val.f1, val.iou)
            improved = val.iou > result.best_iou
            if improved:
                result.best_iou, result.best_epoch = val.iou, epoch
                result.best_state = {k: v.copy() for k, v in collect_state(model, weights).items()}
            if out is not None:
                save_checkpoint(out / "last.ckpt", model, weights, opt)
                if improved:
                    save_checkpoint(out / "best.ckpt", model, weights, opt)
            if oc.target_iou and val.iou >= oc.target_iou:
                break
    finally:
        if fh is not None:
            fh.close()
    return result


def load_data(cfg: RunConfig) -> dict[str, list[Sample]]:
    """Splits from ``cfg.data.dir`` or, when unset, synthesised from ``cfg.synth``."""
    if cfg.data.dir:
        return load_dataset(cfg.data.dir)
    samples = synth_dataset(cfg.synth, cfg.data.count)
    return {split: [s for s in samples if s.split == split] for split in SPLITS}


@dataclass
class AblationRun:
    ablation: str
    seed: int
    test: Scores
    best_epoch: int
    seconds: float


def ablate(cfg: RunConfig, data: dict[str, list[Sample]], seeds: Sequence[int],
           names: Sequence[str] = ("none", "coswin", "cfilter", "both"), out_dir=None) -> list[AblationRun]:
    """Train each ablation for each seed; score the best-val checkpoint on the test split."""
    runs = []
    for name in names:
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation {name!r}")
        use_coswin, use_cfilter = ABLATIONS[name]
        net = dataclasses.replace(cfg.network, use_coswin=use_coswin, use_cfilter=use_cfilter)
        for seed in seeds:
            run_cfg = dataclasses.replace(cfg, seed=int(seed), network=net)
            sub = Path(out_dir) / f"{name}_seed{seed}" if out_dir is not None else None
            t0 = time.perf_counter()
            res = train(run_cfg, data, sub)
            test, _ = evaluate(res.restore_best(), data["test"], cfg.threshold)
            runs.append(AblationRun(name, int(seed), test, res.best_epoch, time.perf_counter() - t0))
            log.info("ablation %s seed %d: test f1 %.4f iou %.4f (%.0fs)", name, seed, test.f1, test.iou,
                     runs[-1].seconds)
    return runs


def ablation_means(runs: Sequence[AblationRun]) -> dict[str, Scores]:
    out = {}
    for name in dict.fromkeys(r.ablation for r in runs):
        rows = np.array([r.test.as_row() for r in runs if r.ablation == name])
        out[name] = Scores(*map(float, rows.mean(axis=0)))
    return out


def infer_image(model: RoadNet, image: np.ndarray, threshold: float = 0.5, batch: int = 8):
    """Tile an image [3, H, W] flush to its edges, predict, and average overlaps."""
    size = model.cfg.tile_size
    _, h, w = image.shape
    origins = [(y, x) for y in tile_origins(h, size, size) for x in tile_origins(w, size, size)]
    tiles = np.stack([image[:, y:y + size, x:x + size] for y, x in origins])
    probs = predict(model, tiles, batch)[:, 0]
    prob = stitch_mean(list(probs), origins, h, w)
    return prob, predict_mask(prob, threshold)
