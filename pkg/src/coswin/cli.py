"""Command-line entry point: synth, train, eval, infer, gradcheck, ablate.

Every failure exits non-zero after printing one line to stderr::

    error kind=<ExceptionClass> msg=<message on one line>
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import config as config_mod
from .checkpoint import load_checkpoint
from .config import RunConfig
from .dataio import (
    SPLITS, SynthConfig, load_dataset, manifest_hash, save_png, synth_dataset,
    open_image, to_uint8, write_dataset,
)
from .errors import CheckpointError, CoSwinError, ConfigError, ImageIOError, TrainingDiverged
from .gradcheck import run_suite
from .metrics import confusion, micro_scores, report_csv, report_table
from .roadnet import ABLATIONS
from .train import ablate, ablation_means, build, evaluate, infer_image, load_data, train

log = logging.getLogger("coswin")

EXIT_CODES = {ConfigError: 2, ImageIOError: 3, CheckpointError: 4, TrainingDiverged: 5}
GRADCHECK_BUDGET = 60.0


def _exit_code(exc: BaseException) -> int:
    for kind, code in EXIT_CODES.items():
        if isinstance(exc, kind):
            return code
    return 1


def _one_line(text) -> str:
    return " ".join(str(text).split())


def _run_config(args) -> RunConfig:
    cfg = config_mod.load(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "ablation", None):
        use_coswin, use_cfilter = ABLATIONS[args.ablation]
        cfg.network = dataclasses.replace(cfg.network, use_coswin=use_coswin, use_cfilter=use_cfilter)
    if getattr(args, "epochs", None):
        cfg.optim = dataclasses.replace(cfg.optim, epochs=args.epochs)
    if getattr(args, "data", None):
        cfg.data = dataclasses.replace(cfg.data, dir=str(args.data))
    return cfg


def _model_from_checkpoint(ckpt: Path, config_path=None):
    """Rebuild the network described by the run's config.toml and strictly load ``ckpt``."""
    path = Path(config_path) if config_path else ckpt.parent / "config.toml"
    if not path.exists():
        raise ConfigError(f"no config at {path}; pass --config")
    cfg = config_mod.load(path)
    model, weights = build(cfg)
    load_checkpoint(ckpt, model, weights)
    model.eval()
    return cfg, model


# ------------------------------------------------------------ commands


def cmd_synth(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"output directory {out} exists and is not empty (use --force)")
    cfg = SynthConfig(tile_size=args.size, seed=args.seed)
    samples = synth_dataset(cfg, args.count)
    manifest = write_dataset(samples, out)
    counts = {s: sum(x.split == s for x in samples) for s in SPLITS}
    print(f"wrote {len(samples)} pairs to {out} ({', '.join(f'{k} {v}' for k, v in counts.items())})")
    print(f"manifest sha256 {manifest_hash(manifest)}")
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args)
    out = Path(args.out or cfg.out_dir)
    data = load_data(cfg)
    res = train(cfg, data, out, verbose=True)
    print(f"best val iou {res.best_iou:.4f} at epoch {res.best_epoch}; checkpoints in {out}")
    return 0


def cmd_eval(args) -> int:
    data = load_dataset(args.data)
    samples = data[args.split]
    if not samples:
        raise ConfigError(f"split {args.split!r} in {args.data} is empty")
    if args.pred_dir:
        counts = []
        for s in samples:
            pred = np.asarray(open_image(Path(args.pred_dir) / f"{s.id}.png").convert("L")) >= 128
            counts.append(confusion(pred, s.mask))
        scores, name = micro_scores(counts), "masks"
    else:
        if not args.checkpoint:
            raise ConfigError("eval needs a checkpoint or --pred-dir")
        cfg, model = _model_from_checkpoint(Path(args.checkpoint), args.config)
        scores, _ = evaluate(model, samples, args.threshold if args.threshold is not None else cfg.threshold)
        name = Path(args.checkpoint).stem
    rows = [(name, scores)]
    text = report_csv(rows)
    if args.csv:
        Path(args.csv).write_text(text)
    else:
        sys.stdout.write(text)
    print(report_table(rows))
    return 0


def cmd_infer(args) -> int:
    cfg, model = _model_from_checkpoint(Path(args.checkpoint), args.config)
    image_path = Path(args.image)
    img = np.asarray(open_image(image_path).convert("RGB"), dtype=np.float32).transpose(2, 0, 1) / 255.0
    threshold = args.threshold if args.threshold is not None else cfg.threshold
    prob, mask = infer_image(model, img, threshold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    prob_path, mask_path = out / f"{image_path.stem}_prob.png", out / f"{image_path.stem}_mask.png"
    save_png(to_uint8(prob), prob_path)
    save_png(mask.astype(np.uint8) * 255, mask_path)
    print(f"wrote {prob_path} and {mask_path}")
    return 0


def cmd_gradcheck(args) -> int:
    t0 = time.perf_counter()
    results = run_suite(args.seed, args.only or None)
    for r in results:
        status = "ok  " if r.passed else "FAIL"
        print(f"{status} {r.name:<28} worst {r.worst:.3e}  tol {r.tol:.0e}  "
              f"checked {r.checked} skipped {r.skipped}  {r.seconds:.2f}s")
    elapsed = time.perf_counter() - t0
    print(f"total {elapsed:.1f}s")
    if elapsed > GRADCHECK_BUDGET:
        log.warning("gradcheck took %.1fs, over the %.0fs budget", elapsed, GRADCHECK_BUDGET)
    bad = [r.name for r in results if not r.passed]
    if bad:
        print(f"error kind=GradcheckFailed msg=offenders: {', '.join(bad)}", file=sys.stderr)
        return 1
    return 0


def cmd_ablate(args) -> int:
    cfg = _run_config(args)
    data = load_data(cfg)
    seeds = [cfg.seed + k for k in range(args.seeds)]
    runs = ablate(cfg, data, seeds, args.only or tuple(ABLATIONS), args.out)
    for r in runs:
        print(f"{r.ablation:<8} seed {r.seed}: test f1 {r.test.f1:.4f} iou {r.test.iou:.4f} "
              f"(best epoch {r.best_epoch}, {r.seconds:.0f}s)")
    rows = list(ablation_means(runs).items())
    print(report_table(rows))
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "ablation.csv").write_text(report_csv(rows))
    return 0


# ------------------------------------------------------------- parser


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="coswin", description="CoSwin road segmentation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic road dataset")
    s.add_argument("--count", type=_positive, default=250)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true", help="write into a non-empty directory")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train from a TOML run config")
    t.add_argument("config", nargs="?", help="run config (defaults if omitted)")
    t.add_argument("--ablation", choices=sorted(ABLATIONS))
    t.add_argument("--data", help="dataset directory, overrides [data].dir")
    t.add_argument("--epochs", type=_positive)
    t.add_argument("--out", help="run directory, overrides out_dir")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint (or mask PNGs) on a dataset split")
    e.add_argument("checkpoint", nargs="?")
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=SPLITS, default="test")
    e.add_argument("--config", help="run config; defaults to config.toml beside the checkpoint")
    e.add_argument("--pred-dir", help="score predicted mask PNGs named <id>.png instead")
    e.add_argument("--threshold", type=float)
    e.add_argument("--csv", help="write the CSV report here instead of stdout")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="predict one image of any tileable size")
    i.add_argument("checkpoint")
    i.add_argument("image")
    i.add_argument("--out", required=True)
    i.add_argument("--config")
    i.add_argument("--threshold", type=float)
    i.set_defaults(func=cmd_infer)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--only", nargs="*", help="run only checks with these names")
    g.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablate", help="train all ablations over several seeds")
    a.add_argument("config", nargs="?")
    a.add_argument("--seeds", type=_positive, default=3)
    a.add_argument("--only", nargs="*", choices=sorted(ABLATIONS))
    a.add_argument("--data")
    a.add_argument("--epochs", type=_positive)
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or args.command in ("train", "ablate") else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (CoSwinError, OSError) as exc:
        print(f"error kind={type(exc).__name__} msg={_one_line(exc)}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
