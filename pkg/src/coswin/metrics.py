"""Confusion counting and the precision/recall/F1/IoU/OA suite."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import DomainError, ShapeError

SCORE_FIELDS = ("precision", "recall", "f1", "iou", "oa")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise DomainError("confusion counts must be non-negative")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class Scores:
    precision: float
    recall: float
    f1: float
    iou: float
    oa: float
    degenerate: bool = False

    def as_row(self) -> list[float]:
        return [getattr(self, f) for f in SCORE_FIELDS]


def confusion(pred, truth) -> ConfusionCounts:
    """Pixel counts with road as the positive class."""
    p = np.asarray(pred, dtype=bool)
    t = np.asarray(truth, dtype=bool)
    if p.shape != t.shape:
        raise ShapeError(f"prediction {p.shape} and truth {t.shape} differ")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def _ratio(num: float, den: float) -> tuple[float, bool]:
    return (num / den, False) if den else (0.0, True)


def f1_from(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def iou_from_f1(f1: float) -> float:
    return f1 / (2.0 - f1)


def scores(c: ConfusionCounts) -> Scores:
    if c.total == 0:
        raise DomainError("no pixels evaluated")
    precision, d1 = _ratio(c.tp, c.tp + c.fp)
    recall, d2 = _ratio(c.tp, c.tp + c.fn)
    iou, d3 = _ratio(c.tp, c.tp + c.fp + c.fn)
    oa = (c.tp + c.tn) / c.total
    return Scores(precision, recall, f1_from(precision, recall), iou, oa, d1 or d2 or d3)


def accumulate(counts: Iterable[ConfusionCounts]) -> ConfusionCounts:
    total = ConfusionCounts()
    for c in counts:
        total = total + c
    return total


def micro_scores(counts: Sequence[ConfusionCounts]) -> Scores:
    """Scores of the summed counts (the headline number)."""
    return scores(accumulate(counts))


def macro_scores(counts: Sequence[ConfusionCounts]) -> Scores:
    """Mean of per-tile scores, reported alongside the micro average."""
    per = [scores(c) for c in counts]
    vals = np.mean([s.as_row() for s in per], axis=0)
    return Scores(*map(float, vals), degenerate=any(s.degenerate for s in per))


def report_csv(rows: Sequence[tuple[str, Scores]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("model",) + SCORE_FIELDS)
    for name, s in rows:
        w.writerow([name] + [f"{v:.4f}" for v in s.as_row()])
    return buf.getvalue()


def report_table(rows: Sequence[tuple[str, Scores]]) -> str:
    width = max([len("model")] + [len(n) for n, _ in rows])
    head = f"{'model':<{width}}  " + "  ".join(f"{f:>9}" for f in SCORE_FIELDS)
    lines = [head, "-" * len(head)]
    for name, s in rows:
        flag = "  (degenerate)" if s.degenerate else ""
        lines.append(f"{name:<{width}}  " + "  ".join(f"{100 * v:>8.2f}%" for v in s.as_row()) + flag)
    return "\n".join(lines)
