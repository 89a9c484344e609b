"""Span retrieval metrics: R@1 at IoU thresholds and mean IoU."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

from .autograd import ContractError

STANDARD_THRESHOLDS = (0.3, 0.5, 0.7)
CSV_HEADER = "split,r1_03,r1_05,r1_07,miou,n"


@dataclass(frozen=True)
class Span:
    """Inclusive frame interval [s, e]; a single frame has s == e."""

    s: int
    e: int

    def __post_init__(self):
        if not (0 <= self.s <= self.e):
            raise ContractError(f"invalid span ({self.s}, {self.e})")

    def __len__(self) -> int:
        return self.e - self.s + 1


def iou(a: Span, b: Span) -> float:
    """Intersection over union with inclusive frame counting."""
    inter = max(0, min(a.e, b.e) - max(a.s, b.s) + 1)
    union = len(a) + len(b) - inter
    return inter / union


@dataclass(frozen=True)
class MetricsReport:
    r1: dict[float, float]
    miou: float
    n: int

    def to_dict(self) -> dict:
        # threshold 0.3 -> column r1_03
        out = {f"r1_{str(float(t)).replace('.', '')}": v for t, v in self.r1.items()}
        out["miou"] = self.miou
        out["n"] = self.n
        return out

    def csv_row(self, split: str) -> str:
        """One CSV line matching CSV_HEADER; requires the standard thresholds."""
        if tuple(sorted(self.r1)) != STANDARD_THRESHOLDS:
            raise ContractError(f"csv_row needs thresholds {STANDARD_THRESHOLDS}")
        vals = [self.r1[t] for t in STANDARD_THRESHOLDS] + [self.miou]
        return ",".join([split] + [f"{v:.6f}" for v in vals] + [str(self.n)])


def evaluate(preds: Sequence[Span], gts: Sequence[Span],
             thresholds: Iterable[float] = STANDARD_THRESHOLDS,
             strict: bool = False) -> MetricsReport:
    """Score top-1 predictions against ground truth spans.

    r1@m is the fraction of samples whose IoU clears threshold m
    (>= by default; > when strict); miou is the plain mean IoU.
    """
    if len(preds) != len(gts):
        raise ContractError(f"got {len(preds)} predictions for {len(gts)} targets")
    if not preds:
        raise ContractError("evaluate needs at least one sample")
    ious = [iou(p, g) for p, g in zip(preds, gts)]
    n = len(ious)
    r1 = {}
    for m in thresholds:
        hits = sum(1 for v in ious if (v > m if strict else v >= m))
        r1[float(m)] = hits / n
    return MetricsReport(r1=r1, miou=sum(ious) / n, n=n)
