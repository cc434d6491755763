"""Dice evaluation and the Wilcoxon signed-rank test."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

EXACT_MAX_N = 12
MIN_NONZERO = 5


def dice_per_class(pred: np.ndarray, gt: np.ndarray, c: int) -> float:
    """2|P & G| / (|P| + |G|) for class ``c``; 1.0 when both masks are empty."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} differs from ground truth {gt.shape}")
    p, g = pred == c, gt == c
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


@dataclass
class DiceReport:
    per_sample: np.ndarray  # (samples, K)
    exclude_background: bool = True

    @property
    def classes(self) -> List[int]:
        k = self.per_sample.shape[1]
        return list(range(1, k)) if self.exclude_background else list(range(k))

    @property
    def sample_means(self) -> np.ndarray:
        return self.per_sample[:, self.classes].mean(axis=1)

    @property
    def per_class(self) -> np.ndarray:
        return self.per_sample.mean(axis=0)

    @property
    def mean(self) -> float:
        return float(self.sample_means.mean())

    @property
    def std(self) -> float:
        # population std over samples
        return float(self.sample_means.std())

    def cell(self) -> str:
        return format_cell(self.mean, self.std)

    def to_csv(self) -> str:
        """Rows are classes, columns are samples."""
        n = self.per_sample.shape[0]
        lines = ["class," + ",".join(f"sample_{i}" for i in range(n))]
        for c in range(self.per_sample.shape[1]):
            lines.append(f"{c}," + ",".join(repr(float(v)) for v in self.per_sample[:, c]))
        return "\n".join(lines) + "\n"

    def to_long_csv(self) -> str:
        """One row per (class, sample) pair."""
        lines = ["class,sample,dice"]
        for c in range(self.per_sample.shape[1]):
            for i in range(self.per_sample.shape[0]):
                lines.append(f"{c},{i},{float(self.per_sample[i, c])!r}")
        return "\n".join(lines) + "\n"


def format_cell(mean: float, std: float) -> str:
    return f"{mean:.3f}±{std:.3f}"


def dice_report(
    preds: Sequence[np.ndarray], gts: Sequence[np.ndarray], num_classes: int, exclude_background: bool = True
) -> DiceReport:
    if len(preds) != len(gts):
        raise ValueError(f"got {len(preds)} predictions for {len(gts)} ground truths")
    if not preds:
        raise ValueError("dice_report needs at least one sample")
    table = np.array([[dice_per_class(p, g, c) for c in range(num_classes)] for p, g in zip(preds, gts)])
    return DiceReport(table, exclude_background)


@dataclass(frozen=True)
class SignificanceResult:
    statistic: float
    n: int
    p_value: float
    method: str  # "exact" or "normal_approx"


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _signed_ranks(a: Sequence[float], b: Sequence[float]):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired samples must be 1-D with equal length, got {a.shape} and {b.shape}")
    d = a - b
    d = d[d != 0]
    if len(d) < MIN_NONZERO:
        raise ValueError(f"only {len(d)} nonzero differences; need at least {MIN_NONZERO} for a meaningful test")
    ranks = _average_ranks(np.abs(d))
    return d, ranks


def _exact_p(ranks: np.ndarray, w: float) -> float:
    """P(min(T+, T-) <= w) by counting sign assignments over doubled ranks."""
    doubled = np.rint(ranks * 2).astype(int)
    total = int(doubled.sum())
    counts = [0] * (total + 1)
    counts[0] = 1
    for r in doubled:
        for s in range(total, r - 1, -1):
            counts[s] += counts[s - r]
    w2 = int(round(w * 2))
    hits = sum(cnt for s, cnt in enumerate(counts) if s <= w2 or s >= total - w2)
    return hits / 2 ** len(ranks)


def _normal_p(ranks: np.ndarray, w: float) -> float:
    n = len(ranks)
    mean = n * (n + 1) / 4.0
    _, ties = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(((ties**3) - ties).sum()) / 48.0
    if var <= 0:
        return 1.0
    z = max(abs(w - mean) - 0.5, 0.0) / math.sqrt(var)
    return min(1.0, math.erfc(z / math.sqrt(2.0)))


def wilcoxon_signed_rank(a: Sequence[float], b: Sequence[float], method: Optional[str] = None) -> SignificanceResult:
    """Two-sided paired Wilcoxon signed-rank test on ``a - b``.

    Zero differences are dropped and tied |differences| get average ranks.
    The statistic is min(T+, T-). With n <= 12 the p-value is exact (all
    2**n sign flips); beyond that a normal approximation with continuity and
    tie corrections is used. ``method`` forces one or the other.
    """
    d, ranks = _signed_ranks(a, b)
    t_plus = float(ranks[d > 0].sum())
    t_minus = float(ranks[d < 0].sum())
    w = min(t_plus, t_minus)
    n = len(d)
    if method is None:
        method = "exact" if n <= EXACT_MAX_N else "normal_approx"
    if method == "exact":
        p = _exact_p(ranks, w)
    elif method == "normal_approx":
        p = _normal_p(ranks, w)
    else:
        raise ValueError(f"unknown method {method!r}")
    return SignificanceResult(statistic=w, n=n, p_value=p, method=method)
