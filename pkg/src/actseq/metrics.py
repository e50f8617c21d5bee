"""Sequence and frame-level evaluation metrics.

Edit score and action error rate are built on the Levenshtein distance with
unit costs. Detection rates (TPR, FDR, F1) come from one minimum-cost edit
alignment, fixed by a deterministic backtrace order: match/substitute, then
delete (a ground-truth action is missed), then insert (a spurious prediction).
"""
from __future__ import annotations

import bisect
import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .core import FrameLabeling, _as_label_array, segments_from_frames
from .errors import ShapeError, UndefinedMetricError

MATCH, SUBSTITUTE, MISS, SPURIOUS = "match", "substitute", "miss", "spurious"

# key order of the flat CSV row (each value optionally followed by _lower/_upper)
METRIC_KEYS = ("edit_score", "aer", "tpr", "fdr", "f1", "framewise_accuracy")

DEFAULT_DURATION_EDGES = (0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0, math.inf)


def _edit_table(G: Sequence[int], P: Sequence[int]) -> list[list[int]]:
    m = len(P)
    rows = [list(range(m + 1))]
    for i, gi in enumerate(G, 1):
        prev, row = rows[-1], [i]
        for j in range(1, m + 1):
            row.append(min(prev[j - 1] + (gi != P[j - 1]), prev[j] + 1, row[j - 1] + 1))
        rows.append(row)
    return rows


def levenshtein(G: Sequence[int], P: Sequence[int]) -> int:
    """Minimum number of insertions, deletions and substitutions turning P into G."""
    G, P = list(G), list(P)
    prev = list(range(len(P) + 1))
    for i, gi in enumerate(G, 1):
        row = [i]
        for j, pj in enumerate(P, 1):
            row.append(min(prev[j - 1] + (gi != pj), prev[j] + 1, row[j - 1] + 1))
        prev = row
    return prev[-1]


def edit_score(G: Sequence[int], P: Sequence[int]) -> float:
    """``(1 - L / max(len G, len P)) * 100``; two empty sequences score 100."""
    longest = max(len(G), len(P))
    if longest == 0:
        return 100.0
    return (1.0 - levenshtein(G, P) / longest) * 100.0


def aer(G: Sequence[int], P: Sequence[int]) -> float:
    """Action error rate ``L / len(G)``. Can exceed 1 for long predictions."""
    if len(G) == 0:
        raise UndefinedMetricError("action error rate needs a non-empty ground truth")
    return levenshtein(G, P) / len(G)


@dataclass(frozen=True)
class AlignmentCounts:
    correct: int = 0
    substituted: int = 0
    missed: int = 0
    spurious: int = 0

    @property
    def errors(self) -> int:
        return self.substituted + self.missed + self.spurious

    @property
    def gt_length(self) -> int:
        return self.correct + self.substituted + self.missed

    @property
    def pred_length(self) -> int:
        return self.correct + self.substituted + self.spurious

    def __add__(self, other: "AlignmentCounts") -> "AlignmentCounts":
        return AlignmentCounts(self.correct + other.correct,
                               self.substituted + other.substituted,
                               self.missed + other.missed,
                               self.spurious + other.spurious)


def alignment(G: Sequence[int], P: Sequence[int]) -> list[tuple[str, int | None, int | None]]:
    """One minimum-cost alignment as ``(op, g, p)`` triples in sequence order."""
    G, P = list(G), list(P)
    d = _edit_table(G, P)
    i, j = len(G), len(P)
    ops = []
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i][j] == d[i - 1][j - 1] + (G[i - 1] != P[j - 1]):
            op = MATCH if G[i - 1] == P[j - 1] else SUBSTITUTE
            ops.append((op, G[i - 1], P[j - 1]))
            i, j = i - 1, j - 1
        elif i > 0 and d[i][j] == d[i - 1][j] + 1:
            ops.append((MISS, G[i - 1], None))
            i -= 1
        else:
            ops.append((SPURIOUS, None, P[j - 1]))
            j -= 1
    ops.reverse()
    return ops


def align(G: Sequence[int], P: Sequence[int]) -> AlignmentCounts:
    tally = {MATCH: 0, SUBSTITUTE: 0, MISS: 0, SPURIOUS: 0}
    for op, _, _ in alignment(G, P):
        tally[op] += 1
    return AlignmentCounts(tally[MATCH], tally[SUBSTITUTE], tally[MISS], tally[SPURIOUS])


def tpr_fdr_f1(a: AlignmentCounts) -> tuple[float, float, float]:
    if a.gt_length == 0:
        raise UndefinedMetricError("TPR undefined for an empty ground truth")
    if a.pred_length == 0:
        raise UndefinedMetricError("FDR undefined for an empty prediction")
    tpr = a.correct / a.gt_length
    fdr = (a.substituted + a.spurious) / a.pred_length
    denom = 1.0 - fdr + tpr
    f1 = 0.0 if denom == 0 else 2.0 * (1.0 - fdr) * tpr / denom
    return tpr, fdr, f1


def framewise_accuracy(gt, pred) -> float:
    g, p = _as_label_array(gt), _as_label_array(pred)
    if g.shape != p.shape:
        raise ShapeError(f"frame labelings differ in length: {g.shape[0]} vs {p.shape[0]}")
    if g.size == 0:
        raise UndefinedMetricError("frame accuracy of an empty labeling")
    return float(np.mean(g == p))


def class_counts(s: Iterable[int], num_classes: int) -> np.ndarray:
    return np.bincount(np.asarray(list(s), dtype=np.int64), minlength=num_classes)[:num_classes]


def bootstrap_ci(values: Sequence[float], replicates: int = 1000,
                 seed: int = 0) -> tuple[float, float, float]:
    """Mean and 95% limits over bootstrap replicates of the sample list.

    Each replicate resamples the list with replacement and takes its mean.
    With ``mu`` and ``sigma`` the mean and (population) standard deviation of
    the replicate means and ``N`` the replicate count, the limits are
    ``mu -/+ 1.96 * sigma / sqrt(N)``.
    """
    vals = np.asarray(list(values), dtype=np.float64)
    if vals.size == 0:
        raise UndefinedMetricError("bootstrap of an empty sample list")
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    idx = rng.integers(0, vals.size, size=(replicates, vals.size))
    means = vals[idx].mean(axis=1)
    mu = float(means.mean())
    half = 1.96 * float(means.std()) / math.sqrt(replicates)
    lo, hi = mu - half, mu + half
    # guard against rounding when sigma is zero
    return mu, min(lo, mu), max(hi, mu)


@dataclass
class DurationBucket:
    low: float
    high: float
    detected: int = 0
    total: int = 0

    @property
    def accuracy(self) -> float | None:
        return self.detected / self.total if self.total else None


@dataclass
class DurationBucketReport:
    buckets: list[DurationBucket]

    def merge(self, other: "DurationBucketReport") -> "DurationBucketReport":
        if [(b.low, b.high) for b in self.buckets] != [(b.low, b.high) for b in other.buckets]:
            raise ShapeError("cannot merge reports with different buckets")
        return DurationBucketReport([
            DurationBucket(a.low, a.high, a.detected + b.detected, a.total + b.total)
            for a, b in zip(self.buckets, other.buckets)])

    def accuracies(self) -> list[float | None]:
        return [b.accuracy for b in self.buckets]

    def to_rows(self) -> list[dict]:
        return [{"duration_low_s": b.low, "duration_high_s": b.high,
                 "accuracy": "" if b.accuracy is None else b.accuracy,
                 "detected": b.detected, "count": b.total} for b in self.buckets]


def buckets_from_edges(edges: Sequence[float] = DEFAULT_DURATION_EDGES) -> list[tuple[float, float]]:
    edges = list(edges)
    if any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError("bucket edges must be strictly ascending")
    return list(zip(edges[:-1], edges[1:]))


def boundary_accuracy_by_duration(gt: FrameLabeling, predicted_boundaries: Iterable[int],
                                  buckets: Sequence[tuple[float, float]] | None = None,
                                  tolerance: int | None = None) -> DurationBucketReport:
    """Fraction of action starts matched by a predicted boundary, per duration bucket.

    The first segment has no starting boundary and is skipped. A predicted
    boundary may match any number of ground-truth starts. ``tolerance`` is in
    frames and defaults to a quarter second.
    """
    if buckets is None:
        buckets = buckets_from_edges()
    if tolerance is None:
        tolerance = int(round(0.25 * gt.frame_rate))
    if tolerance < 0:
        raise ValueError("tolerance must be >= 0")
    report = DurationBucketReport([DurationBucket(lo, hi) for lo, hi in buckets])
    preds = sorted(int(b) for b in predicted_boundaries)
    for seg in list(segments_from_frames(gt))[1:]:
        duration = seg.length / gt.frame_rate
        for bucket in report.buckets:
            if bucket.low <= duration < bucket.high:
                break
        else:
            continue
        k = bisect.bisect_left(preds, seg.start - tolerance)
        bucket.total += 1
        if k < len(preds) and preds[k] <= seg.start + tolerance:
            bucket.detected += 1
    return report


@dataclass
class MetricReport:
    """Named metric means, optional (lower, upper) limits, and class counts."""

    values: dict[str, float] = field(default_factory=dict)
    ci: dict[str, tuple[float, float]] = field(default_factory=dict)
    n_samples: int = 0
    class_names: tuple[str, ...] = ()
    gt_counts: list[int] = field(default_factory=list)
    pred_counts: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        metrics = {}
        for key in METRIC_KEYS:
            if key not in self.values:
                continue
            entry = {"value": self.values[key]}
            if key in self.ci:
                entry["lower"], entry["upper"] = self.ci[key]
            metrics[key] = entry
        return {
            "n_samples": self.n_samples,
            "metrics": metrics,
            "class_counts": {
                "classes": list(self.class_names),
                "ground_truth": [int(c) for c in self.gt_counts],
                "predicted": [int(c) for c in self.pred_counts],
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        values, ci = {}, {}
        for key, entry in d["metrics"].items():
            values[key] = entry["value"]
            if "lower" in entry:
                ci[key] = (entry["lower"], entry["upper"])
        counts = d.get("class_counts", {})
        return cls(values, ci, d.get("n_samples", 0), tuple(counts.get("classes", ())),
                   list(counts.get("ground_truth", [])), list(counts.get("predicted", [])))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def csv_row(self) -> dict:
        """Flat row: each metric then its limits, in ``METRIC_KEYS`` order, then counts."""
        row = {"n_samples": self.n_samples}
        for key in METRIC_KEYS:
            if key not in self.values:
                continue
            row[key] = self.values[key]
            if key in self.ci:
                row[f"{key}_lower"], row[f"{key}_upper"] = self.ci[key]
        for name, g, p in zip(self.class_names, self.gt_counts, self.pred_counts):
            row[f"count_gt_{name}"] = int(g)
            row[f"count_pred_{name}"] = int(p)
        return row


def per_sample_metrics(G: Sequence[int], P: Sequence[int]) -> dict[str, float]:
    """Sequence metrics for one sample; undefined entries are left out."""
    out = {"edit_score": edit_score(G, P)}
    counts = align(G, P)
    if len(G):
        out["aer"] = counts.errors / len(G)
        out["tpr"] = counts.correct / counts.gt_length
    if len(P):
        out["fdr"] = (counts.substituted + counts.spurious) / counts.pred_length
    if len(G) and len(P):
        out["f1"] = tpr_fdr_f1(counts)[2]
    elif len(G):
        out["f1"] = 0.0
    return out


def evaluate(gts: Sequence[Sequence[int]], preds: Sequence[Sequence[int]],
             class_names: Sequence[str], frame_pairs=None,
             replicates: int = 1000, seed: int = 0) -> MetricReport:
    """Mean of per-sample metrics with bootstrap limits.

    Samples where a metric is undefined (e.g. FDR for an empty prediction) are
    dropped from that metric's average. ``frame_pairs`` is an optional list of
    ``(gt_labels, pred_labels)`` for frame-wise accuracy.
    """
    if len(gts) != len(preds):
        raise ShapeError(f"{len(gts)} ground-truth sequences but {len(preds)} predictions")
    per_metric: dict[str, list[float]] = {k: [] for k in METRIC_KEYS}
    for G, P in zip(gts, preds):
        for key, v in per_sample_metrics(G, P).items():
            per_metric[key].append(v)
    if frame_pairs is not None:
        for g, p in frame_pairs:
            per_metric["framewise_accuracy"].append(framewise_accuracy(g, p))
    report = MetricReport(n_samples=len(gts), class_names=tuple(class_names))
    for key in METRIC_KEYS:
        vals = per_metric[key]
        if not vals:
            continue
        if replicates > 0:
            mu, lo, hi = bootstrap_ci(vals, replicates, seed)
            report.values[key] = mu
            report.ci[key] = (lo, hi)
        else:
            report.values[key] = float(np.mean(vals))
    c = len(class_names)
    report.gt_counts = sum((class_counts(G, c) for G in gts), np.zeros(c, dtype=np.int64)).tolist()
    report.pred_counts = sum((class_counts(P, c) for P in preds), np.zeros(c, dtype=np.int64)).tolist()
    return report


def confusion_matrix(gts: Sequence[Sequence[int]], preds: Sequence[Sequence[int]],
                     num_classes: int, normalize: bool = True) -> np.ndarray:
    """Ground-truth rows vs predicted columns from alignment matches and substitutions.

    Rows are divided by each class's total ground-truth count, so a row also
    accounts for missed instances (it may sum to less than one).
    """
    m = np.zeros((num_classes, num_classes), dtype=np.float64)
    totals = np.zeros(num_classes, dtype=np.float64)
    for G, P in zip(gts, preds):
        totals += class_counts(G, num_classes)
        for op, g, p in alignment(G, P):
            if op in (MATCH, SUBSTITUTE):
                m[g, p] += 1
    if normalize:
        with np.errstate(invalid="ignore", divide="ignore"):
            m = np.where(totals[:, None] > 0, m / np.maximum(totals[:, None], 1), 0.0)
    return m


def report_csv(rows: Sequence[dict]) -> str:
    """CSV text for a list of flat rows; columns in first-seen order."""
    columns: list[str] = []
    for row in rows:
        for k in row:
            if k not in columns:
                columns.append(k)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()
