"""Ground-plane detection metrics: Hungarian matching, MODA, MODP, precision/recall."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import GroundGrid

DEFAULT_RADIUS = 0.5


@dataclass
class DetectionSet:
    points: np.ndarray        # (n, 2) world meters, (x, y)
    confidence: np.ndarray    # (n,)
    cells: np.ndarray         # (n,) location indices
    frame: int = 0

    def __len__(self):
        return len(self.points)


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    pairs: list = field(default_factory=list)   # (det index, truth index, distance)
    r: float = DEFAULT_RADIUS

    @property
    def n_truth(self) -> int:
        return self.tp + self.fn


def extract_detections(pom, grid: GroundGrid, threshold: float = 0.5, frame: int = 0) -> DetectionSet:
    """One detection at the center of every cell with q > threshold."""
    q = np.asarray(pom, dtype=float)
    if q.shape != (grid.N,):
        raise ValueError(f"POM must have {grid.N} entries, got {q.shape}")
    cells = np.flatnonzero(q > threshold)
    return DetectionSet(grid.centers()[cells], q[cells], cells, frame)


def truth_points(Z, grid: GroundGrid) -> np.ndarray:
    return grid.centers()[np.flatnonzero(np.asarray(Z, dtype=bool))]


def _points(x):
    if isinstance(x, DetectionSet):
        return x.points
    return np.asarray(x, dtype=float).reshape(-1, 2)


def hungarian_match(dets, truth, r: float = DEFAULT_RADIUS) -> MatchResult:
    """Maximum-cardinality matching within radius ``r`` of least total distance."""
    if not r > 0:
        raise ValueError("radius must be positive")
    d, t = _points(dets), _points(truth)
    if len(d) == 0 or len(t) == 0:
        return MatchResult(0, len(d), len(t), [], r)
    dist = np.hypot(*(d[:, None, :] - t[None, :, :]).transpose(2, 0, 1))
    ok = dist <= r
    # every admissible edge outweighs any sum of distances, so cardinality comes first
    big = 1.0 + ok.sum() * r
    cost = np.where(ok, dist, big + r)
    rows, cols = linear_sum_assignment(cost - big * ok)
    pairs = [(int(a), int(b), float(dist[a, b])) for a, b in zip(rows, cols) if ok[a, b]]
    tp = len(pairs)
    return MatchResult(tp, len(d) - tp, len(t) - tp, pairs, r)


def moda(match: MatchResult) -> float:
    """1 - (FP + FN) / |truth|; NaN when undefined (no truth but false positives)."""
    n = match.n_truth
    if n == 0:
        return 1.0 if match.fp == 0 else float("nan")
    return 1.0 - (match.fp + match.fn) / n


def modp(match: MatchResult) -> float:
    """Mean of 1 - d / r over matched pairs; NaN without matches."""
    if not match.pairs:
        return float("nan")
    d = np.array([p[2] for p in match.pairs])
    return float(np.mean(1.0 - d / match.r))


def precision_recall(match: MatchResult):
    p = match.tp / (match.tp + match.fp) if match.tp + match.fp else 1.0
    rc = match.tp / (match.tp + match.fn) if match.tp + match.fn else 1.0
    return p, rc


def moda_curve(pom, truth, grid: GroundGrid, radii, threshold: float = 0.5):
    """[(r, MODA)] for the detections of one POM against truth occupancy ``truth``."""
    dets = extract_detections(pom, grid, threshold)
    tp = truth_points(truth, grid)
    return [(float(r), moda(hungarian_match(dets, tp, r))) for r in radii]


@dataclass
class FrameMetrics:
    frame: int
    r: float
    moda: float
    modp: float
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int


def evaluate_frame(pom, Z, grid: GroundGrid, r: float = DEFAULT_RADIUS, threshold: float = 0.5,
                   frame: int = 0, mask=None) -> FrameMetrics:
    """Metrics for one frame; ``mask`` restricts evaluation to covered locations."""
    q = np.asarray(pom, dtype=float)
    Z = np.asarray(Z, dtype=bool)
    if mask is not None:
        q = np.where(mask, q, 0.0)
        Z = Z & mask
    m = hungarian_match(extract_detections(q, grid, threshold), truth_points(Z, grid), r)
    return metrics_of(m, frame)


def metrics_of(m: MatchResult, frame: int = 0) -> FrameMetrics:
    p, rc = precision_recall(m)
    return FrameMetrics(frame, m.r, moda(m), modp(m), p, rc, m.tp, m.fp, m.fn)


def aggregate(rows) -> dict:
    """Mean of the per-frame scores and pooled counts."""
    rows = list(rows)
    if not rows:
        return {}
    tp, fp, fn = (sum(getattr(x, k) for x in rows) for k in ("tp", "fp", "fn"))
    pooled = MatchResult(tp, fp, fn, [], rows[0].r)
    p, rc = precision_recall(pooled)
    return {
        "frames": len(rows),
        "moda": float(np.mean([x.moda for x in rows])),
        "modp": float(np.nanmean([x.modp for x in rows])) if any(np.isfinite(x.modp) for x in rows) else float("nan"),
        "precision": p, "recall": rc, "tp": tp, "fp": fp, "fn": fn,
        "pooled_moda": moda(pooled),
    }


METRIC_FIELDS = ("frame", "r", "moda", "modp", "precision", "recall", "tp", "fp", "fn")


def metrics_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_FIELDS)
    for x in rows:
        w.writerow([x.frame, repr(x.r), repr(x.moda), repr(x.modp), repr(x.precision), repr(x.recall),
                    x.tp, x.fp, x.fn])
    return buf.getvalue()
