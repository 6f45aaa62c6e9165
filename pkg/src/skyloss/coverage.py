"""Coverage from path-loss distributions and altitude selection.

A receiver counts as covered when its path loss is below the threshold.
On a binned distribution this becomes the mass of every bin whose center is
strictly below the threshold. Sums use ``math.fsum`` so that any two ways
of enumerating the same bins produce the same float bit for bit.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConsistencyError
from .histogram import BIN_CENTERS, MultiAltitudeTarget

DEFAULT_THRESHOLDS = (116.0, 119.0, 122.0, 125.0, 128.0)


def coverage(dist, pl_th: float) -> float:
    bins = np.asarray(getattr(dist, "bins", dist), dtype=float)
    return math.fsum(bins[BIN_CENTERS < pl_th])


def optimal_altitude(target: MultiAltitudeTarget, pl_th: float) -> tuple:
    """``(altitude, coverage)`` of the best block; ties go to the lowest altitude."""
    values = [coverage(block, pl_th) for block in target.distributions]
    best = int(np.argmax(values))  # first maximum == lowest altitude
    return target.altitudes[best], values[best]


@dataclass
class CoverageTable:
    altitudes: tuple
    thresholds: tuple
    coverage: np.ndarray  # (altitudes, thresholds)

    @classmethod
    def from_target(cls, target: MultiAltitudeTarget, thresholds: Sequence[float]):
        table = np.array(
            [[coverage(block, th) for th in thresholds] for block in target.distributions]
        )
        return cls(tuple(target.altitudes), tuple(float(t) for t in thresholds), table)

    def argmax(self) -> np.ndarray:
        """Row index of the best altitude for each threshold."""
        return np.argmax(self.coverage, axis=0)


@dataclass
class CoverageReport:
    true: CoverageTable
    pred: CoverageTable
    argmax_true: np.ndarray
    argmax_pred: np.ndarray
    agreement: np.ndarray
    # true coverage lost by flying at the predicted altitude instead of the true best
    coverage_gap: np.ndarray

    @property
    def max_gap_at_disagreement(self) -> float:
        gaps = self.coverage_gap[~self.agreement]
        return float(gaps.max()) if gaps.size else 0.0


def coverage_table(
    true: MultiAltitudeTarget, pred: MultiAltitudeTarget, thresholds=DEFAULT_THRESHOLDS
) -> CoverageReport:
    if tuple(true.altitudes) != tuple(pred.altitudes):
        raise ConsistencyError(f"altitudes differ: {true.altitudes} vs {pred.altitudes}")
    t = CoverageTable.from_target(true, thresholds)
    p = CoverageTable.from_target(pred, thresholds)
    at, ap = t.argmax(), p.argmax()
    cols = np.arange(len(t.thresholds))
    gap = t.coverage[at, cols] - t.coverage[ap, cols]
    return CoverageReport(t, p, at, ap, at == ap, gap)


def write_coverage_csv(path, true: CoverageTable = None, pred: CoverageTable = None) -> None:
    """Write ``altitude_m,threshold_db,coverage_true,coverage_pred,is_argmax_true,is_argmax_pred``.

    Either table may be omitted; its columns are then left empty.
    """
    ref = true if true is not None else pred
    if ref is None:
        raise ConsistencyError("need at least one coverage table")
    tables = (true, pred)
    winners = [tb.argmax() if tb is not None else None for tb in tables]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(
            ["altitude_m", "threshold_db", "coverage_true", "coverage_pred",
             "is_argmax_true", "is_argmax_pred"]
        )
        for i, alt in enumerate(ref.altitudes):
            for j, th in enumerate(ref.thresholds):
                cov = [f"{tb.coverage[i, j]:.9g}" if tb is not None else "" for tb in tables]
                best = [int(win[j] == i) if win is not None else "" for win in winners]
                w.writerow([f"{alt:g}", f"{th:g}", *cov, *best])
