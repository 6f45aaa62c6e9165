"""Path-loss histograms and multi-altitude target vectors.

Outdoor path-loss values are binned into 26 bins of 3 dB whose centers run
from 55 dB to 130 dB. Bins are closed at the lower edge, and values outside
[53.5, 131.5) are clamped into the first or last bin.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConsistencyError, DegenerateInputError

N_BINS = 26
BIN_WIDTH = 3.0
FIRST_CENTER = 55.0
BIN_CENTERS = FIRST_CENTER + BIN_WIDTH * np.arange(N_BINS)
# lower edges 53.5, 56.5, ..., 128.5; all exact in binary floating point
LOWER_EDGES = BIN_CENTERS - BIN_WIDTH / 2


@dataclass(frozen=True)
class PathLossDistribution:
    bins: np.ndarray

    def __post_init__(self):
        if self.bins.shape != (N_BINS,):
            raise ConsistencyError(f"expected {N_BINS} bins, got shape {self.bins.shape}")


@dataclass(frozen=True)
class MultiAltitudeTarget:
    """``K`` distributions stacked in ascending altitude order, shape ``(K, 26)``."""

    altitudes: tuple
    distributions: np.ndarray

    def __post_init__(self):
        if self.distributions.shape != (len(self.altitudes), N_BINS):
            raise ConsistencyError(
                f"distributions shape {self.distributions.shape} does not match "
                f"{len(self.altitudes)} altitudes"
            )

    @property
    def k(self) -> int:
        return len(self.altitudes)

    @property
    def vector(self) -> np.ndarray:
        """Flattened target of length ``26 K``."""
        return self.distributions.reshape(-1)

    def block(self, index: int) -> PathLossDistribution:
        return PathLossDistribution(self.distributions[index])


def bin_index(values: np.ndarray) -> np.ndarray:
    """Bin of each value, with out-of-range values clamped to the edge bins."""
    values = np.asarray(values, dtype=float)
    raw = np.clip((values - LOWER_EDGES[0]) / BIN_WIDTH, 0, N_BINS - 1)
    k = np.floor(raw).astype(np.int64)
    # the division may round across an edge; settle ties against the exact edges
    k = np.where((k > 0) & (values < LOWER_EDGES[k]), k - 1, k)
    upper = np.minimum(k + 1, N_BINS - 1)
    k = np.where((k < N_BINS - 1) & (values >= LOWER_EDGES[upper]), k + 1, k)
    return k


def quantize_values(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=float).ravel()
    if values.size == 0:
        raise DegenerateInputError("no outdoor receivers to quantize")
    counts = np.bincount(bin_index(values), minlength=N_BINS)
    return counts / values.size


def quantize(pl_map) -> PathLossDistribution:
    """Normalized 26-bin histogram of the outdoor receivers of ``pl_map``."""
    return PathLossDistribution(quantize_values(pl_map.outdoor_values()))


def concat_target(maps: Sequence) -> MultiAltitudeTarget:
    if len(maps) == 0:
        raise ConsistencyError("no path-loss maps given")
    ref = maps[0]
    for m in maps[1:]:
        if m.values.shape != ref.values.shape or not np.array_equal(m.indoor, ref.indoor):
            raise ConsistencyError("path-loss maps do not share a receiver grid")
    altitudes = tuple(float(m.altitude) for m in maps)
    if any(b <= a for a, b in zip(altitudes, altitudes[1:])):
        raise ConsistencyError(f"maps must be in strictly ascending altitude order: {altitudes}")
    return MultiAltitudeTarget(altitudes, np.stack([quantize(m).bins for m in maps]))


def as_block_array(targets) -> np.ndarray:
    """Stack targets into ``(N, K, 26)``; accepts targets or raw arrays."""
    if isinstance(targets, np.ndarray):
        arr = targets
    else:
        arr = np.stack([t.distributions if isinstance(t, MultiAltitudeTarget) else t for t in targets])
    if arr.ndim == 2:
        arr = arr.reshape(arr.shape[0], -1, N_BINS)
    if arr.ndim != 3 or arr.shape[2] != N_BINS:
        raise ConsistencyError(f"cannot interpret shape {arr.shape} as (N, K, {N_BINS})")
    return arr


def mse_per_altitude(truth, pred) -> np.ndarray:
    """Mean squared error per altitude block, averaged over samples and bins."""
    t = as_block_array(truth)
    p = as_block_array(pred)
    if t.shape != p.shape:
        raise ConsistencyError(f"truth {t.shape} and prediction {p.shape} differ")
    return ((t - p) ** 2).mean(axis=(0, 2))


def variance_per_altitude(truth) -> np.ndarray:
    """Per-bin variance around the per-bin mean, averaged over bins, per block.

    Equal to :func:`mse_per_altitude` of a predictor that always outputs the
    per-bin mean of ``truth``.
    """
    t = as_block_array(truth)
    return mse_per_altitude(t, np.broadcast_to(t.mean(axis=0), t.shape))


def write_targets_csv(path, targets, altitudes: Sequence[float]) -> None:
    """One sample per row, ``26 K`` columns, 9 significant digits."""
    arr = as_block_array(targets)
    header = [f"h{a:g}m_{c:g}db" for a in altitudes for c in BIN_CENTERS]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in arr.reshape(arr.shape[0], -1):
            w.writerow([f"{v:.9g}" for v in row])


def read_targets_csv(path) -> np.ndarray:
    """Load a target CSV as ``(N, K, 26)``."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return as_block_array(data)
