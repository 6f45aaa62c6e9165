"""Deterministic line-of-sight propagation oracle.

Path loss at a receiver is free-space loss over the 3D distance plus an
excess term that depends only on how many buildings cut the straight
transmitter-receiver segment. There are no reflections or diffraction;
the model exists to give the dataset a geometry-driven, altitude-dependent
signal that a network can learn from a top-down image.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError, DomainError
from .scene import ReceiverGrid, Scene

SPEED_OF_LIGHT = 299_792_458.0

# receivers per vectorized blockage chunk; bounds memory at ~chunk * buildings floats
_CHUNK = 2048


@dataclass(frozen=True)
class TxConfig:
    frequency: float = 900e6
    altitude: float = 40.0
    position: Optional[tuple] = None  # (x, y); None means the region center
    tx_power: float = 43.0
    rx_sensitivity: float = -85.0

    def __post_init__(self):
        if not self.frequency > 0:
            raise ConfigurationError("frequency must be positive")
        if not self.altitude > 0:
            raise ConfigurationError("altitude must be positive")

    @property
    def max_path_loss(self) -> float:
        """Largest path loss the link budget tolerates, in dB."""
        return self.tx_power - self.rx_sensitivity

    def location(self, extent: float) -> np.ndarray:
        x, y = self.position if self.position is not None else (extent / 2.0, extent / 2.0)
        return np.array([x, y, self.altitude], dtype=float)


@dataclass(frozen=True)
class NlosModel:
    """Excess loss in dB: ``eta_los`` when clear, ``eta_per_blockage`` per
    blocking building otherwise, never more than ``eta_cap``."""

    eta_los: float = 0.0
    eta_per_blockage: float = 20.0
    eta_cap: float = 40.0

    def __post_init__(self):
        if min(self.eta_los, self.eta_per_blockage, self.eta_cap) < 0:
            raise ConfigurationError("excess-loss parameters must be non-negative")
        if self.eta_cap < self.eta_per_blockage:
            raise ConfigurationError("eta_cap must be at least eta_per_blockage")

    def excess(self, count: np.ndarray) -> np.ndarray:
        count = np.asarray(count)
        raw = np.where(count == 0, self.eta_los, self.eta_per_blockage * count)
        return np.minimum(self.eta_cap, raw)


@dataclass
class PathLossMap:
    """Per-receiver path loss in dB; indoor receivers hold NaN."""

    values: np.ndarray
    indoor: np.ndarray
    altitude: float

    def outdoor_values(self) -> np.ndarray:
        return self.values[~self.indoor]


def fspl(distance, frequency):
    """Free-space path loss ``20 log10(4 pi d f / c)`` in dB (d in m, f in Hz)."""
    distance = np.asarray(distance, dtype=float)
    frequency = np.asarray(frequency, dtype=float)
    if np.any(distance <= 0):
        raise DomainError("distance must be positive")
    if np.any(frequency <= 0):
        raise DomainError("frequency must be positive")
    out = 20.0 * np.log10(4.0 * np.pi * distance * frequency / SPEED_OF_LIGHT)
    return float(out) if out.ndim == 0 else out


def slant_distance(tx: np.ndarray, rx: np.ndarray) -> np.ndarray:
    """3D distance from ``tx`` to each row of ``rx``."""
    return np.linalg.norm(rx - tx, axis=1)


def _slab(origin, delta, lo, hi):
    """Open parameter interval on which ``origin + t * delta`` lies strictly
    between ``lo`` and ``hi``. Shapes broadcast as ``delta (N, 1)`` against
    ``lo, hi (M,)``."""
    parallel = delta == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - origin) / delta
        t2 = (hi - origin) / delta
    t_enter = np.minimum(t1, t2)
    t_exit = np.maximum(t1, t2)
    inside = (lo < origin) & (origin < hi)
    t_enter = np.where(parallel, np.where(inside, -np.inf, np.inf), t_enter)
    t_exit = np.where(parallel, np.where(inside, np.inf, -np.inf), t_exit)
    return t_enter, t_exit


def blockage_matrix(tx: np.ndarray, rx: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """``(N, M)`` mask: does the open segment ``tx -> rx[n]`` enter the
    interior of box ``m``?

    ``boxes`` rows are ``x_min, y_min, x_max, y_max, height``; boxes stand on
    z = 0. A segment that only grazes a face, edge or roof is not blocked.
    """
    rx = np.atleast_2d(rx)
    if boxes.shape[0] == 0:
        return np.zeros((rx.shape[0], 0), dtype=bool)
    delta = rx - tx
    t_lo = np.zeros((rx.shape[0], boxes.shape[0]))
    t_hi = np.ones_like(t_lo)
    limits = (
        (boxes[:, 0], boxes[:, 2]),
        (boxes[:, 1], boxes[:, 3]),
        (np.zeros(boxes.shape[0]), boxes[:, 4]),
    )
    for axis, (lo, hi) in enumerate(limits):
        t_enter, t_exit = _slab(tx[axis], delta[:, axis : axis + 1], lo, hi)
        np.maximum(t_lo, t_enter, out=t_lo)
        np.minimum(t_hi, t_exit, out=t_hi)
    return t_lo < t_hi


def los_blockages(tx: Sequence[float], rx: Sequence[float], scene: Scene) -> list:
    """Buildings whose extruded box intersects the open segment ``tx -> rx``."""
    tx = np.asarray(tx, dtype=float)
    rx = np.asarray(rx, dtype=float)
    if not tx[2] > rx[2]:
        raise DomainError("transmitter must be above the receiver")
    hit = blockage_matrix(tx, rx[None, :], scene.boxes())[0]
    return [b for b, h in zip(scene.buildings, hit) if h]


def blockage_counts(tx: np.ndarray, rx: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """Number of blocking boxes for each receiver row of ``rx``."""
    counts = np.empty(rx.shape[0], dtype=np.int64)
    for start in range(0, rx.shape[0], _CHUNK):
        chunk = rx[start : start + _CHUNK]
        counts[start : start + chunk.shape[0]] = blockage_matrix(tx, chunk, boxes).sum(axis=1)
    return counts


def simulate(
    scene: Scene, grid: ReceiverGrid, tx: TxConfig, nlos: NlosModel = NlosModel()
) -> PathLossMap:
    """Path loss at every outdoor receiver of ``grid`` for a single transmitter."""
    n = grid.n
    rx = grid.positions.reshape(-1, 3)
    outdoor = ~grid.indoor.reshape(-1)
    txp = tx.location(scene.extent)

    values = np.full(n * n, np.nan)
    rx_out = rx[outdoor]
    if rx_out.shape[0]:
        dist = slant_distance(txp, rx_out)
        counts = blockage_counts(txp, rx_out, scene.boxes())
        values[outdoor] = fspl(dist, tx.frequency) + nlos.excess(counts)
    return PathLossMap(values=values.reshape(n, n), indoor=grid.indoor.copy(), altitude=tx.altitude)


def batch_simulate(
    scene: Scene,
    grid: ReceiverGrid,
    altitudes: Sequence[float],
    tx_base: TxConfig = TxConfig(),
    nlos: NlosModel = NlosModel(),
) -> list:
    """One :class:`PathLossMap` per altitude, in the given (ascending) order."""
    check_altitudes(altitudes)
    return [simulate(scene, grid, replace(tx_base, altitude=float(a)), nlos) for a in altitudes]


def check_altitudes(altitudes: Sequence[float]) -> None:
    if len(altitudes) == 0:
        raise ConfigurationError("altitude list is empty")
    if any(not a > 0 for a in altitudes):
        raise ConfigurationError("altitudes must be positive")
    if any(b <= a for a, b in zip(altitudes, altitudes[1:])):
        raise ConfigurationError(f"altitudes must be strictly increasing: {list(altitudes)}")


def write_pathloss_csv(path, pl_map: PathLossMap, grid: ReceiverGrid) -> None:
    """Export as ``i,j,x,y,indoor,pl_db`` in row-major grid order."""
    n = grid.n
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i", "j", "x", "y", "indoor", "pl_db"])
        for i in range(n):
            for j in range(n):
                x, y, _ = grid.positions[i, j]
                w.writerow(
                    [i, j, repr(float(x)), repr(float(y)), int(pl_map.indoor[i, j]),
                     f"{pl_map.values[i, j]:.4f}"]
                )


def read_pathloss_csv(path, altitude: float) -> PathLossMap:
    rows = np.genfromtxt(path, delimiter=",", skip_header=1)
    n = int(round(np.sqrt(rows.shape[0])))
    return PathLossMap(
        values=rows[:, 5].reshape(n, n),
        indoor=rows[:, 4].astype(bool).reshape(n, n),
        altitude=altitude,
    )

