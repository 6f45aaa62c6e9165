"""Analytic baselines: free-space and Okumura-Hata distributions, LoS probability."""

from __future__ import annotations

import csv
import enum
import warnings

import numpy as np

from .errors import ConfigurationError, DomainError
from .histogram import BIN_CENTERS, PathLossDistribution, quantize_values
from .propagation import TxConfig, fspl, slant_distance
from .scene import ReceiverGrid

HATA_HB_RANGE = (30.0, 200.0)
HATA_HM_RANGE = (1.0, 10.0)
HATA_F_RANGE = (150.0, 1500.0)
# horizontal distance floor for receivers right under the transmitter, km
MIN_HATA_DISTANCE_KM = 1e-3


class HataEnv(str, enum.Enum):
    URBAN_SMALL = "urban-small"
    URBAN_LARGE = "urban-large"
    SUBURBAN = "suburban"
    OPEN = "open"


class HataRangeWarning(UserWarning):
    """Base-station height was clamped into the Hata validity range."""


def _mobile_correction(f, hm, env):
    lf = np.log10(f)
    if env is HataEnv.URBAN_LARGE:
        # textbook split between the VHF and UHF large-city corrections
        if f <= 300.0:
            return 8.29 * np.log10(1.54 * hm) ** 2 - 1.1
        return 3.2 * np.log10(11.75 * hm) ** 2 - 4.97
    return (1.1 * lf - 0.7) * hm - (1.56 * lf - 0.8)


def hata_loss(frequency, hb, hm, distance, env=HataEnv.URBAN_SMALL):
    """Vectorized Okumura-Hata path loss in dB.

    Parameters
    ----------
    frequency : float
        Carrier frequency in MHz, within [150, 1500].
    hb : float
        Base-station antenna height in meters. Heights outside [30, 200] are
        clamped and a :class:`HataRangeWarning` is issued.
    hm : float
        Mobile antenna height in meters, within [1, 10].
    distance : float or array
        Horizontal distance in km.
    env : HataEnv or str
    """
    env = HataEnv(env)
    f = float(frequency)
    if not HATA_F_RANGE[0] <= f <= HATA_F_RANGE[1]:
        raise DomainError(f"frequency {f} MHz outside Hata range {HATA_F_RANGE}")
    if not HATA_HM_RANGE[0] <= hm <= HATA_HM_RANGE[1]:
        raise DomainError(f"mobile height {hm} m outside Hata range {HATA_HM_RANGE}")
    d = np.asarray(distance, dtype=float)
    if np.any(d <= 0):
        raise DomainError("distance must be positive")
    hb_used = min(max(hb, HATA_HB_RANGE[0]), HATA_HB_RANGE[1])
    if hb_used != hb:
        warnings.warn(
            f"base-station height {hb} m clamped to {hb_used} m", HataRangeWarning, stacklevel=2
        )

    lf = np.log10(f)
    loss = (
        69.55
        + 26.16 * lf
        - 13.82 * np.log10(hb_used)
        - _mobile_correction(f, hm, env)
        + (44.9 - 6.55 * np.log10(hb_used)) * np.log10(d)
    )
    if env is HataEnv.SUBURBAN:
        loss = loss - 2.0 * np.log10(f / 28.0) ** 2 - 5.4
    elif env is HataEnv.OPEN:
        loss = loss - 4.78 * lf**2 + 18.33 * lf - 40.94
    return float(loss) if loss.ndim == 0 else loss


def okumura_hata(frequency, hb, hm, distance, env=HataEnv.URBAN_SMALL) -> float:
    """Scalar Okumura-Hata loss; see :func:`hata_loss`."""
    return float(hata_loss(frequency, hb, hm, float(distance), env))


def baseline_distribution(
    grid: ReceiverGrid, tx: TxConfig, model: str = "free-space", env=HataEnv.URBAN_SMALL
) -> PathLossDistribution:
    """Histogram of an analytic model evaluated at the outdoor receivers.

    ``free-space`` uses the 3D transmitter-receiver distance. ``okumura-hata``
    uses the horizontal distance and the UAV altitude as base-station height.
    """
    txp = tx.location(grid.extent)
    rx = grid.positions.reshape(-1, 3)[~grid.indoor.reshape(-1)]
    if model == "free-space":
        values = fspl(slant_distance(txp, rx), tx.frequency)
    elif model == "okumura-hata":
        horiz = np.hypot(rx[:, 0] - txp[0], rx[:, 1] - txp[1]) / 1000.0
        horiz = np.maximum(horiz, MIN_HATA_DISTANCE_KM)
        values = hata_loss(tx.frequency / 1e6, tx.altitude, grid.rx_height, horiz, env)
    else:
        raise ConfigurationError(f"unknown baseline model {model!r}")
    return PathLossDistribution(quantize_values(values))


def p_los(elevation, a: float, b: float):
    """Sigmoid LoS probability ``1 / (1 + a exp(-b (elevation - a)))``.

    ``elevation`` is in degrees; ``a`` and ``b`` are environment constants
    supplied by the caller.
    """
    el = np.asarray(elevation, dtype=float)
    if np.any(el <= 0) or np.any(el > 90):
        raise DomainError("elevation must lie in (0, 90] degrees")
    if not (a > 0 and b > 0):
        raise DomainError("a and b must be positive")
    out = 1.0 / (1.0 + a * np.exp(-b * (el - a)))
    return float(out) if out.ndim == 0 else out


def write_baseline_report(path, true, predicted, free_space, hata) -> None:
    """Single-altitude comparison table ``bin_center_db,true,predicted,free_space,hata``."""
    cols = [np.asarray(getattr(c, "bins", c), dtype=float) for c in (true, predicted, free_space, hata)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_center_db", "true", "predicted", "free_space", "hata"])
        for k, center in enumerate(BIN_CENTERS):
            w.writerow([f"{center:g}"] + [f"{c[k]:.9g}" for c in cols])
