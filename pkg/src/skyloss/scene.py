"""Synthetic urban scenes: building layouts, receiver grids and top-down rasters.

Buildings are axis-aligned extruded rectangles standing on flat ground. A
scene is generated cell by cell on a regular lattice: every cell holds at
most one building, so footprints never overlap and the built-up ratio,
building density and height scale of the result can be steered directly.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigurationError

MASK64 = (1 << 64) - 1
MIN_HEIGHT = 3.0
GOLDEN_GAMMA = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    """SplitMix64 finalizer; a bijection on 64-bit integers."""
    x = (x + GOLDEN_GAMMA) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def region_seed(master_seed: int, region_index: int, attempt: int = 0) -> int:
    """Derive the seed of one region from the master seed.

    For a fixed master seed the map ``region_index -> seed`` is a bijection
    (an odd-multiplier offset followed by ``splitmix64``), so distinct regions
    never share a seed. ``attempt`` re-mixes the result and is used when a
    region has to be regenerated.
    """
    s = splitmix64((master_seed + region_index * GOLDEN_GAMMA) & MASK64)
    for _ in range(attempt):
        s = splitmix64(s)
    return s


@dataclass(frozen=True)
class Building:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    height: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ConfigurationError(f"degenerate footprint: {self}")
        if not self.height > 0:
            raise ConfigurationError(f"building height must be positive: {self}")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def contains(self, x, y):
        """Closed point-in-footprint test; works on scalars and arrays."""
        return (x >= self.x_min) & (x <= self.x_max) & (y >= self.y_min) & (y <= self.y_max)


@dataclass(frozen=True)
class Scene:
    extent: float = 1800.0
    buildings: tuple = ()
    seed: int = 0

    def boxes(self) -> np.ndarray:
        """Buildings as an ``(M, 5)`` array of ``x_min, y_min, x_max, y_max, height``."""
        if not self.buildings:
            return np.zeros((0, 5))
        return np.array([[b.x_min, b.y_min, b.x_max, b.y_max, b.height] for b in self.buildings])

    def max_height(self) -> float:
        return max((b.height for b in self.buildings), default=0.0)

    def to_dict(self) -> dict:
        return {
            "extent": self.extent,
            "seed": self.seed,
            "buildings": [asdict(b) for b in self.buildings],
        }

    def to_json(self) -> str:
        # json prints floats with repr(), i.e. the shortest round-trip decimal
        return json.dumps(self.to_dict(), indent=1) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        return cls(
            extent=float(d["extent"]),
            buildings=tuple(Building(**b) for b in d["buildings"]),
            seed=int(d["seed"]),
        )

    @classmethod
    def from_json(cls, text: str) -> "Scene":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class SceneConfig:
    """Parameters of the lattice scene generator.

    Attributes
    ----------
    extent : float
        Side of the square region in meters.
    cell_size : float
        Lattice pitch in meters; each cell holds at most one building.
    p_building : float
        Probability that a cell is occupied.
    footprint_range : tuple of float
        Bounds of the uniform law for footprint width and depth.
    gamma : float
        Rayleigh scale of building heights in meters.
    h_max : float
        Upper clamp on building height; also the raster height normalizer.
    """

    extent: float = 1800.0
    cell_size: float = 100.0
    p_building: float = 0.5
    footprint_range: tuple = (20.0, 80.0)
    gamma: float = 15.0
    h_max: float = 120.0

    def validate(self) -> None:
        lo, hi = self.footprint_range
        if not self.extent > 0:
            raise ConfigurationError("extent must be positive")
        if not 0 < self.cell_size <= self.extent:
            raise ConfigurationError("cell_size must lie in (0, extent]")
        if not 0 < lo <= hi:
            raise ConfigurationError(f"invalid footprint_range {self.footprint_range}")
        if not self.cell_size > hi:
            raise ConfigurationError("cell_size must exceed the largest footprint dimension")
        if not 0.0 <= self.p_building <= 1.0:
            raise ConfigurationError("p_building must lie in [0, 1]")
        if not self.gamma > 0:
            raise ConfigurationError("gamma must be positive")
        if not self.h_max >= MIN_HEIGHT:
            raise ConfigurationError(f"h_max must be at least {MIN_HEIGHT} m")


SCENE_PRESETS = {
    "empty": SceneConfig(p_building=0.0),
    "sparse": SceneConfig(p_building=0.25, footprint_range=(15.0, 40.0), gamma=8.0),
    "suburban": SceneConfig(p_building=0.5, footprint_range=(20.0, 60.0), gamma=12.0),
    "dense": SceneConfig(p_building=0.95, footprint_range=(55.0, 90.0), gamma=30.0),
}


def generate_scene(config: SceneConfig, seed: int) -> Scene:
    """Place buildings on the cell lattice of ``config``.

    Every random draw is made for every cell whatever ``p_building`` is, so
    for a fixed seed raising ``p_building`` only ever adds buildings.
    """
    config.validate()
    cs = config.cell_size
    n = int(math.floor(config.extent / cs + 1e-9))
    rng = np.random.default_rng(seed & MASK64)
    count = n * n
    u = rng.random(count)
    w = rng.uniform(*config.footprint_range, size=count)
    d = rng.uniform(*config.footprint_range, size=count)
    jx = rng.random(count)
    jy = rng.random(count)
    h = np.clip(rng.rayleigh(config.gamma, size=count), MIN_HEIGHT, config.h_max)

    buildings = []
    for k in np.flatnonzero(u < config.p_building):
        row, col = divmod(int(k), n)
        x0 = col * cs + jx[k] * (cs - w[k])
        y0 = row * cs + jy[k] * (cs - d[k])
        # rounding must not push a footprint into the neighbouring cell
        x1 = min(x0 + w[k], (col + 1) * cs)
        y1 = min(y0 + d[k], (row + 1) * cs)
        buildings.append(Building(float(x0), float(y0), float(x1), float(y1), float(h[k])))
    return Scene(extent=float(config.extent), buildings=tuple(buildings), seed=int(seed))


@dataclass(frozen=True)
class SceneStats:
    alpha: float
    beta: float
    gamma: Optional[float]  # None when the scene has no buildings


def scene_stats(scene: Scene) -> SceneStats:
    """Built-up ratio, buildings per km² and Rayleigh MLE of heights."""
    n = len(scene.buildings)
    area = math.fsum(b.area for b in scene.buildings)
    alpha = area / scene.extent**2
    beta = n / (scene.extent / 1000.0) ** 2
    gamma = math.sqrt(math.fsum(b.height**2 for b in scene.buildings) / (2 * n)) if n else None
    return SceneStats(alpha=alpha, beta=beta, gamma=gamma)


def footprint_mask(scene: Scene, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Boolean mask of the points ``(x, y)`` that fall inside some footprint."""
    inside = np.zeros(np.broadcast(x, y).shape, dtype=bool)
    for b in scene.buildings:
        inside |= b.contains(x, y)
    return inside


@dataclass
class ReceiverGrid:
    """``n x n`` receivers; ``positions[i, j] = (x_i, y_j, rx_height)``."""

    positions: np.ndarray
    indoor: np.ndarray
    extent: float
    rx_height: float = 1.5

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def spacing(self) -> float:
        return self.extent / self.n


def receiver_grid(scene: Scene, n: int = 110, rx_height: float = 1.5) -> ReceiverGrid:
    if n < 2:
        raise ConfigurationError("receiver grid needs n >= 2")
    coords = (np.arange(n) + 0.5) * (scene.extent / n)
    x, y = np.meshgrid(coords, coords, indexing="ij")
    positions = np.stack([x, y, np.full_like(x, rx_height)], axis=-1)
    return ReceiverGrid(
        positions=positions,
        indoor=footprint_mask(scene, x, y),
        extent=scene.extent,
        rx_height=rx_height,
    )


@dataclass
class RasterImage:
    """Top-down encoding of a scene, shape ``(channels, height, width)``.

    Channel 0 is footprint occupancy, channel 1 building height over
    ``h_max``, channel 2 is reserved and left at zero.
    """

    data: np.ndarray = field(repr=False)

    @property
    def shape(self) -> tuple:
        return self.data.shape


def rasterize(
    scene: Scene, height: int = 224, width: int = 224, h_max: float = 120.0, channels: int = 3
) -> RasterImage:
    if channels < 2:
        raise ConfigurationError("raster needs at least 2 channels")
    if scene.max_height() > h_max:
        raise ConfigurationError(
            f"h_max={h_max} is below the tallest building ({scene.max_height()})"
        )
    xc = (np.arange(width) + 0.5) * (scene.extent / width)
    yc = (np.arange(height) + 0.5) * (scene.extent / height)
    data = np.zeros((channels, height, width))
    for b in scene.buildings:
        cols = np.flatnonzero((xc >= b.x_min) & (xc <= b.x_max))
        rows = np.flatnonzero((yc >= b.y_min) & (yc <= b.y_max))
        if cols.size == 0 or rows.size == 0:
            continue
        block = (slice(rows[0], rows[-1] + 1), slice(cols[0], cols[-1] + 1))
        data[0][block] = 1.0
        data[1][block] = np.maximum(data[1][block], b.height / h_max)
    return RasterImage(data)
