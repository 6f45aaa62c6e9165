"""End-to-end dataset construction and persistence.

Layout of a dataset directory::

    manifest.json          configuration, sample index and train/test split
    scenes/NNNN.json       one scene per region
    rasters/NNNN.plras     16-byte header + little-endian float32, channel-major
    targets.csv            one target row per sample, 9 significant digits
    targets.npy            float64 mirror of targets.csv, used for training
"""

from __future__ import annotations

import json
import logging
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ConsistencyError, DegenerateInputError
from .histogram import concat_target, read_targets_csv, write_targets_csv
from .propagation import NlosModel, TxConfig, batch_simulate, check_altitudes
from .scene import (
    MASK64,
    RasterImage,
    Scene,
    SceneConfig,
    generate_scene,
    rasterize,
    receiver_grid,
    region_seed,
)

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
RASTER_MAGIC = b"PLRAS1"
RASTER_HEADER = struct.Struct("<6sBHH5x")
MAX_REGION_ATTEMPTS = 16


@dataclass(frozen=True)
class RegionSampler:
    """Per-region scene parameters drawn uniformly from ranges.

    Regions differ in building density and height scale so that the
    dataset spans sparse suburbs to dense high-rise blocks.
    """

    base: SceneConfig = SceneConfig(footprint_range=(20.0, 90.0), h_max=200.0)
    p_building_range: tuple = (0.05, 0.95)
    gamma_range: tuple = (4.0, 60.0)

    def validate(self) -> None:
        lo, hi = self.p_building_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ConfigurationError(f"bad p_building_range {self.p_building_range}")
        lo, hi = self.gamma_range
        if not 0.0 < lo <= hi:
            raise ConfigurationError(f"bad gamma_range {self.gamma_range}")
        self.base.validate()

    def sample(self, seed: int) -> SceneConfig:
        rng = np.random.default_rng([seed & MASK64, 1])
        return replace(
            self.base,
            p_building=float(rng.uniform(*self.p_building_range)),
            gamma=float(rng.uniform(*self.gamma_range)),
        )


@dataclass(frozen=True)
class DatasetConfig:
    n_regions: int = 120
    altitudes: tuple = (40.0, 80.0, 120.0, 300.0)
    master_seed: int = 0
    grid_n: int = 110
    rx_height: float = 1.5
    raster_shape: tuple = (3, 64, 64)
    sampler: RegionSampler = RegionSampler()
    tx: TxConfig = TxConfig()
    nlos: NlosModel = NlosModel()

    @property
    def h_max(self) -> float:
        return self.sampler.base.h_max

    def validate(self) -> None:
        if self.n_regions < 2:
            raise ConfigurationError("need at least 2 regions")
        check_altitudes(self.altitudes)
        if self.grid_n < 2:
            raise ConfigurationError("grid_n must be at least 2")
        if len(self.raster_shape) != 3 or min(self.raster_shape) < 1:
            raise ConfigurationError(f"bad raster shape {self.raster_shape}")
        if self.raster_shape[0] > 255 or max(self.raster_shape[1:]) > 65535:
            raise ConfigurationError("raster shape does not fit the raster file header")
        self.sampler.validate()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        s = d["sampler"]
        sampler = RegionSampler(
            base=SceneConfig(**{**s["base"], "footprint_range": tuple(s["base"]["footprint_range"])}),
            p_building_range=tuple(s["p_building_range"]),
            gamma_range=tuple(s["gamma_range"]),
        )
        tx = dict(d["tx"])
        if tx.get("position") is not None:
            tx["position"] = tuple(tx["position"])
        return cls(
            n_regions=int(d["n_regions"]),
            altitudes=tuple(float(a) for a in d["altitudes"]),
            master_seed=int(d["master_seed"]),
            grid_n=int(d["grid_n"]),
            rx_height=float(d["rx_height"]),
            raster_shape=tuple(int(v) for v in d["raster_shape"]),
            sampler=sampler,
            tx=TxConfig(**tx),
            nlos=NlosModel(**d["nlos"]),
        )


@dataclass
class Region:
    index: int
    seed: int
    attempts: int
    scene: Scene
    raster: np.ndarray  # float32 (C, H, W)
    target: np.ndarray  # float64 (K, 26)


def simulate_target(scene: Scene, config: DatasetConfig) -> np.ndarray:
    """Simulate every altitude on ``scene`` and return the ``(K, 26)`` target."""
    grid = receiver_grid(scene, config.grid_n, config.rx_height)
    maps = batch_simulate(scene, grid, list(config.altitudes), config.tx, config.nlos)
    return concat_target(maps).distributions


def build_region(index: int, config: DatasetConfig) -> Region:
    """Generate one region; regions whose receivers are all indoors are redrawn."""
    for attempt in range(MAX_REGION_ATTEMPTS):
        seed = region_seed(config.master_seed, index, attempt)
        scene = generate_scene(config.sampler.sample(seed), seed)
        try:
            target = simulate_target(scene, config)
        except DegenerateInputError:
            log.warning("region %d attempt %d has no outdoor receivers; regenerating", index, attempt)
            continue
        c, h, w = config.raster_shape
        raster = rasterize(scene, h, w, config.h_max, channels=c).data.astype(np.float32)
        return Region(index, seed, attempt, scene, raster, target)
    raise DegenerateInputError(f"region {index}: no usable scene after {MAX_REGION_ATTEMPTS} attempts")


def write_raster(path, data: np.ndarray) -> None:
    c, h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(RASTER_HEADER.pack(RASTER_MAGIC, c, h, w))
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def read_raster(path) -> RasterImage:
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, c, h, w = RASTER_HEADER.unpack_from(raw)
    if magic != RASTER_MAGIC:
        raise ConsistencyError(f"{path}: not a raster file")
    data = np.frombuffer(raw, dtype="<f4", offset=RASTER_HEADER.size)
    if data.size != c * h * w:
        raise ConsistencyError(f"{path}: truncated raster")
    return RasterImage(data.reshape(c, h, w).astype(np.float32))


def _build_one(args):
    return build_region(*args)


def build_dataset(out_dir, config: DatasetConfig, threads: int = 1) -> dict:
    """Build every region, write all files and return the manifest.

    Output is identical for any ``threads``: each region depends only on its
    own seed and results are collected in region order.
    """
    config.validate()
    out = Path(out_dir)
    (out / "scenes").mkdir(parents=True, exist_ok=True)
    (out / "rasters").mkdir(parents=True, exist_ok=True)

    jobs = [(i, config) for i in range(config.n_regions)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            regions = list(pool.map(_build_one, jobs))
    else:
        regions = []
        for job in jobs:
            regions.append(_build_one(job))
            if (job[0] + 1) % 10 == 0 or job[0] + 1 == config.n_regions:
                log.info("built %d/%d regions", job[0] + 1, config.n_regions)

    samples = []
    for r in regions:
        sid = f"{r.index:04d}"
        scene_path = f"scenes/{sid}.json"
        raster_path = f"rasters/{sid}.plras"
        (out / scene_path).write_text(r.scene.to_json())
        write_raster(out / raster_path, r.raster)
        samples.append(
            {"id": sid, "scene": scene_path, "raster": raster_path, "target_row": r.index,
             "seed": r.seed, "attempts": r.attempts}
        )
    targets = np.stack([r.target for r in regions])
    write_targets_csv(out / "targets.csv", targets, config.altitudes)
    np.save(out / "targets.npy", targets)

    c, h, w = config.raster_shape
    manifest = {
        "version": MANIFEST_VERSION,
        "master_seed": config.master_seed,
        "altitudes": list(config.altitudes),
        "raster": {"channels": c, "height": h, "width": w, "h_max": config.h_max},
        "n_regions": config.n_regions,
        "config": config.to_dict(),
        "samples": samples,
        "split": {"train": [], "test": []},
    }
    write_manifest(out, manifest)
    return manifest


def split(manifest: dict, train_fraction: float, seed: int) -> dict:
    """Seeded shuffle then prefix split; returns an updated copy of ``manifest``."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigurationError("train_fraction must lie in (0, 1)")
    ids = [s["id"] for s in manifest["samples"]]
    n_train = int(round(train_fraction * len(ids)))
    if n_train == 0 or n_train == len(ids):
        raise ConfigurationError(
            f"train_fraction {train_fraction} leaves one side empty for {len(ids)} samples"
        )
    order = np.random.default_rng(seed).permutation(len(ids))
    train_ids = sorted(ids[i] for i in order[:n_train])
    test_ids = sorted(ids[i] for i in order[n_train:])
    updated = dict(manifest)
    updated["split"] = {"train": train_ids, "test": test_ids, "seed": seed,
                        "train_fraction": train_fraction}
    return updated


def write_manifest(out_dir, manifest: dict) -> Path:
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1) + "\n")
    return path


def read_manifest(data_dir) -> dict:
    return json.loads((Path(data_dir) / "manifest.json").read_text())


@dataclass
class Dataset:
    root: Path
    manifest: dict
    images: np.ndarray  # (N, C, H, W) float64
    targets: np.ndarray  # (N, K, 26) float64
    ids: list = field(default_factory=list)

    @property
    def altitudes(self) -> tuple:
        return tuple(float(a) for a in self.manifest["altitudes"])

    @property
    def config(self) -> DatasetConfig:
        return DatasetConfig.from_dict(self.manifest["config"])

    def indices(self, part: str) -> np.ndarray:
        pos = {sid: i for i, sid in enumerate(self.ids)}
        return np.array([pos[s] for s in self.manifest["split"][part]], dtype=np.int64)

    def scene(self, sample_id: str) -> Scene:
        entry = self.manifest["samples"][self.ids.index(sample_id)]
        return Scene.from_json((self.root / entry["scene"]).read_text())


def load_dataset(data_dir, from_csv: bool = False) -> Dataset:
    root = Path(data_dir)
    manifest = read_manifest(root)
    samples = manifest["samples"]
    images = np.stack([read_raster(root / s["raster"]).data for s in samples]).astype(np.float64)
    all_targets = read_targets_csv(root / "targets.csv") if from_csv else np.load(root / "targets.npy")
    targets = all_targets[[s["target_row"] for s in samples]]
    return Dataset(root, manifest, images, targets, [s["id"] for s in samples])


def is_nonempty_dir(path) -> bool:
    return os.path.isdir(path) and any(os.scandir(path))

