"""Run configuration: one flat mapping of dotted keys.

A config file is a JSON object such as ``{"dataset.regions": 120,
"train.epochs": 50}``. Keys not listed in :data:`DEFAULTS` are rejected and
every value is checked against the type of its default before any work
starts. Precedence is defaults, then the config file, then CLI flags.
"""

from __future__ import annotations

import json
from dataclasses import replace

from .coverage import DEFAULT_THRESHOLDS
from .dataset import DatasetConfig, RegionSampler
from .errors import ConfigurationError
from .histogram import N_BINS
from .network import ModelSpec, TrainConfig
from .propagation import NlosModel, TxConfig, check_altitudes
from .scene import SceneConfig

_SAMPLER = RegionSampler()

DEFAULTS = {
    "scene.extent": 1800.0,
    "scene.cell_size": _SAMPLER.base.cell_size,
    "scene.footprint_range": list(_SAMPLER.base.footprint_range),
    "scene.h_max": _SAMPLER.base.h_max,
    "scene.p_building_range": list(_SAMPLER.p_building_range),
    "scene.gamma_range": list(_SAMPLER.gamma_range),
    "propagation.frequency": 900e6,
    "propagation.tx_power": 43.0,
    "propagation.rx_sensitivity": -85.0,
    "propagation.eta_los": 0.0,
    "propagation.eta_per_blockage": 20.0,
    "propagation.eta_cap": 40.0,
    "propagation.grid_n": 110,
    "propagation.rx_height": 1.5,
    "dataset.regions": 120,
    "dataset.altitudes": [40.0, 80.0, 120.0, 300.0],
    "dataset.seed": 0,
    "dataset.raster_channels": 3,
    "dataset.raster_height": 64,
    "dataset.raster_width": 64,
    "dataset.train_fraction": 0.8,
    "network.conv_channels": [8, 16, 32, 32],
    "network.dense_hidden": [256],
    "train.learning_rate": 1e-4,
    "train.momentum": 0.7,
    "train.batch_size": 8,
    "train.epochs": 200,
    "train.seed": 0,
    "coverage.thresholds": list(DEFAULT_THRESHOLDS),
}


def _coerce(key, value):
    default = DEFAULTS[key]
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, list):
        ok = isinstance(value, list) and all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in value
        )
        if ok and default and isinstance(default[0], int):
            ok = all(isinstance(v, int) for v in value)
        elif ok:
            value = [float(v) for v in value]
    else:
        ok = True
    if not ok:
        raise ConfigurationError(f"config key {key!r}: bad value {value!r}")
    return value


class RunConfig:
    """Validated flat configuration with builders for each module's parameters."""

    def __init__(self, values: dict | None = None):
        self.values = dict(DEFAULTS)
        self.update(values or {})

    def update(self, values: dict) -> "RunConfig":
        unknown = sorted(set(values) - set(DEFAULTS))
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
        for k, v in values.items():
            self.values[k] = _coerce(k, v)
        return self

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> "RunConfig":
        cfg = cls()
        if path is not None:
            with open(path) as fh:
                try:
                    data = json.load(fh)
                except json.JSONDecodeError as exc:
                    raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
            if not isinstance(data, dict):
                raise ConfigurationError("config file must hold a JSON object")
            cfg.update(data)
        cfg.update({k: v for k, v in (overrides or {}).items() if v is not None})
        cfg.validate()
        return cfg

    def validate(self) -> None:
        self.dataset_config().validate()
        self.train_config().validate()
        check_altitudes(self["dataset.altitudes"])
        if not 0.0 < self["dataset.train_fraction"] < 1.0:
            raise ConfigurationError("dataset.train_fraction must lie in (0, 1)")
        if not self["coverage.thresholds"]:
            raise ConfigurationError("coverage.thresholds is empty")

    def dataset_config(self) -> DatasetConfig:
        v = self.values
        base = SceneConfig(
            extent=v["scene.extent"],
            cell_size=v["scene.cell_size"],
            footprint_range=tuple(v["scene.footprint_range"]),
            h_max=v["scene.h_max"],
        )
        sampler = replace(
            _SAMPLER,
            base=base,
            p_building_range=tuple(v["scene.p_building_range"]),
            gamma_range=tuple(v["scene.gamma_range"]),
        )
        return DatasetConfig(
            n_regions=v["dataset.regions"],
            altitudes=tuple(v["dataset.altitudes"]),
            master_seed=v["dataset.seed"],
            grid_n=v["propagation.grid_n"],
            rx_height=v["propagation.rx_height"],
            raster_shape=(
                v["dataset.raster_channels"], v["dataset.raster_height"], v["dataset.raster_width"]
            ),
            sampler=sampler,
            tx=TxConfig(
                frequency=v["propagation.frequency"],
                tx_power=v["propagation.tx_power"],
                rx_sensitivity=v["propagation.rx_sensitivity"],
            ),
            nlos=NlosModel(
                eta_los=v["propagation.eta_los"],
                eta_per_blockage=v["propagation.eta_per_blockage"],
                eta_cap=v["propagation.eta_cap"],
            ),
        )

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            learning_rate=v["train.learning_rate"],
            momentum=v["train.momentum"],
            batch_size=v["train.batch_size"],
            epochs=v["train.epochs"],
            seed=v["train.seed"],
        )

    def model_spec(self, input_shape, altitudes) -> ModelSpec:
        spec = ModelSpec(
            input_shape=tuple(input_shape),
            conv_channels=tuple(self["network.conv_channels"]),
            dense_widths=tuple(self["network.dense_hidden"]) + (N_BINS * len(altitudes),),
            altitudes=tuple(float(a) for a in altitudes),
        )
        spec.validate()
        return spec
