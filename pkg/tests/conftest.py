import numpy as np
import pytest

from skyloss.dataset import DatasetConfig, RegionSampler
from skyloss.scene import Building, Scene, SceneConfig

# pass/fail lines emitted by test_acceptance.py, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_dataset_config():
    """Small enough to build in well under a second per region."""
    return DatasetConfig(
        n_regions=4,
        altitudes=(40.0, 80.0, 120.0, 300.0),
        master_seed=3,
        grid_n=24,
        raster_shape=(3, 16, 16),
        sampler=RegionSampler(),
    )


def random_scene(rng, n_buildings=12, extent=400.0, h_max=60.0):
    """Non-overlapping random buildings, one per lattice cell."""
    cells = int(np.ceil(np.sqrt(n_buildings)))
    cs = extent / cells
    picks = rng.choice(cells * cells, size=n_buildings, replace=False)
    out = []
    for k in picks:
        r, c = divmod(int(k), cells)
        w, d = rng.uniform(0.2, 0.9, size=2) * cs
        x0 = c * cs + rng.uniform(0, cs - w)
        y0 = r * cs + rng.uniform(0, cs - d)
        out.append(Building(x0, y0, x0 + w, y0 + d, float(rng.uniform(3, h_max))))
    return Scene(extent=extent, buildings=tuple(out), seed=0)


@pytest.fixture
def dense_config():
    return SceneConfig(p_building=0.9, footprint_range=(40.0, 90.0), gamma=25.0)
