import hashlib
import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from skyloss.dataset import (
    DatasetConfig,
    build_dataset,
    build_region,
    load_dataset,
    read_manifest,
    read_raster,
    simulate_target,
    split,
    write_manifest,
    write_raster,
)
from skyloss.errors import ConfigurationError, ConsistencyError
from skyloss.histogram import concat_target
from skyloss.propagation import batch_simulate
from skyloss.scene import Scene, receiver_grid


def tree_digest(root):
    root = Path(root)
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*")) if p.is_file()
    }


@pytest.fixture(scope="module")
def built(tmp_path_factory):
    cfg = DatasetConfig(n_regions=6, master_seed=3, grid_n=24, raster_shape=(3, 16, 16))
    out = tmp_path_factory.mktemp("ds")
    manifest = build_dataset(out, cfg)
    write_manifest(out, split(manifest, 0.5, 3))
    return out, cfg


def test_layout(built):
    out, cfg = built
    m = read_manifest(out)
    assert m["version"] == 1 and m["n_regions"] == 6
    assert m["raster"] == {"channels": 3, "height": 16, "width": 16, "h_max": cfg.h_max}
    assert [s["id"] for s in m["samples"]] == [f"{i:04d}" for i in range(6)]
    for s in m["samples"]:
        assert (out / s["scene"]).is_file() and (out / s["raster"]).is_file()
    assert len(m["split"]["train"]) == 3 and len(m["split"]["test"]) == 3
    assert sorted(m["split"]["train"] + m["split"]["test"]) == [s["id"] for s in m["samples"]]


def test_target_rows_sum_to_k(built):
    out, cfg = built
    lines = (out / "targets.csv").read_text().splitlines()
    assert len(lines) == 1 + 6
    for line in lines[1:]:
        vals = [float(v) for v in line.split(",")]
        assert len(vals) == 104
        assert sum(vals) == pytest.approx(4.0, abs=4e-9 * 26)
        assert min(vals) >= 0
    np.testing.assert_allclose(np.load(out / "targets.npy").sum(axis=2), 1.0, atol=1e-12)


def test_deterministic_bytes(tmp_path):
    cfg = DatasetConfig(n_regions=2, master_seed=11, grid_n=16, raster_shape=(3, 16, 16))
    a, b = tmp_path / "a", tmp_path / "b"
    build_dataset(a, cfg)
    build_dataset(b, cfg)
    assert tree_digest(a) == tree_digest(b)


def test_threads_do_not_change_output(tmp_path):
    cfg = DatasetConfig(n_regions=3, master_seed=5, grid_n=16, raster_shape=(3, 16, 16))
    build_dataset(tmp_path / "serial", cfg, threads=1)
    build_dataset(tmp_path / "pool", cfg, threads=2)
    assert tree_digest(tmp_path / "serial") == tree_digest(tmp_path / "pool")


def test_round_trip(built):
    out, cfg = built
    ds = load_dataset(out)
    assert ds.images.shape == (6, 3, 16, 16) and ds.targets.shape == (6, 4, 26)
    for i in range(6):
        region = build_region(i, cfg)
        np.testing.assert_array_equal(ds.images[i], region.raster.astype(np.float64))
        np.testing.assert_array_equal(ds.targets[i], region.target)
        assert ds.scene(ds.ids[i]) == region.scene
    csv_ds = load_dataset(out, from_csv=True)
    np.testing.assert_allclose(csv_ds.targets, ds.targets, rtol=5e-9, atol=1e-15)
    assert ds.config == cfg


def test_targets_recompute_from_stored_scenes(built):
    out, cfg = built
    ds = load_dataset(out)
    rng = np.random.default_rng(0)
    for i in rng.choice(6, size=4, replace=False):
        scene = Scene.from_json((out / ds.manifest["samples"][i]["scene"]).read_text())
        grid = receiver_grid(scene, cfg.grid_n, cfg.rx_height)
        target = concat_target(batch_simulate(scene, grid, cfg.altitudes, cfg.tx, cfg.nlos))
        np.testing.assert_array_equal(target.distributions, ds.targets[i])


def test_raster_format(tmp_path):
    data = np.arange(2 * 3 * 5, dtype=np.float32).reshape(2, 3, 5) / 7
    path = tmp_path / "r.plras"
    write_raster(path, data)
    raw = path.read_bytes()
    assert raw[:6] == b"PLRAS1" and len(raw) == 16 + 4 * data.size
    assert raw[6] == 2 and int.from_bytes(raw[7:9], "little") == 3 and int.from_bytes(raw[9:11], "little") == 5
    np.testing.assert_array_equal(read_raster(path).data, data)
    path.write_bytes(raw[:-4])
    with pytest.raises(ConsistencyError):
        read_raster(path)


class TestSplit:
    manifest = {"samples": [{"id": f"{i:04d}"} for i in range(500)]}

    def test_eighty_twenty_of_500(self):
        m = split(self.manifest, 0.8, 1)
        assert len(m["split"]["train"]) == 400 and len(m["split"]["test"]) == 100
        assert set(m["split"]["train"]).isdisjoint(m["split"]["test"])
        assert "split" not in self.manifest

    def test_two_regions(self):
        m = split({"samples": [{"id": "0000"}, {"id": "0001"}]}, 0.5, 0)
        assert len(m["split"]["train"]) == 1 and len(m["split"]["test"]) == 1

    def test_same_seed_same_split(self):
        assert split(self.manifest, 0.8, 9)["split"] == split(self.manifest, 0.8, 9)["split"]
        assert split(self.manifest, 0.8, 9)["split"] != split(self.manifest, 0.8, 10)["split"]

    @pytest.mark.parametrize("fraction", [0.0, 1.0, 0.001, 0.999])
    def test_empty_side(self, fraction):
        with pytest.raises(ConfigurationError):
            split(self.manifest, fraction, 0)


def test_indoor_only_region_is_redrawn(caplog):
    # one lattice cell nearly filled by its building leaves no outdoor receiver
    from skyloss.dataset import RegionSampler
    from skyloss.scene import SceneConfig

    base = SceneConfig(extent=100.0, cell_size=100.0, footprint_range=(99.0, 99.5), h_max=200.0)
    sampler = RegionSampler(base=base, p_building_range=(0.6, 0.6), gamma_range=(10.0, 10.0))
    cfg = DatasetConfig(n_regions=2, grid_n=2, raster_shape=(3, 4, 4), sampler=sampler)
    regions = [build_region(i, cfg) for i in range(10)]
    for r in regions:
        assert r.target.sum() == pytest.approx(4.0)
        assert not receiver_grid(r.scene, 2).indoor.all()
    assert any(r.attempts > 0 for r in regions)
    assert "regenerating" in caplog.text


def test_simulate_target_shape():
    cfg = DatasetConfig(grid_n=10)
    assert simulate_target(Scene(), cfg).shape == (4, 26)


def test_config_dict_round_trip():
    cfg = replace(DatasetConfig(), master_seed=2**63, altitudes=(30.0, 90.0))
    assert DatasetConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_bad_config():
    with pytest.raises(ConfigurationError):
        DatasetConfig(n_regions=1).validate()
    with pytest.raises(ConfigurationError):
        DatasetConfig(altitudes=(80.0, 40.0)).validate()


def test_always_indoor_gives_up():
    from skyloss.dataset import RegionSampler
    from skyloss.errors import DegenerateInputError
    from skyloss.scene import SceneConfig

    base = SceneConfig(extent=100.0, cell_size=100.0, footprint_range=(99.0, 99.5), h_max=200.0)
    sampler = RegionSampler(base=base, p_building_range=(1.0, 1.0), gamma_range=(10.0, 10.0))
    with pytest.raises(DegenerateInputError):
        build_region(0, DatasetConfig(grid_n=2, raster_shape=(3, 4, 4), sampler=sampler))
