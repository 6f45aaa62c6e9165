import json

import numpy as np
import pytest

from skyloss.cli import main
from skyloss.config import DEFAULTS, RunConfig
from skyloss.dataset import load_dataset
from skyloss.errors import ConfigurationError
from skyloss.network import Model, TrainConfig, checkpoint_bytes, load_checkpoint

SMALL = [
    "--set", "propagation.grid_n=20",
    "--set", "dataset.raster_height=16",
    "--set", "dataset.raster_width=16",
]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    rc = main(["gen", "--out", str(out), "--regions", "6", "--altitudes", "40,80,120,300", "--seed", "7",
               "--train-fraction", "0.5", *SMALL])
    assert rc == 0
    return out


def test_gen(data_dir, capsys):
    ds = load_dataset(data_dir)
    assert len(ds.ids) == 6 and ds.images.shape[1:] == (3, 16, 16)
    assert ds.manifest["master_seed"] == 7
    assert len(ds.manifest["split"]["test"]) == 3


def test_gen_refuses_nonempty_dir(data_dir):
    assert main(["gen", "--out", str(data_dir), "--regions", "2", *SMALL]) == 3


def test_gen_bad_altitudes(tmp_path, capsys):
    with pytest.raises(SystemExit) as info:
        main(["gen", "--out", str(tmp_path / "x"), "--altitudes", "80,40"])
    assert info.value.code == 2
    assert "--altitudes" in capsys.readouterr().err


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train.epochz": 3}))
    assert main(["gen", "--out", str(tmp_path / "x"), "--config", str(cfg)]) == 2
    assert "train.epochz" in capsys.readouterr().err


def test_bad_config_file(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text("{not json")
    assert main(["gen", "--out", str(tmp_path / "x"), "--config", str(cfg)]) == 2
    assert main(["gen", "--out", str(tmp_path / "x"), "--config", str(tmp_path / "missing.json")]) == 3


def test_train_defaults_match_train_config():
    assert RunConfig().train_config() == TrainConfig()
    tc = TrainConfig()
    assert (tc.learning_rate, tc.momentum, tc.batch_size) == (1e-4, 0.7, 8)


def test_config_precedence(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"train.epochs": 5, "train.momentum": 0.5}))
    cfg = RunConfig.load(path, {"train.epochs": 9})
    assert cfg["train.epochs"] == 9 and cfg["train.momentum"] == 0.5
    with pytest.raises(ConfigurationError):
        RunConfig({"train.epochs": "ten"})
    with pytest.raises(ConfigurationError):
        RunConfig.load(None, {"dataset.train_fraction": 1.0})
    assert set(RunConfig().values) == set(DEFAULTS)


def test_train_zero_epochs(data_dir, tmp_path):
    ckpt = tmp_path / "m.ckpt"
    assert main(["train", "--data", str(data_dir), "--out", str(ckpt), "--epochs", "0", "--seed", "4"]) == 0
    model = load_checkpoint(ckpt)
    fresh = Model.create(model.spec, seed=4)
    assert ckpt.read_bytes() == checkpoint_bytes(fresh)
    history = (tmp_path / "m.history.csv").read_text().splitlines()
    assert history == ["epoch,train_loss,test_mse_40m,test_mse_80m,test_mse_120m,test_mse_300m"]


def test_train_is_reproducible(data_dir, tmp_path):
    args = ["train", "--data", str(data_dir), "--epochs", "2", "--seed", "1", "--lr", "0.01"]
    assert main([*args, "--out", str(tmp_path / "a.ckpt")]) == 0
    assert main([*args, "--out", str(tmp_path / "b.ckpt")]) == 0
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert (tmp_path / "a.history.csv").read_bytes() == (tmp_path / "b.history.csv").read_bytes()


def test_train_divergence_exit_code(data_dir, tmp_path):
    with np.errstate(all="ignore"):
        rc = main(["train", "--data", str(data_dir), "--out", str(tmp_path / "m.ckpt"),
                   "--epochs", "3", "--lr", "1e300"])
    assert rc == 4


def test_eval_oracle(data_dir, tmp_path, capsys):
    out = tmp_path / "eval"
    assert main(["eval", "--data", str(data_dir), "--oracle", "--out", str(out), "--report-samples", "1"]) == 0
    rows = (out / "mse_table.csv").read_text().splitlines()
    assert rows[0] == "altitude_m,mse,test_variance"
    assert len(rows) == 5
    assert all(float(r.split(",")[1]) == 0.0 for r in rows[1:])
    scatter = (out / "scatter.csv").read_text().splitlines()
    assert scatter[0] == "sample_id,altitude_m,bin_center_db,true,pred"
    assert len(scatter) == 1 + 3 * 4 * 26
    assert len(list((out / "baselines").glob("*.csv"))) == 4
    assert "mse decreases with altitude" in capsys.readouterr().out


def test_eval_model(data_dir, tmp_path):
    ckpt = tmp_path / "m.ckpt"
    main(["train", "--data", str(data_dir), "--out", str(ckpt), "--epochs", "1"])
    out = tmp_path / "eval"
    assert main(["eval", "--data", str(data_dir), "--model", str(ckpt), "--out", str(out)]) == 0
    preds = np.loadtxt(out / "predictions.csv", delimiter=",", skiprows=1)
    assert preds.shape == (3, 104)
    np.testing.assert_allclose(preds.reshape(3, 4, 26).sum(axis=2), 1.0, atol=1e-7)


def test_optimize_single_threshold(data_dir, tmp_path, capsys):
    out = tmp_path / "cov.csv"
    rc = main(["optimize", "--data", str(data_dir), "--sample", "0001", "--from-truth",
               "--thresholds", "122", "--out", str(out)])
    assert rc == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 1 and lines[0].startswith("pl_th=122 altitude=")
    assert len(out.read_text().splitlines()) == 1 + 4


def test_optimize_default_thresholds_from_model(data_dir, tmp_path, capsys):
    ckpt = tmp_path / "m.ckpt"
    main(["train", "--data", str(data_dir), "--out", str(ckpt), "--epochs", "0"])
    capsys.readouterr()
    rc = main(["optimize", "--data", str(data_dir), "--sample", "0002", "--model", str(ckpt), "--from-model"])
    assert rc == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert [line.split()[0] for line in lines] == [f"pl_th={t}" for t in (116, 119, 122, 125, 128)]


def test_optimize_usage_errors(data_dir):
    assert main(["optimize", "--data", str(data_dir), "--from-truth"]) == 2
    assert main(["optimize", "--data", str(data_dir), "--sample", "9999", "--from-truth"]) == 2


def test_sweep(tmp_path, capsys):
    out = tmp_path / "sweep.csv"
    rc = main(["sweep", "--preset", "empty", "--altitudes", "40,300", "--thresholds", "128",
               "--set", "propagation.grid_n=20", "--out", str(out)])
    assert rc == 0
    assert capsys.readouterr().out.strip() == "pl_th=128 altitude=40 coverage=1.0000"


def test_threads_env(monkeypatch, tmp_path):
    monkeypatch.setenv("SKYLOSS_THREADS", "2")
    out = tmp_path / "d"
    assert main(["gen", "--out", str(out), "--regions", "2", "--train-fraction", "0.5", *SMALL]) == 0
    assert len(load_dataset(out).ids) == 2
