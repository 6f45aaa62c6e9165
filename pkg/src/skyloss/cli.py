"""Command-line entry point: ``skyloss {gen,train,eval,optimize,sweep}``.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import HataEnv, baseline_distribution, write_baseline_report
from .config import RunConfig
from .coverage import CoverageTable, coverage_table, write_coverage_csv
from .dataset import (
    build_dataset,
    is_nonempty_dir,
    load_dataset,
    read_raster,
    split,
    write_manifest,
)
from .errors import (
    ConfigurationError,
    ConsistencyError,
    DegenerateInputError,
    DomainError,
    TrainingError,
)
from .histogram import (
    BIN_CENTERS,
    MultiAltitudeTarget,
    concat_target,
    mse_per_altitude,
    variance_per_altitude,
    write_targets_csv,
)
from .network import Model, load_checkpoint, save_checkpoint, train, write_history_csv
from .propagation import batch_simulate, check_altitudes
from .scene import SCENE_PRESETS, Scene, generate_scene, receiver_grid

log = logging.getLogger("skyloss")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
EXTENDED_ALTITUDES = (40.0, 80.0, 120.0, 160.0, 300.0, 600.0, 1500.0)


class UsageError(Exception):
    pass


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}")


def _altitude_list(text):
    values = _float_list(text)
    try:
        check_altitudes(values)
    except ConfigurationError as exc:
        raise argparse.ArgumentTypeError(str(exc))
    return values


def _key_value(text):
    key, sep, raw = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("SKYLOSS_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigurationError(f"SKYLOSS_THREADS={env!r} is not an integer")
    return 1


def _load_config(args, flags: dict) -> RunConfig:
    overrides = dict(args.set or [])
    overrides.update({k: v for k, v in flags.items() if v is not None})
    return RunConfig.load(args.config, overrides)


# ---------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    cfg = _load_config(
        args,
        {
            "dataset.regions": args.regions,
            "dataset.altitudes": args.altitudes,
            "dataset.seed": args.seed,
            "dataset.train_fraction": args.train_fraction,
        },
    )
    out = Path(args.out)
    if is_nonempty_dir(out) and not args.force:
        log.error("output directory %s is not empty (use --force)", out)
        return EXIT_IO
    dcfg = cfg.dataset_config()
    manifest = build_dataset(out, dcfg, threads=_threads(args))
    manifest = split(manifest, cfg["dataset.train_fraction"], dcfg.master_seed)
    path = write_manifest(out, manifest)
    log.info(
        "wrote %d regions (%d train / %d test) to %s",
        dcfg.n_regions, len(manifest["split"]["train"]), len(manifest["split"]["test"]), out,
    )
    print(path)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(
        args,
        {
            "train.epochs": args.epochs,
            "train.seed": args.seed,
            "train.learning_rate": args.lr,
            "train.momentum": args.momentum,
            "train.batch_size": args.batch_size,
        },
    )
    ds = load_dataset(args.data)
    spec = cfg.model_spec(ds.images.shape[1:], ds.altitudes)
    tcfg = cfg.train_config()
    model = Model.create(spec, seed=tcfg.seed)
    model, history = train(
        ds.images, ds.targets, (ds.indices("train"), ds.indices("test")), tcfg, model=model
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out)
    history_path = Path(args.history) if args.history else out.with_suffix(".history.csv")
    write_history_csv(history_path, history, ds.altitudes)
    if history:
        last = history[-1]
        log.info("epoch %d train_loss %.6f test_mse %s", last["epoch"], last["train_loss"],
                 np.array2string(last["test_mse"], precision=6))
    print(out)
    return EXIT_OK


def _predictions(ds, args, idx):
    if args.oracle:
        return ds.targets[idx].copy()
    model = load_checkpoint(args.model)
    if tuple(model.spec.altitudes) != ds.altitudes:
        raise ConsistencyError(f"model altitudes {model.spec.altitudes} differ from dataset {ds.altitudes}")
    return model.predict(ds.images[idx])


def cmd_eval(args) -> int:
    if not args.oracle and not args.model:
        raise UsageError("eval needs --model or --oracle")
    ds = load_dataset(args.data)
    idx = ds.indices("test")
    truth = ds.targets[idx]
    pred = _predictions(ds, args, idx)
    mse = mse_per_altitude(truth, pred)
    var = variance_per_altitude(truth)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "mse_table.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["altitude_m", "mse", "test_variance"])
        for a, m, v in zip(ds.altitudes, mse, var):
            w.writerow([f"{a:g}", f"{m:.9g}", f"{v:.9g}"])

    ids = [ds.ids[i] for i in idx]
    write_targets_csv(out / "predictions.csv", pred, ds.altitudes)
    (out / "predictions_ids.txt").write_text("\n".join(ids) + "\n")
    with open(out / "scatter.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "altitude_m", "bin_center_db", "true", "pred"])
        for sid, t, p in zip(ids, truth, pred):
            for k, a in enumerate(ds.altitudes):
                for b, c in enumerate(BIN_CENTERS):
                    w.writerow([sid, f"{a:g}", f"{c:g}", f"{t[k, b]:.9g}", f"{p[k, b]:.9g}"])

    _write_baseline_reports(ds, ids[: args.report_samples], truth, pred, out / "baselines")

    for a, m, v in zip(ds.altitudes, mse, var):
        print(f"altitude {a:g} m: mse {m:.3e}  test variance {v:.3e}  {'ok' if m < v else 'ABOVE'}")
    print("mse decreases with altitude:", bool(np.all(np.diff(mse) < 0)))
    return EXIT_OK


def _write_baseline_reports(ds, ids, truth, pred, out_dir):
    if not ids:
        return
    out_dir.mkdir(parents=True, exist_ok=True)
    dcfg = ds.config
    for n, sid in enumerate(ids):
        grid = receiver_grid(ds.scene(sid), dcfg.grid_n, dcfg.rx_height)
        for k, a in enumerate(ds.altitudes):
            tx = replace(dcfg.tx, altitude=a)
            fs = baseline_distribution(grid, tx, "free-space")
            hata = baseline_distribution(grid, tx, "okumura-hata", HataEnv.URBAN_SMALL)
            write_baseline_report(out_dir / f"{sid}_{a:g}m.csv", truth[n, k], pred[n, k], fs, hata)


def cmd_optimize(args) -> int:
    if args.from_truth and args.sample is None:
        raise UsageError("--from-truth needs --sample")
    if args.from_model and args.model is None:
        raise UsageError("--from-model needs --model")
    if args.sample is None and args.raster is None:
        raise UsageError("give --sample or --raster")
    if args.model is None and args.sample is None:
        raise UsageError("a raster alone needs --model")
    if args.sample is not None and args.data is None:
        raise UsageError("--sample needs --data")
    cfg = _load_config(args, {"coverage.thresholds": args.thresholds})
    thresholds = cfg["coverage.thresholds"]

    true_t = pred_t = None
    if args.sample is not None:
        ds = load_dataset(args.data)
        if args.sample not in ds.ids:
            raise UsageError(f"unknown sample id {args.sample!r}")
        i = ds.ids.index(args.sample)
        true_t = MultiAltitudeTarget(ds.altitudes, ds.targets[i])
    if args.model is not None:
        model = load_checkpoint(args.model)
        if args.raster is not None:
            image = read_raster(args.raster).data
        else:
            image = ds.images[ds.ids.index(args.sample)]
        probs = model.predict(np.asarray(image, dtype=np.float64)[None])[0]
        pred_t = MultiAltitudeTarget(tuple(model.spec.altitudes), probs)

    use_model = args.from_model or (pred_t is not None and not args.from_truth)
    true_table = CoverageTable.from_target(true_t, thresholds) if true_t is not None else None
    pred_table = CoverageTable.from_target(pred_t, thresholds) if pred_t is not None else None
    if args.out:
        write_coverage_csv(args.out, true_table, pred_table)

    chosen = pred_table if use_model else true_table
    best = chosen.argmax()
    for j, th in enumerate(chosen.thresholds):
        a = chosen.altitudes[best[j]]
        print(f"pl_th={th:g} altitude={a:g} coverage={chosen.coverage[best[j], j]:.4f}")
    if true_t is not None and pred_t is not None:
        report = coverage_table(true_t, pred_t, thresholds)
        log.info(
            "argmax agreement %d/%d, max coverage gap at disagreement %.4f",
            int(report.agreement.sum()), report.agreement.size, report.max_gap_at_disagreement,
        )
    return EXIT_OK


def cmd_sweep(args) -> int:
    """Coverage versus altitude on one scene, from simulated distributions."""
    cfg = _load_config(args, {"coverage.thresholds": args.thresholds})
    dcfg = cfg.dataset_config()
    if args.scene:
        scene = Scene.from_json(Path(args.scene).read_text())
    else:
        scene = generate_scene(SCENE_PRESETS[args.preset], args.seed)
    grid = receiver_grid(scene, dcfg.grid_n, dcfg.rx_height)
    maps = batch_simulate(scene, grid, args.altitudes, dcfg.tx, dcfg.nlos)
    table = CoverageTable.from_target(concat_target(maps), cfg["coverage.thresholds"])
    write_coverage_csv(args.out, true=table)
    best = table.argmax()
    for j, th in enumerate(table.thresholds):
        print(f"pl_th={th:g} altitude={table.altitudes[best[j]]:g} coverage={table.coverage[best[j], j]:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file with flat dotted keys")
    common.add_argument(
        "--set", action="append", type=_key_value, metavar="KEY=VALUE",
        help="override one config key (value parsed as JSON); repeatable",
    )
    common.add_argument(
        "--threads", type=int, default=None,
        help="worker cap (default: $SKYLOSS_THREADS or 1)",
    )
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    p = argparse.ArgumentParser(prog="skyloss", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"skyloss {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="build a synthetic dataset")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--regions", type=int, help="number of regions")
    g.add_argument("--altitudes", type=_altitude_list, help="strictly increasing, e.g. 40,80,120,300")
    g.add_argument("--seed", type=int, help="master seed")
    g.add_argument("--train-fraction", type=float, help="share of regions in the train split")
    g.add_argument("--force", action="store_true", help="write into a non-empty directory")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", parents=[common], help="train the network on a dataset")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--history", help="history CSV path (default: <out>.history.csv)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int, help="initialization and shuffling seed")
    t.add_argument("--lr", type=float, help="learning rate (default 1e-4)")
    t.add_argument("--momentum", type=float, help="momentum (default 0.7)")
    t.add_argument("--batch-size", type=int, help="batch size (default 8)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="per-altitude MSE on the test split")
    e.add_argument("--data", required=True, help="dataset directory")
    src = e.add_mutually_exclusive_group()
    src.add_argument("--model", help="checkpoint to evaluate")
    src.add_argument("--oracle", action="store_true", help="predict the true targets")
    e.add_argument("--out", required=True, help="report directory")
    e.add_argument(
        "--report-samples", type=int, default=3,
        help="test samples that get free-space/Hata comparison tables",
    )
    e.set_defaults(func=cmd_eval)

    o = sub.add_parser("optimize", parents=[common], help="pick the coverage-maximizing altitude")
    o.add_argument("--data", help="dataset directory")
    o.add_argument("--sample", help="sample id in the dataset")
    o.add_argument("--raster", help="raster file to feed the model instead of a dataset sample")
    o.add_argument("--model", help="checkpoint")
    which = o.add_mutually_exclusive_group()
    which.add_argument("--from-truth", action="store_true", help="choose from simulated distributions")
    which.add_argument("--from-model", action="store_true", help="choose from predicted distributions")
    o.add_argument("--thresholds", type=_float_list, help="path-loss thresholds in dB")
    o.add_argument("--out", help="coverage table CSV")
    o.set_defaults(func=cmd_optimize)

    s = sub.add_parser("sweep", parents=[common], help="coverage vs altitude on one scene")
    scn = s.add_mutually_exclusive_group()
    scn.add_argument("--scene", help="scene JSON file")
    scn.add_argument("--preset", choices=sorted(SCENE_PRESETS), default="dense")
    s.add_argument("--seed", type=int, default=0, help="scene seed for --preset")
    s.add_argument("--altitudes", type=_altitude_list, default=list(EXTENDED_ALTITUDES))
    s.add_argument("--thresholds", type=_float_list)
    s.add_argument("--out", required=True, help="coverage CSV")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    logging.captureWarnings(True)
    try:
        return args.func(args)
    except (UsageError, ConfigurationError, ConsistencyError) as exc:
        print(f"skyloss {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"skyloss {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TrainingError, DomainError, DegenerateInputError, FloatingPointError) as exc:
        print(f"skyloss {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
