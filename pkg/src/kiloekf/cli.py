"""``kiloekf`` command line.

Every subcommand takes ``--config`` (YAML, see ``configs/example.yaml``),
``--out`` (output directory) and ``--seed``.  Exit codes: 0 on success, 2 on
a configuration or input error, 3 on a numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import harness
from .baselines import SingularGeometryError, lm_calibrate, miscalibrate
from .io import (
    DatasetIOError,
    export_dataset,
    load_models,
    load_yaml,
    read_geometry,
    save_feature_configs,
    save_models,
    write_geometry,
    write_trajectory,
)
from .kilo import AnalyticUpdater, KiloUpdater, calibration_data, run_filter
from .simulator import default_geometry

log = logging.getLogger("kiloekf")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _setup(args):
    cfg = harness.resolve_config(load_yaml(args.config) if args.config else {}, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return cfg, out


def cmd_simulate(args):
    cfg, out = _setup(args)
    for name, ds in harness.load_datasets(cfg).items():
        export_dataset(ds, out / name)
        print(f"{name}: {len(ds.imu)} imu, {len(ds.uwb)} uwb, {len(ds.laser)} laser")


def cmd_train(args):
    cfg, out = _setup(args)
    data = harness.load_datasets(cfg)
    features = harness.feature_configs(cfg)
    registry = harness.train_models(list(data.values()), cfg, features)
    save_models(out / "models.npz", registry)
    save_feature_configs(out / "features.yaml", features)
    print(f"trained {len(registry)} models on {len(data)} sequences -> {out / 'models.npz'}")


def cmd_calibrate(args):
    cfg, out = _setup(args)
    data = list(harness.load_datasets(cfg).values())
    geom = data[0].geometry or default_geometry()
    f = cfg["filter"]
    init = miscalibrate(geom, np.deg2rad(f["miscal_angle_deg"]), f["miscal_axis"]) if f["datacal_init"] == "miscad" else geom
    res = lm_calibrate(calibration_data(data, geom), init)
    write_geometry(out / "geometry.txt", res.geometry)
    (out / "calibration.json").write_text(
        json.dumps({"costs": res.costs, "iterations": res.iterations, "converged": res.converged, "stalled": res.stalled}, indent=2)
        + "\n"
    )
    print(f"LM: {res.iterations} iterations, cost {res.costs[0]:.6g} -> {res.costs[-1]:.6g}")


def cmd_filter(args):
    cfg, out = _setup(args)
    data = harness.load_datasets(cfg)
    process, sensor_noise = harness.filter_settings(cfg)
    f = cfg["filter"]
    models = load_models(args.models) if args.models else None
    calibrated = read_geometry(args.geometry) if args.geometry else None
    rows = []
    for i, (name, ds) in enumerate(data.items()):
        geom = ds.geometry or default_geometry()
        for method in cfg["methods"]:
            if method == "KILO":
                if models is None:
                    raise harness.ConfigError("KILO needs --models (see `kiloekf train`)")
                updater = KiloUpdater(models, gating=f["gating"])
            elif method == "DataCal":
                if calibrated is None:
                    raise harness.ConfigError("DataCal needs --geometry (see `kiloekf calibrate`)")
                updater = AnalyticUpdater(calibrated, sensor_noise, gating=f["gating"])
            else:
                used = miscalibrate(geom, np.deg2rad(f["miscal_angle_deg"]), f["miscal_axis"]) if method == "MisCAD" else geom
                updater = AnalyticUpdater(used, sensor_noise, gating=f["gating"])
            init = harness.initial_belief_for(ds, cfg, cfg["seed"] + i)
            run = run_filter(ds.imu, ds.measurements(), updater, init, process)
            rep = harness.metrics(run, ds.truth)
            write_trajectory(out / f"{name}_{method}.csv", run, rep.nees_series)
            rows.append(
                {"test": name, "method": method, "pos_rmse": rep.pos_rmse, "rot_rmse": rep.rot_rmse,
                 "nees_mean": rep.nees_mean, "flagged": rep.flagged}
            )
            print(f"{name} {method}: pos RMSE {rep.pos_rmse:.4g} m, NEES {rep.nees_mean:.3g}")
    harness.write_rows(out / "metrics.csv", rows, ["test", "method", "pos_rmse", "rot_rmse", "nees_mean", "flagged"])


def cmd_experiment(args):
    cfg, out = _setup(args)
    bundle = harness.run_experiment(cfg, out)
    for method, rmse in bundle.summary().items():
        print(f"{method}: mean pos RMSE {rmse:.4g} m")


def cmd_ablate(args):
    cfg, out = _setup(args)
    ab = cfg["ablation"]
    for r in harness.ablate(cfg, ab["axis"], ab["grid"], out):
        print(f"{r['axis']}={r['value']} {r['method']}: pos RMSE {r['pos_rmse']:.4g} m")


def cmd_timing(args):
    cfg, out = _setup(args)
    for r in harness.time_report(cfg, out):
        print(f"{r['kind']} {r['param']}={r['value']}: {r['seconds']:.3g} s")


COMMANDS = {
    "simulate": (cmd_simulate, "simulate the configured sequences into dataset directories"),
    "train": (cmd_train, "fit one model per sensor on all configured sequences"),
    "filter": (cmd_filter, "run the configured methods on every sequence"),
    "calibrate": (cmd_calibrate, "refine the UWB geometry by Levenberg-Marquardt"),
    "experiment": (cmd_experiment, "cross-validated comparison of all methods"),
    "ablate": (cmd_ablate, "sweep SERFF count or training fraction"),
    "timing": (cmd_timing, "training and inference wall-clock tables"),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kiloekf", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", type=Path, help="YAML config file (defaults apply when omitted)")
        s.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        s.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        if name == "filter":
            s.add_argument("--models", type=Path, help="model bundle from `train`")
            s.add_argument("--geometry", type=Path, help="calibrated geometry from `calibrate`")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    try:
        COMMANDS[args.command][0](args)
    except (np.linalg.LinAlgError, SingularGeometryError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (harness.ConfigError, DatasetIOError, ValueError, KeyError, TypeError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
