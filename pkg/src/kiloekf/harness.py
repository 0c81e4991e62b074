"""Experiment orchestration: datasets, fold plans, training, filtering, metrics.

Everything is driven by one plain ``dict`` config (usually loaded from YAML,
see ``configs/example.yaml``).  Result tables are written as CSV; each row
carries the config hash and seed.  Wall-clock timings go to separate files
so result tables stay byte-identical across reruns.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .baselines import SensorNoiseSpec, miscalibrate
from .inertial import FilterBelief, ProcessNoiseSpec
from .io import DatasetIOError, import_dataset, read_geometry
from .kilo import FilterRun, KiloUpdater, baseline_geometry, run_filter, AnalyticUpdater
from .learner import (
    DEFAULT_TAU_GRID,
    LearnedModel,
    ModelRegistry,
    TrainingSet,
    cross_validate,
    fit,
    fit_all_sensors,
    sensor_kind,
)
from .lie import local_difference, right_retract, so3_log
from .lifting import FeatureConfig, lift_poses
from .simulator import (
    DistortionSpec,
    ImuNoise,
    SensorDataset,
    SimulationConfig,
    TrajectorySpec,
    default_geometry,
    simulate,
)

log = logging.getLogger(__name__)

METHODS = ("KILO", "CAD", "MisCAD", "DataCal")
ABLATION_AXES = ("serff_count", "train_fraction")
MAX_GAP = 5e-3


class ConfigError(ValueError):
    pass


class FoldLeakError(AssertionError):
    pass


# ---------------------------------------------------------------- metrics


@dataclass
class MetricsReport:
    pos_rmse: float
    rot_rmse: float
    nees_mean: float
    nees_raw_mean: float
    nees_series: np.ndarray
    pos_err: np.ndarray
    rot_err: np.ndarray
    flagged: int = 0
    train_s: float = 0.0
    infer_s_per_step: float = 0.0


def metrics(run: FilterRun, truth, train_s: float = 0.0, infer_s_per_step: float = 0.0) -> MetricsReport:
    """RMSEs and dimension-normalized NEES of a filter run against groundtruth.

    Steps whose covariance is not positive definite are flagged, excluded
    from the NEES average and counted.
    """
    j = np.clip(np.searchsorted(truth.stamps, run.stamps), 1, max(len(truth) - 1, 1))
    if len(truth) > 1:
        left = truth.stamps[j - 1]
        j = np.where(np.abs(run.stamps - left) <= np.abs(truth.stamps[j] - run.stamps), j - 1, j)
    else:
        j = np.zeros(len(run), dtype=int)
    if np.any(np.abs(truth.stamps[j] - run.stamps) > MAX_GAP):
        raise ValueError("estimate and groundtruth stamps are not aligned within 5 ms")
    n = len(run)
    pos_err = np.linalg.norm(run.t - truth.t[j], axis=1)
    rot_err = np.empty(n)
    nees = np.full(n, np.nan)
    flagged = 0
    for k in range(n):
        rot_err[k] = np.linalg.norm(so3_log(run.C[k].T @ truth.C[j[k]]))
        dx = local_difference(run.state(k), truth.state(j[k]))
        try:
            L = np.linalg.cholesky(run.P[k])
        except np.linalg.LinAlgError:
            flagged += 1
            continue
        w = np.linalg.solve(L, dx)
        nees[k] = w @ w
    ok = ~np.isnan(nees)
    raw = float(np.mean(nees[ok])) if ok.any() else float("nan")
    return MetricsReport(
        float(np.sqrt(np.mean(pos_err**2))),
        float(np.sqrt(np.mean(rot_err**2))),
        raw / 15.0,
        raw,
        nees / 15.0,
        pos_err,
        rot_err,
        flagged,
        train_s,
        infer_s_per_step,
    )


# ---------------------------------------------------------------- folds


@dataclass
class FoldPlan:
    folds: list  # [(test_id, [train_ids])]
    extra_train: list = field(default_factory=list)

    def __post_init__(self):
        tests = [t for t, _ in self.folds]
        if len(set(tests)) != len(tests):
            raise ConfigError("test sequences must be pairwise distinct")
        for test, train in self.folds:
            if test in train or test in self.extra_train:
                raise ConfigError(f"test sequence {test} also listed for training")

    @classmethod
    def leave_one_out(cls, test_ids, extra_train=()):
        test_ids = list(test_ids)
        return cls([(t, [s for s in test_ids if s != t]) for t in test_ids], list(extra_train))

    def training_ids(self, i: int) -> list:
        return list(self.folds[i][1]) + list(self.extra_train)

    def guard(self, i: int):
        test = self.folds[i][0]

        def check(names):
            if test in names:
                raise FoldLeakError(f"test sequence {test} reached a fit call")

        return check

    def sequence_ids(self) -> list:
        ids = []
        for t, tr in self.folds:
            for s in [t, *tr]:
                if s not in ids:
                    ids.append(s)
        return ids + [s for s in self.extra_train if s not in ids]


# ---------------------------------------------------------------- config


DEFAULTS = {
    "seed": 0,
    "simulation": {
        "duration": 60.0,
        "imu_rate": 100.0,
        "meas_rate": 10.0,
        "laser_rate": 20.0,
        "imu_noise": {"enabled": True, "bias0_sigma_gyro": 0.0, "bias0_sigma_accel": 0.0},
        "sensor_noise": {"sigma_uwb": 0.05, "sigma_laser": 0.01},
        "distortion": {"enabled": False},
        "geometry": None,
    },
    "sequences": [],
    "datasets": [],
    "folds": None,
    "extra_train": [],
    "features": {
        "uwb": {"r_count": 100, "lifting_tag": "squared"},
        "laser": {"r_count": 0, "lifting_tag": "identity"},
    },
    "hyper": {"uwb": {"tau_d": 1e-6, "tau_r": 1e-6}, "laser": {"tau_d": 1e-6, "tau_r": 1e-6}},
    "cv": None,
    "filter": {
        "process_noise": {},
        "sensor_noise": {"sigma_uwb": 0.05, "sigma_laser": 0.01},
        "init_sigmas": [0.1, 0.1, 0.1, 0.01, 0.01],
        "init_mode": "truth",
        "gating": False,
        "miscal_angle_deg": 1.0,
        "miscal_axis": 2,
        "datacal_init": "cad",
    },
    "methods": list(METHODS),
    "ablation": {"axis": "serff_count", "grid": [0, 25, 50, 100]},
    "timing": {"sample_counts": [10000, 20000, 40000], "serff_counts": [0, 25, 50, 100], "repeats": 5},
}


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve_config(config: dict, seed: Optional[int] = None) -> dict:
    unknown = set(config or {}) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = _merge(DEFAULTS, config)
    if seed is not None:
        cfg["seed"] = int(seed)
    bad = [m for m in cfg["methods"] if m not in METHODS]
    if bad:
        raise ConfigError(f"unknown methods {bad}; choose from {METHODS}")
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:16]


def simulation_config(cfg: dict) -> SimulationConfig:
    sim = cfg["simulation"]
    imu = dict(sim.get("imu_noise") or {"enabled": False})
    proc = ProcessNoiseSpec(**{k: imu.pop(k) for k in list(imu) if k.startswith("sigma_")})
    sn = sim.get("sensor_noise")
    geom = read_geometry(sim["geometry"]) if sim.get("geometry") else default_geometry()
    traj = TrajectorySpec(
        duration=float(sim["duration"]),
        imu_rate=float(sim["imu_rate"]),
        meas_rate=float(sim["meas_rate"]),
        laser_rate=float(sim["laser_rate"]),
    )
    return SimulationConfig(
        traj,
        ImuNoise(proc, **imu),
        SensorNoiseSpec(**sn) if sn else None,
        DistortionSpec(**(sim.get("distortion") or {})),
        geom,
    )


def sequence_name(kind: str, seed: int) -> str:
    return f"{kind}_{seed}"


def load_datasets(cfg: dict) -> dict:
    """All sequences named by the config; directories are checked before any simulation."""
    missing = [d for d in cfg["datasets"] if not Path(d).is_dir()]
    if missing:
        raise DatasetIOError(f"missing dataset directories: {missing}")
    out = {}
    for d in cfg["datasets"]:
        ds = import_dataset(d)
        out[ds.name] = ds
    base = simulation_config(cfg)
    for entry in cfg["sequences"]:
        kind = entry.get("kind", "circular2D")
        seed = int(entry.get("seed", 0)) + cfg["seed"]
        spec = TrajectorySpec(
            **{**base.trajectory.__dict__, "kind": kind, "seed": seed,
               **{k: v for k, v in entry.items() if k not in ("kind", "seed", "name")}}
        )
        name = entry.get("name") or sequence_name(kind, seed)
        sim_cfg = SimulationConfig(spec, base.imu_noise, base.sensor_noise, base.distortion, base.geometry)
        out[name] = simulate(sim_cfg, name)
    if not out:
        raise ConfigError("config names no sequences or datasets")
    return out


def fold_plan(cfg: dict, names) -> FoldPlan:
    names = list(names)
    if cfg["folds"]:
        plan = FoldPlan([(f["test"], list(f["train"])) for f in cfg["folds"]], list(cfg["extra_train"]))
    else:
        tests = [n for n in names if n not in cfg["extra_train"]]
        plan = FoldPlan.leave_one_out(tests, cfg["extra_train"])
    unknown = [s for s in plan.sequence_ids() if s not in names]
    if unknown:
        raise ConfigError(f"fold plan references unknown sequences {unknown}")
    return plan


def feature_configs(cfg: dict) -> dict:
    return {k: FeatureConfig.from_dict(v) for k, v in cfg["features"].items()}


def filter_settings(cfg: dict):
    f = cfg["filter"]
    return ProcessNoiseSpec(**(f.get("process_noise") or {})), SensorNoiseSpec(**f["sensor_noise"])


def initial_belief_for(dataset: SensorDataset, cfg: dict, seed: int) -> FilterBelief:
    f = cfg["filter"]
    P = np.diag(np.repeat(np.asarray(f["init_sigmas"], dtype=float) ** 2, 3))
    truth = dataset.truth.state(0)
    if f["init_mode"] == "truth":
        return FilterBelief(truth, P)
    if f["init_mode"] == "sampled":
        # Pose drawn from N(truth, P0); bias estimate zero (simulated biases start from their own prior).
        rng = np.random.default_rng(seed)
        dx = np.zeros(15)
        dx[:9] = rng.multivariate_normal(np.zeros(9), P[:9, :9])
        est = right_retract(truth, dx)
        est = type(est)(est.pose, np.zeros(6))
        return FilterBelief(est, P)
    raise ConfigError(f"unknown init_mode {f['init_mode']!r}")


# ---------------------------------------------------------------- training


def train_models(train_sets, cfg: dict, features: dict, guard=None) -> ModelRegistry:
    if not cfg["cv"]:
        return fit_all_sensors(train_sets, features, cfg["hyper"], guard)
    if guard is not None:
        guard([ds.name for ds in train_sets])
    cv = cfg["cv"]
    catalog = sorted({sid for ds in train_sets for sid in ds.sensor_ids()})
    reg = ModelRegistry()
    for sid in catalog:
        cfg_k = features[sensor_kind(sid)]
        model, _ = cross_validate(
            train_sets,
            sid,
            cfg_k,
            cv.get("tau_d_grid", DEFAULT_TAU_GRID),
            cv.get("tau_r_grid", DEFAULT_TAU_GRID),
            cv.get("k_ell_grid"),
        )
        reg[sid] = model
    return reg


def _method_run(method, test, train_sets, cfg, features, seed, guard):
    process, sensor_noise = filter_settings(cfg)
    init = initial_belief_for(test, cfg, seed)
    meas = test.measurements()
    f = cfg["filter"]
    t0 = time.perf_counter()
    if method == "KILO":
        updater = KiloUpdater(train_models(train_sets, cfg, features, guard), gating=f["gating"])
    else:
        geom = test.geometry or default_geometry()
        if method == "MisCAD":
            used = miscalibrate(geom, np.deg2rad(f["miscal_angle_deg"]), f["miscal_axis"])
        elif method == "DataCal":
            guard([ds.name for ds in train_sets])
            init_geom = (
                miscalibrate(geom, np.deg2rad(f["miscal_angle_deg"]), f["miscal_axis"])
                if f["datacal_init"] == "miscad"
                else geom
            )
            used = baseline_geometry("DataCal", geom, train_sets, init_geom)
        else:
            used = baseline_geometry(method, geom)
        updater = AnalyticUpdater(used, sensor_noise, gating=f["gating"])
    train_s = time.perf_counter() - t0
    t0 = time.perf_counter()
    run = run_filter(test.imu, meas, updater, init, process)
    infer = (time.perf_counter() - t0) / max(len(test.imu), 1)
    return run, metrics(run, test.truth, train_s, infer)


# ---------------------------------------------------------------- experiments


ROW_FIELDS = ["fold", "test", "method", "pos_rmse", "rot_rmse", "nees_mean", "nees_raw_mean", "flagged", "config_hash", "seed"]


@dataclass
class ResultBundle:
    rows: list
    timings: list
    config_hash: str
    runs: dict = field(default_factory=dict, repr=False)

    def summary(self) -> dict:
        """Mean position RMSE per method across folds."""
        out = {}
        for r in self.rows:
            out.setdefault(r["method"], []).append(r["pos_rmse"])
        return {m: float(np.mean(v)) for m, v in out.items()}


def _fmt(v):
    return f"{v:.12g}" if isinstance(v, float) else v


def write_rows(path, rows, fields):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r[k]) for k in fields})


def _experiment(cfg: dict, data: dict, fraction: float = 1.0, keep_runs=False, cache=None) -> ResultBundle:
    """``cache`` (dict) memoizes baseline reports per fold when only KILO settings vary."""
    h = config_hash(cfg)
    plan = fold_plan(cfg, data)
    features = feature_configs(cfg)
    rows, timings, runs = [], [], {}
    for i, (test_id, _) in enumerate(plan.folds):
        train_sets = [data[s] if fraction >= 1 else data[s].head(fraction) for s in plan.training_ids(i)]
        for method in cfg["methods"]:
            key = (i, method)
            if cache is not None and method != "KILO" and key in cache:
                run, rep = cache[key]
            else:
                run, rep = _method_run(method, data[test_id], train_sets, cfg, features, cfg["seed"] + i, plan.guard(i))
                if cache is not None and method != "KILO":
                    cache[key] = (run, rep)
            rows.append(
                {
                    "fold": i,
                    "test": test_id,
                    "method": method,
                    "pos_rmse": rep.pos_rmse,
                    "rot_rmse": rep.rot_rmse,
                    "nees_mean": rep.nees_mean,
                    "nees_raw_mean": rep.nees_raw_mean,
                    "flagged": rep.flagged,
                    "config_hash": h,
                    "seed": cfg["seed"],
                }
            )
            timings.append({"fold": i, "method": method, "train_s": rep.train_s, "infer_s_per_step": rep.infer_s_per_step})
            if keep_runs:
                runs[(i, method)] = (run, rep)
    return ResultBundle(rows, timings, h, runs)


def run_experiment(config: dict, out_dir=None, seed: Optional[int] = None, datasets=None, keep_runs=False) -> ResultBundle:
    """Train and filter every fold x method; missing dataset files fail before any compute."""
    cfg = resolve_config(config, seed)
    data = datasets if datasets is not None else load_datasets(cfg)
    bundle = _experiment(cfg, data, keep_runs=keep_runs)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_rows(out / "results.csv", bundle.rows, ROW_FIELDS)
        write_rows(out / "timings.csv", bundle.timings, ["fold", "method", "train_s", "infer_s_per_step"])
        (out / "config.json").write_text(json.dumps(cfg, sort_keys=True, indent=2, default=str) + "\n")
    return bundle


ABLATION_FIELDS = ["axis", "value", "method", "pos_rmse", "rot_rmse", "nees_mean", "config_hash", "seed"]


def ablate(config: dict, axis: str, grid, out_dir=None, seed: Optional[int] = None, datasets=None) -> list:
    """Sweep one axis; one row per grid point and method with fold-averaged metrics."""
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}")
    grid = list(grid)
    if not grid:
        raise ConfigError("empty ablation grid")
    if axis == "train_fraction" and any(not 0 < float(g) <= 1 for g in grid):
        raise ConfigError("train_fraction values must lie in (0, 1]")
    cfg = resolve_config(config, seed)
    data = datasets if datasets is not None else load_datasets(cfg)
    h = config_hash(cfg)
    rows = []
    # Baselines do not depend on the feature count, so they run once per fold.
    cache = {} if axis == "serff_count" else None
    for value in grid:
        c = copy.deepcopy(cfg)
        fraction = 1.0
        if axis == "serff_count":
            for k in c["features"].values():
                k["r_count"] = int(value)
        else:
            fraction = float(value)
        bundle = _experiment(c, data, fraction, cache=cache)
        for method, mean in bundle.summary().items():
            sel = [r for r in bundle.rows if r["method"] == method]
            rows.append(
                {
                    "axis": axis,
                    "value": value,
                    "method": method,
                    "pos_rmse": mean,
                    "rot_rmse": float(np.mean([r["rot_rmse"] for r in sel])),
                    "nees_mean": float(np.mean([r["nees_mean"] for r in sel])),
                    "config_hash": h,
                    "seed": cfg["seed"],
                }
            )
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        write_rows(Path(out_dir) / f"ablation_{axis}.csv", rows, ABLATION_FIELDS)
    return rows


# ---------------------------------------------------------------- timing


def _median_time(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def training_time(P: int, n_x_config: FeatureConfig, repeats: int = 5, seed: int = 0) -> float:
    """Median wall time of one closed-form fit on ``P`` synthetic lifted samples."""
    rng = np.random.default_rng(seed)
    t = rng.uniform(-1.5, 1.5, size=(P, 3))
    C = np.broadcast_to(np.eye(3), (P, 3, 3))
    X = lift_poses(C, t, n_x_config)
    Y = np.sum(t * t, axis=1)[None, :]
    train = TrainingSet(X, Y)
    fit(train, 1e-6, 1e-6, config=n_x_config)  # warm-up
    return _median_time(lambda: fit(train, 1e-6, 1e-6, config=n_x_config), repeats)


def inference_time(r_count: int, repeats: int = 5, n_updates: int = 200, seed: int = 0) -> float:
    """Median per-update wall time of a KILO update with ``r_count`` SERFFs."""
    from .kilo import kilo_update
    from .lie import NavState
    from .simulator import RawMeasurement

    cfg = FeatureConfig(r_count=r_count, seed=seed)
    rng = np.random.default_rng(seed)
    model = LearnedModel("uwb:0:0", rng.normal(size=(1, cfg.n_x)) * 1e-3, np.eye(1), 1e-6, 1e-6, cfg)
    belief = FilterBelief(NavState.from_parts(t=[0.2, -0.3, 1.0]), np.eye(15) * 1e-2)
    meas = RawMeasurement(0.0, "uwb:0:0", 2.0)

    def go():
        for _ in range(n_updates):
            kilo_update(belief, meas, model, cfg)

    go()
    return _median_time(go, repeats) / n_updates


def time_report(config: dict, out_dir=None, seed: Optional[int] = None) -> list:
    cfg = resolve_config(config, seed)
    t = cfg["timing"]
    repeats = max(int(t.get("repeats", 5)), 1)
    rows = []
    methods = cfg["methods"]
    if not methods:
        return rows
    feat = FeatureConfig.from_dict(cfg["features"]["uwb"])
    for P in t["sample_counts"]:
        rows.append({"kind": "train", "param": "P", "value": int(P), "seconds": training_time(int(P), feat, repeats, cfg["seed"])})
    for r in t["serff_counts"]:
        rows.append({"kind": "infer_per_update", "param": "serff_count", "value": int(r), "seconds": inference_time(int(r), repeats, seed=cfg["seed"])})
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        write_rows(Path(out_dir) / "timing.csv", rows, ["kind", "param", "value", "seconds"])
    return rows
