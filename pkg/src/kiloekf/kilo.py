"""KILO-EKF measurement update and the event-driven filter loop.

``run_filter`` predicts on every IMU sample and then applies, in stream
order, every measurement stamped in ``(t_{k-1}, t_k]``.  Measurements at or
before the first IMU stamp are applied to the initial belief.  The same loop
drives the learned and the analytic (baseline) updates, so both share one
prediction path.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.stats import chi2

from .baselines import (
    CalibrationData,
    SensorNoiseSpec,
    UwbGeometry,
    laser_update,
    lm_calibrate,
    miscalibrate,
    uwb_update,
)
from .inertial import GRAVITY, AnalyticMeasurement, FilterBelief, ProcessNoiseSpec, predict, update
from .lie import NavState
from .learner import LearnedModel, _nearest
from .lifting import FeatureConfig, embed_pose_jacobian, lift_measurement, lift_with_jacobian
from .simulator import LASER_ID, ImuStream, RawMeasurement, SensorDataset, parse_sensor_id

GATE_PROB = 0.999
VARIANTS = ("CAD", "MisCAD", "DataCal")


class StaleModelError(ValueError):
    pass


class StreamOrderError(ValueError):
    def __init__(self, stream: str, index: int):
        super().__init__(f"{stream} stream is not time-sorted at index {index}")
        self.stream = stream
        self.index = index


def gate_threshold(m_y: int) -> float:
    return float(chi2.ppf(GATE_PROB, m_y))


def kilo_update(
    belief: FilterBelief,
    meas: RawMeasurement,
    model: LearnedModel,
    config: FeatureConfig,
    gate: Optional[float] = None,
) -> FilterBelief:
    if model.sensor_id != meas.sensor_id:
        raise ValueError(f"model {model.sensor_id!r} applied to measurement from {meas.sensor_id!r}")
    if model.config_fingerprint != config.fingerprint():
        raise StaleModelError(
            f"model {model.sensor_id} was trained with features {model.config_fingerprint}, "
            f"filter uses {config.fingerprint()}; retrain or reload the matching config"
        )
    x, J = lift_with_jacobian(belief.state, config)
    y = lift_measurement(meas.value, config.lifting_tag)
    H = embed_pose_jacobian(model.D @ J)
    return update(belief, AnalyticMeasurement(y, model.D @ x, H, model.R), gate)


@dataclass
class FilterRun:
    """Beliefs at every IMU stamp, stored as stacked arrays."""

    stamps: np.ndarray
    C: np.ndarray
    v: np.ndarray
    t: np.ndarray
    bias: np.ndarray
    P: np.ndarray
    events: Counter = field(default_factory=Counter)

    def __len__(self):
        return len(self.stamps)

    def state(self, k: int) -> NavState:
        return NavState.from_parts(C=self.C[k], v=self.v[k], t=self.t[k], bias=self.bias[k])


def _check_sorted(stamps, name):
    bad = np.flatnonzero(np.diff(stamps) < 0)
    if bad.size:
        raise StreamOrderError(name, int(bad[0]) + 1)


def run_filter(
    imu: ImuStream,
    measurements,
    updater: Callable[[FilterBelief, RawMeasurement], FilterBelief],
    init: FilterBelief,
    noise: ProcessNoiseSpec,
    g=GRAVITY,
) -> FilterRun:
    measurements = list(measurements)
    n = len(imu)
    if n == 0:
        raise ValueError("empty IMU stream")
    _check_sorted(imu.stamps, "imu")
    mstamps = np.array([m.stamp for m in measurements], dtype=float)
    _check_sorted(mstamps, "measurement")
    C = np.empty((n, 3, 3))
    v = np.empty((n, 3))
    t = np.empty((n, 3))
    bias = np.empty((n, 6))
    P = np.empty((n, 15, 15))
    events = Counter()

    def apply_until(belief, j, stop):
        while j < len(measurements) and mstamps[j] <= stop:
            belief = updater(belief, measurements[j])
            events["updates"] += 1
            if belief.diagnostic:
                events[belief.diagnostic] += 1
                belief = FilterBelief(belief.state, belief.P)
            j += 1
        return belief, j

    def store(k, b):
        s = b.state
        C[k], v[k], t[k], bias[k], P[k] = s.C, s.v, s.t, s.bias, b.P

    belief, j = apply_until(init, 0, imu.stamps[0])
    store(0, belief)
    for k in range(1, n):
        dt = imu.stamps[k] - imu.stamps[k - 1]
        if dt > 0:
            belief = predict(belief, imu[k - 1], noise, g, dt)
        belief, j = apply_until(belief, j, imu.stamps[k])
        store(k, belief)
    events["unused"] = len(measurements) - j
    return FilterRun(imu.stamps.copy(), C, v, t, bias, P, events)


class KiloUpdater:
    """Routes each measurement to its learned model; optional chi-square gate."""

    def __init__(self, registry: dict, configs: Optional[dict] = None, gating: bool = False):
        self.registry = registry
        self.configs = configs
        self.gating = gating

    def __call__(self, belief, meas):
        model = self.registry.get(meas.sensor_id)
        if model is None:
            return FilterBelief(belief.state, belief.P, diagnostic="no model")
        cfg = model.config if self.configs is None else self.configs[parse_sensor_id(meas.sensor_id)[0]]
        gate = gate_threshold(model.D.shape[0]) if self.gating else None
        return kilo_update(belief, meas, model, cfg, gate)


class AnalyticUpdater:
    """Analytic UWB and laser updates against a fixed geometry."""

    def __init__(self, geom: UwbGeometry, noise: SensorNoiseSpec, gating: bool = False):
        self.geom = geom
        self.noise = noise
        self.anchor_index = {a: i for i, a in enumerate(geom.anchor_ids)}
        self.tag_index = {a: i for i, a in enumerate(geom.tag_ids)}
        self.gate = gate_threshold(1) if gating else None

    def __call__(self, belief, meas):
        kind = parse_sensor_id(meas.sensor_id)
        if kind[0] == LASER_ID:
            return laser_update(belief, meas.value, self.noise.sigma_laser, self.gate)
        j, i = self.anchor_index[kind[1]], self.tag_index[kind[2]]
        return uwb_update(belief, self.geom, i, j, meas.value, self.noise.sigma_uwb, self.gate)


def calibration_data(datasets, geom: UwbGeometry) -> CalibrationData:
    """Range samples of every training sequence paired with nearest groundtruth poses."""
    anchor_index = {a: i for i, a in enumerate(geom.anchor_ids)}
    tag_index = {a: i for i, a in enumerate(geom.tag_ids)}
    parts = []
    for ds in datasets:
        idx, gap = _nearest(ds.truth.stamps, ds.uwb.stamps)
        ok = gap <= 5e-3
        parts.append(
            (
                ds.truth.C[idx[ok]],
                ds.truth.t[idx[ok]],
                np.array([anchor_index[a] for a in ds.uwb.anchor[ok]], dtype=int),
                np.array([tag_index[a] for a in ds.uwb.tag[ok]], dtype=int),
                ds.uwb.ranges[ok],
            )
        )
    return CalibrationData(*(np.concatenate(p) for p in zip(*parts)))


def baseline_geometry(variant: str, geom: UwbGeometry, train=(), calib_init: Optional[UwbGeometry] = None):
    """Geometry used by a baseline variant.

    DataCal refines ``calib_init`` (default: ``geom``) on the training sequences.
    """
    if variant == "CAD":
        return geom
    if variant == "MisCAD":
        return miscalibrate(geom)
    if variant == "DataCal":
        train = list(train)
        if not train:
            raise ValueError("DataCal needs training sequences")
        return lm_calibrate(calibration_data(train, geom), calib_init or geom).geometry
    raise ValueError(f"unknown baseline variant {variant!r}")


def truth_init(dataset: SensorDataset, sigmas=(0.1, 0.1, 0.1, 0.01, 0.01)) -> FilterBelief:
    P = np.diag(np.repeat(np.asarray(sigmas, dtype=float) ** 2, 3))
    return FilterBelief(dataset.truth.state(0), P)


def run_baseline(
    variant: str,
    dataset: SensorDataset,
    noise: SensorNoiseSpec,
    geom: UwbGeometry,
    process: Optional[ProcessNoiseSpec] = None,
    init: Optional[FilterBelief] = None,
    train=(),
    calib_init: Optional[UwbGeometry] = None,
) -> FilterRun:
    used = baseline_geometry(variant, geom, train, calib_init)
    return run_filter(
        dataset.imu,
        dataset.measurements(),
        AnalyticUpdater(used, noise),
        init or truth_init(dataset),
        process or ProcessNoiseSpec(),
    )


def run_kilo(
    dataset: SensorDataset,
    registry: dict,
    process: Optional[ProcessNoiseSpec] = None,
    init: Optional[FilterBelief] = None,
    gating: bool = False,
) -> FilterRun:
    return run_filter(
        dataset.imu,
        dataset.measurements(),
        KiloUpdater(registry, gating=gating),
        init or truth_init(dataset),
        process or ProcessNoiseSpec(),
    )
