"""Synthetic quadrotor datasets: truth, IMU, UWB ranges and laser heights.

Trajectories are analytic sums of sinusoids, so positions, velocities and
accelerations are exact.  IMU samples are built from truth increments,
``w_k = Log(C_k^T C_{k+1}) / dt`` and the step-averaged acceleration
``(v_{k+1} - v_k) / dt``, which makes noiseless strapdown propagation
reproduce the truth up to an O(dt^2) bounded position term.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .baselines import SensorNoiseSpec, UwbGeometry
from .inertial import GRAVITY, ImuSample, ProcessNoiseSpec
from .lie import NavState, so3_log

ARENA = ((-1.5, -1.5, 0.0), (1.5, 1.5, 2.0))
KINDS = ("circular2D", "circular3D", "random-smooth")


def default_geometry() -> UwbGeometry:
    """Six anchors on arena corners, two tags 10 cm either side of body x."""
    (x0, y0, z0), (x1, y1, z1) = ARENA
    anchors = np.array(
        [
            [x0, y0, z1],
            [x1, y0, z0],
            [x1, y1, z1],
            [x0, y1, z0],
            [x0, y0, z0],
            [x1, y1, z0],
        ]
    )
    tags = np.array([[0.1, 0.0, 0.0], [-0.1, 0.0, 0.0]])
    return UwbGeometry(anchors, tags)


@dataclass(frozen=True)
class TrajectorySpec:
    kind: str = "circular2D"
    duration: float = 60.0
    imu_rate: float = 100.0
    meas_rate: float = 10.0
    laser_rate: float = 20.0
    arena: tuple = ARENA
    seed: int = 0
    radius: float = 1.0
    period: float = 12.0
    height: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        if min(self.imu_rate, self.meas_rate, self.laser_rate, self.duration) <= 0:
            raise ValueError("rates and duration must be positive")


@dataclass(frozen=True)
class DistortionSpec:
    """Non-ideal UWB ranging: ``scale * |d| + bias + field(t)``."""

    range_bias: float = 0.0
    range_scale: float = 1.0
    field_amplitude: float = 0.0
    enabled: bool = False
    seed: int = 0

    def __post_init__(self):
        if not self.range_scale > 0:
            raise ValueError("range_scale must be positive")


class _Sinusoids:
    """``offset + rate * s + sum_k a_k sin(w_k s + phi_k)`` and derivatives."""

    def __init__(self, offset=0.0, rate=0.0, terms=()):
        self.offset = offset
        self.rate = rate
        self.terms = np.asarray(terms, dtype=float).reshape(-1, 3)

    def __call__(self, s, order=0):
        s = np.asarray(s, dtype=float)
        a, w, phi = self.terms.T[:, :, None]
        arg = w * s + phi
        if order == 0:
            return self.offset + self.rate * s + np.sum(a * np.sin(arg), axis=0)
        if order == 1:
            return self.rate + np.sum(a * w * np.cos(arg), axis=0)
        return -np.sum(a * w * w * np.sin(arg), axis=0)


def _euler_to_C(yaw, pitch, roll):
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    C = np.empty(np.shape(yaw) + (3, 3))
    C[..., 0, 0] = cy * cp
    C[..., 0, 1] = cy * sp * sr - sy * cr
    C[..., 0, 2] = cy * sp * cr + sy * sr
    C[..., 1, 0] = sy * cp
    C[..., 1, 1] = sy * sp * sr + cy * cr
    C[..., 1, 2] = sy * sp * cr - cy * sr
    C[..., 2, 0] = -sp
    C[..., 2, 1] = cp * sr
    C[..., 2, 2] = cp * cr
    return C


@dataclass
class AnalyticTrajectory:
    position: list  # three _Sinusoids
    yaw: _Sinusoids
    pitch: _Sinusoids
    roll: _Sinusoids

    def t(self, s):
        return np.stack([p(s) for p in self.position], axis=-1)

    def v(self, s):
        return np.stack([p(s, 1) for p in self.position], axis=-1)

    def a(self, s):
        return np.stack([p(s, 2) for p in self.position], axis=-1)

    def C(self, s):
        return _euler_to_C(self.yaw(s), self.pitch(s), self.roll(s))


def _analytic(spec: TrajectorySpec) -> AnalyticTrajectory:
    rng = np.random.default_rng(spec.seed)
    (x0, y0, z0), (x1, y1, z1) = spec.arena
    cx, cy = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
    wc = 2 * np.pi / spec.period
    phase = rng.uniform(0, 2 * np.pi)
    wobble = lambda amp: _Sinusoids(  # noqa: E731
        0.0, 0.0, [[amp, rng.uniform(0.5, 1.5), rng.uniform(0, 2 * np.pi)] for _ in range(2)]
    )
    if spec.kind in ("circular2D", "circular3D"):
        r = spec.radius
        px = _Sinusoids(cx, 0.0, [[r, wc, phase + np.pi / 2]])
        py = _Sinusoids(cy, 0.0, [[r, wc, phase]])
        vz = [[0.4, 2 * wc, rng.uniform(0, 2 * np.pi)]] if spec.kind == "circular3D" else []
        pz = _Sinusoids(spec.height, 0.0, vz)
        yaw = _Sinusoids(phase + np.pi / 2, wc, [[0.3, 0.7, rng.uniform(0, 2 * np.pi)]])
    else:
        half = np.array([x1 - x0, y1 - y0, z1 - z0]) / 2 - 0.35
        centre = np.array([cx, cy, 0.5 * (z0 + z1)])
        axes = []
        for k in range(3):
            amps = rng.dirichlet(np.ones(3)) * half[k]
            freqs = rng.uniform(0.2, 0.9, size=3)
            axes.append(_Sinusoids(centre[k], 0.0, np.c_[amps, freqs, rng.uniform(0, 2 * np.pi, 3)]))
        px, py, pz = axes
        yaw = _Sinusoids(rng.uniform(-np.pi, np.pi), 0.0, [[1.5, 0.2, rng.uniform(0, 2 * np.pi)], [0.8, 0.45, 0.0]])
    return AnalyticTrajectory([px, py, pz], yaw, wobble(0.08), wobble(0.08))


@dataclass
class Trajectory:
    """Time-indexed navigation states stored as stacked arrays."""

    stamps: np.ndarray
    C: np.ndarray
    v: np.ndarray
    t: np.ndarray
    bias: np.ndarray
    analytic: Optional[AnalyticTrajectory] = field(default=None, repr=False, compare=False)

    def __len__(self):
        return len(self.stamps)

    def state(self, k: int) -> NavState:
        return NavState.from_parts(C=self.C[k], v=self.v[k], t=self.t[k], bias=self.bias[k])

    def slice(self, sl) -> "Trajectory":
        return Trajectory(self.stamps[sl], self.C[sl], self.v[sl], self.t[sl], self.bias[sl], self.analytic)


@dataclass(frozen=True)
class ImuStream:
    stamps: np.ndarray
    gyro: np.ndarray
    accel: np.ndarray

    def __len__(self):
        return len(self.stamps)

    def __iter__(self):
        for k in range(len(self.stamps)):
            yield ImuSample(float(self.stamps[k]), self.gyro[k], self.accel[k])

    def __getitem__(self, k) -> ImuSample:
        return ImuSample(float(self.stamps[k]), self.gyro[k], self.accel[k])


def generate_truth(spec: TrajectorySpec) -> Trajectory:
    n = int(round(spec.duration * spec.imu_rate)) + 1
    stamps = np.arange(n) / spec.imu_rate
    traj = _analytic(spec)
    t = traj.t(stamps)
    lo, hi = np.asarray(spec.arena[0]), np.asarray(spec.arena[1])
    if np.any(t < lo) or np.any(t > hi):
        raise ValueError(f"{spec.kind} trajectory leaves the arena")
    return Trajectory(stamps, traj.C(stamps), traj.v(stamps), t, np.zeros((n, 6)), traj)


@dataclass(frozen=True)
class ImuNoise:
    """IMU noise for synthesis; ``process`` densities plus initial bias spread."""

    process: ProcessNoiseSpec = field(default_factory=ProcessNoiseSpec)
    bias0_sigma_gyro: float = 0.0
    bias0_sigma_accel: float = 0.0
    enabled: bool = True


def synthesize_imu(truth: Trajectory, noise: Optional[ImuNoise] = None, g=GRAVITY, seed: int = 0):
    """IMU samples at the truth stamps plus the true bias at each stamp.

    Returns ``(imu, bias)``; ``bias[k]`` is the bias active over ``[t_k, t_{k+1})``.
    """
    n = len(truth)
    dt = np.diff(truth.stamps)
    if truth.analytic is None:
        raise ValueError("IMU synthesis needs an analytic trajectory")
    # One look-ahead sample so the last IMU reading is defined.
    s_next = truth.stamps[-1] + dt[-1]
    C_all = np.concatenate([truth.C, truth.analytic.C(np.array([s_next]))])
    v_all = np.concatenate([truth.v, truth.analytic.v(np.array([s_next]))])
    h = np.r_[dt, dt[-1]]
    gyro = np.empty((n, 3))
    for k in range(n):
        gyro[k] = so3_log(C_all[k].T @ C_all[k + 1]) / h[k]
    acc_world = (v_all[1:] - v_all[:-1]) / h[:, None]
    accel = np.einsum("nji,nj->ni", truth.C, acc_world - g)

    bias = np.zeros((n, 6))
    if noise is not None and noise.enabled:
        rng = np.random.default_rng(seed)
        p = noise.process
        b0 = np.r_[
            rng.normal(0, noise.bias0_sigma_gyro, 3) if noise.bias0_sigma_gyro > 0 else np.zeros(3),
            rng.normal(0, noise.bias0_sigma_accel, 3) if noise.bias0_sigma_accel > 0 else np.zeros(3),
        ]
        steps = rng.standard_normal((n, 6)) * np.sqrt(h)[:, None]
        steps[:, :3] *= p.sigma_bg
        steps[:, 3:] *= p.sigma_ba
        bias = b0 + np.vstack([np.zeros((1, 6)), np.cumsum(steps[:-1], axis=0)])
        white = rng.standard_normal((n, 6)) / np.sqrt(h)[:, None]
        gyro = gyro + bias[:, :3] + p.sigma_g * white[:, :3]
        accel = accel + bias[:, 3:] + p.sigma_a * white[:, 3:]
    return ImuStream(truth.stamps.copy(), gyro, accel), bias


@dataclass
class UwbStream:
    stamps: np.ndarray
    anchor: np.ndarray
    tag: np.ndarray
    ranges: np.ndarray

    def __len__(self):
        return len(self.stamps)


@dataclass
class LaserStream:
    stamps: np.ndarray
    heights: np.ndarray

    def __len__(self):
        return len(self.stamps)


def _field_params(distortion: DistortionSpec, n_pairs: int):
    rng = np.random.default_rng(distortion.seed)
    # Three low-frequency plane waves of position per anchor-tag pair.
    k = rng.normal(0.0, 1.2, size=(n_pairs, 3, 3))
    phi = rng.uniform(0, 2 * np.pi, size=(n_pairs, 3))
    return k, phi


def distortion_field(distortion: DistortionSpec, pair: int, n_pairs: int, t) -> np.ndarray:
    k, phi = _field_params(distortion, n_pairs)
    t = np.atleast_2d(t)
    return distortion.field_amplitude * np.mean(np.sin(t @ k[pair].T + phi[pair]), axis=-1)


def synthesize_measurements(
    truth: Trajectory,
    geom: UwbGeometry,
    noise: Optional[SensorNoiseSpec] = None,
    distortion: Optional[DistortionSpec] = None,
    meas_rate: float = 10.0,
    laser_rate: float = 20.0,
    seed: int = 0,
):
    """Staggered per-pair UWB ranges and laser heights at truth stamps.

    ``noise=None`` gives noiseless measurements.
    """
    rng = np.random.default_rng(seed)
    dt = truth.stamps[1] - truth.stamps[0]
    pairs = geom.pairs
    n_pairs = len(pairs)
    uwb_step = max(int(round(1.0 / (meas_rate * dt))), 1)
    rows = []
    for p, (j, i) in enumerate(pairs):
        idx = np.arange(p % uwb_step, len(truth), uwb_step)
        Cr = np.einsum("nij,j->ni", truth.C[idx], geom.tags[i])
        dist = np.linalg.norm(geom.anchors[j] - truth.t[idx] - Cr, axis=1)
        if distortion is not None and distortion.enabled:
            dist = (
                distortion.range_scale * dist
                + distortion.range_bias
                + distortion_field(distortion, p, n_pairs, truth.t[idx])
            )
        rows.append((idx, np.full(idx.size, j), np.full(idx.size, i), dist))
    idx = np.concatenate([r[0] for r in rows])
    order = np.argsort(idx, kind="stable")
    anchor = np.concatenate([r[1] for r in rows])[order]
    tag = np.concatenate([r[2] for r in rows])[order]
    ranges = np.concatenate([r[3] for r in rows])[order]
    idx = idx[order]
    if noise is not None:
        ranges = ranges + rng.normal(0.0, noise.sigma_uwb, size=ranges.size)
    if np.any(ranges <= 0):
        raise ValueError("synthesized ranges must stay positive")

    laser_step = max(int(round(1.0 / (laser_rate * dt))), 1)
    lidx = np.arange(0, len(truth), laser_step)
    heights = truth.t[lidx, 2].copy()
    if noise is not None:
        heights = heights + rng.normal(0.0, noise.sigma_laser, size=heights.size)
    uwb = UwbStream(
        truth.stamps[idx].copy(),
        np.asarray(geom.anchor_ids)[anchor],
        np.asarray(geom.tag_ids)[tag],
        ranges,
    )
    return uwb, LaserStream(truth.stamps[lidx].copy(), heights)


@dataclass(frozen=True)
class RawMeasurement:
    stamp: float
    sensor_id: str
    value: float


def uwb_sensor_id(anchor, tag) -> str:
    return f"uwb:{anchor}:{tag}"


LASER_ID = "laser"


def parse_sensor_id(sensor_id: str):
    """``('uwb', anchor_id, tag_id)`` or ``('laser',)``."""
    if sensor_id == LASER_ID:
        return (LASER_ID,)
    kind, a, t = sensor_id.split(":")
    if kind != "uwb":
        raise ValueError(f"bad sensor id {sensor_id!r}")
    return ("uwb", int(a), int(t))


@dataclass
class SensorDataset:
    name: str
    truth: Trajectory
    imu: ImuStream
    uwb: UwbStream
    laser: LaserStream
    geometry: Optional[UwbGeometry] = None
    meta: dict = field(default_factory=dict)

    def measurements(self) -> list:
        """All exteroceptive measurements sorted by stamp (UWB before laser on ties)."""
        out = [
            RawMeasurement(float(s), uwb_sensor_id(int(a), int(t)), float(r))
            for s, a, t, r in zip(self.uwb.stamps, self.uwb.anchor, self.uwb.tag, self.uwb.ranges)
        ]
        out += [RawMeasurement(float(s), LASER_ID, float(h)) for s, h in zip(self.laser.stamps, self.laser.heights)]
        out.sort(key=lambda m: m.stamp)
        return out

    def sensor_ids(self) -> list:
        ids = sorted({uwb_sensor_id(int(a), int(t)) for a, t in zip(self.uwb.anchor, self.uwb.tag)})
        if len(self.laser):
            ids.append(LASER_ID)
        return ids

    def head(self, fraction: float) -> "SensorDataset":
        """Leading ``fraction`` of the sequence (all streams cut at one stamp)."""
        if not 0 < fraction <= 1:
            raise ValueError("fraction must be in (0, 1]")
        n = max(int(round(fraction * len(self.truth))), 2)
        stop = self.truth.stamps[n - 1]
        u = self.uwb.stamps <= stop
        lz = self.laser.stamps <= stop
        return SensorDataset(
            self.name,
            self.truth.slice(slice(0, n)),
            ImuStream(self.imu.stamps[:n], self.imu.gyro[:n], self.imu.accel[:n]),
            UwbStream(self.uwb.stamps[u], self.uwb.anchor[u], self.uwb.tag[u], self.uwb.ranges[u]),
            LaserStream(self.laser.stamps[lz], self.laser.heights[lz]),
            self.geometry,
            dict(self.meta),
        )


@dataclass(frozen=True)
class SimulationConfig:
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    imu_noise: ImuNoise = field(default_factory=ImuNoise)
    sensor_noise: Optional[SensorNoiseSpec] = field(default_factory=SensorNoiseSpec)
    distortion: DistortionSpec = field(default_factory=DistortionSpec)
    geometry: UwbGeometry = field(default_factory=default_geometry)


def simulate(config: SimulationConfig, name: Optional[str] = None) -> SensorDataset:
    """Full dataset from one config; every random draw derives from the trajectory seed."""
    spec = config.trajectory
    seeds = np.random.SeedSequence(spec.seed).spawn(2)
    truth = generate_truth(spec)
    imu, bias = synthesize_imu(truth, config.imu_noise, GRAVITY, seed=int(seeds[0].generate_state(1)[0]))
    truth.bias = bias
    uwb, laser = synthesize_measurements(
        truth,
        config.geometry,
        config.sensor_noise,
        config.distortion,
        spec.meas_rate,
        spec.laser_rate,
        seed=int(seeds[1].generate_state(1)[0]),
    )
    name = name or f"sim_{spec.kind}_{spec.seed}"
    return SensorDataset(name, truth, imu, uwb, laser, config.geometry, {"seed": spec.seed, "kind": spec.kind})


def with_seed(config: SimulationConfig, seed: int, kind: Optional[str] = None) -> SimulationConfig:
    traj = replace(config.trajectory, seed=seed, kind=kind or config.trajectory.kind)
    return replace(config, trajectory=traj)
