import numpy as np
import pytest

from kiloekf.baselines import SensorNoiseSpec, uwb_predict
from kiloekf.inertial import GRAVITY, ProcessNoiseSpec, propagate_nominal
from kiloekf.lie import NavState, so3_log
from kiloekf.simulator import (
    ARENA,
    KINDS,
    DistortionSpec,
    ImuNoise,
    SimulationConfig,
    TrajectorySpec,
    default_geometry,
    generate_truth,
    parse_sensor_id,
    simulate,
    synthesize_imu,
    synthesize_measurements,
    uwb_sensor_id,
)

NOISELESS = SimulationConfig(imu_noise=ImuNoise(enabled=False), sensor_noise=None)


def dead_reckon(ds, steps):
    x = ds.truth.state(0)
    errs = [0.0]
    for k in range(steps):
        dt = ds.imu.stamps[k + 1] - ds.imu.stamps[k]
        x = propagate_nominal(x, ds.imu[k], GRAVITY, dt)
        errs.append(np.linalg.norm(x.t - ds.truth.t[k + 1]))
    return x, np.array(errs)


def test_circular2d_geometry():
    tr = generate_truth(TrajectorySpec(kind="circular2D", radius=1.0, height=1.0, period=12.0))
    np.testing.assert_allclose(tr.t[:, 2], 1.0, atol=1e-15)
    speed = np.linalg.norm(tr.v, axis=1)
    np.testing.assert_allclose(speed, 1.0 * 2 * np.pi / 12.0, rtol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(tr.t[:, :2], axis=1), 1.0, rtol=1e-12)


@pytest.mark.parametrize("kind", KINDS)
def test_truth_inside_arena_and_rotations_valid(kind):
    for seed in range(5):
        tr = generate_truth(TrajectorySpec(kind=kind, seed=seed))
        assert np.all(tr.t >= np.array(ARENA[0])) and np.all(tr.t <= np.array(ARENA[1]))
        err = np.einsum("nji,njk->nik", tr.C, tr.C) - np.eye(3)
        assert np.abs(err).max() < 1e-12
        assert np.allclose(np.linalg.det(tr.C), 1.0)


@pytest.mark.parametrize("kind", KINDS)
def test_velocity_matches_position_differences(kind):
    tr = generate_truth(TrajectorySpec(kind=kind, seed=2))
    h = tr.stamps[1] - tr.stamps[0]
    # Fourth-order central stencil; its truncation error is O(h^4).
    t = tr.t
    fd = (-t[4:] + 8 * t[3:-1] - 8 * t[1:-3] + t[:-4]) / (12 * h)
    assert np.abs(fd - tr.v[2:-2]).max() < 1e-6


def test_trajectory_leaving_arena_rejected():
    with pytest.raises(ValueError):
        generate_truth(TrajectorySpec(kind="circular2D", radius=2.0))
    with pytest.raises(ValueError):
        TrajectorySpec(kind="figure8")
    with pytest.raises(ValueError):
        TrajectorySpec(imu_rate=0)


def test_hover_imu_is_force_balance():
    tr = generate_truth(TrajectorySpec(kind="circular2D", duration=1.0))
    n = len(tr)
    tr.C[:] = np.eye(3)
    tr.v[:] = 0.0
    tr.t[:] = [0.0, 0.0, 1.0]
    tr.analytic.position[0].terms[:] = 0
    tr.analytic.position[1].terms[:] = 0
    for ang in (tr.analytic.yaw, tr.analytic.pitch, tr.analytic.roll):
        ang.terms[:] = 0
        ang.offset = 0.0
        ang.rate = 0.0
    imu, bias = synthesize_imu(tr, None)
    np.testing.assert_allclose(imu.gyro, 0.0, atol=1e-15)
    np.testing.assert_allclose(imu.accel, np.tile(-GRAVITY, (n, 1)), atol=1e-15)
    assert not bias.any()


@pytest.mark.parametrize("kind", KINDS)
def test_noiseless_imu_reproduces_truth(kind):
    ds = simulate(SimulationConfig(TrajectorySpec(kind=kind, seed=4), ImuNoise(enabled=False), None))
    x, errs = dead_reckon(ds, len(ds.imu) - 1)
    assert errs.max() < 1e-4
    assert np.linalg.norm(so3_log(x.C.T @ ds.truth.C[-1])) < 1e-10


@pytest.mark.parametrize("kind", KINDS)
def test_short_horizon_error_matches_discretization_bound(kind):
    # Velocity-exact synthesis leaves a position term of dt^2/12 * (a(t_k) - a(t_0)) plus O(dt^3).
    ds = simulate(SimulationConfig(TrajectorySpec(kind=kind, seed=4), ImuNoise(enabled=False), None))
    _, errs = dead_reckon(ds, 100)
    an = ds.truth.analytic
    dt = 0.01
    s = ds.truth.stamps[:101]
    bound = dt * dt / 12 * np.linalg.norm(an.a(s) - an.a(s[:1]), axis=1)
    assert np.all(errs <= bound + 2e-7)


def test_slow_circle_hundred_steps_within_micrometre():
    spec = TrajectorySpec(kind="circular2D", period=20.0, seed=1)
    ds = simulate(SimulationConfig(spec, ImuNoise(enabled=False), None))
    _, errs = dead_reckon(ds, 100)
    assert errs.max() < 1e-6


def test_bias_random_walk_variance_slope():
    tr = generate_truth(TrajectorySpec(kind="circular2D", duration=10.0))
    p = ProcessNoiseSpec(sigma_bg=1e-3, sigma_ba=2e-3)
    scale = np.r_[[p.sigma_bg] * 3, [p.sigma_ba] * 3]
    idx = np.arange(100, 1001, 100)
    runs = np.array([synthesize_imu(tr, ImuNoise(process=p), seed=s)[1][idx] / scale for s in range(400)])
    # Pool the six axes: normalized variance should grow as t.
    var = runs.var(axis=0).mean(axis=1)
    t = tr.stamps[idx]
    slope = (t @ var) / (t @ t)
    assert abs(slope - 1) < 0.1


def test_noiseless_ranges_equal_analytic_model():
    ds = simulate(NOISELESS)
    g = ds.geometry
    for k in range(0, len(ds.uwb), 97):
        x = ds.truth.state(int(round(ds.uwb.stamps[k] * 100)))
        a = list(g.anchor_ids).index(ds.uwb.anchor[k])
        i = list(g.tag_ids).index(ds.uwb.tag[k])
        assert abs(ds.uwb.ranges[k] - uwb_predict(x, g, i, a)[0]) < 1e-14
    np.testing.assert_array_equal(ds.laser.heights, ds.truth.t[::5, 2])


def test_range_bias_shifts_every_sample():
    tr = generate_truth(TrajectorySpec(duration=5.0))
    g = default_geometry()
    clean, _ = synthesize_measurements(tr, g)
    shifted, _ = synthesize_measurements(tr, g, distortion=DistortionSpec(range_bias=0.2, enabled=True))
    np.testing.assert_allclose(shifted.ranges - clean.ranges, 0.2, atol=1e-14)
    off, _ = synthesize_measurements(tr, g, distortion=DistortionSpec(range_bias=0.2, enabled=False))
    np.testing.assert_array_equal(off.ranges, clean.ranges)


def test_range_noise_std():
    tr = generate_truth(TrajectorySpec(duration=90.0))
    g = default_geometry()
    clean, _ = synthesize_measurements(tr, g)
    noisy, laser = synthesize_measurements(tr, g, SensorNoiseSpec(0.05, 0.01), seed=3)
    res = noisy.ranges - clean.ranges
    assert res.size >= 10_000
    assert abs(res.std() / 0.05 - 1) < 0.05
    assert abs((laser.heights - tr.t[::5, 2]).std() / 0.01 - 1) < 0.1


def test_distorted_ranges_stay_positive():
    cfg = SimulationConfig(
        TrajectorySpec(kind="random-smooth", seed=2),
        distortion=DistortionSpec(range_bias=0.1, range_scale=1.05, field_amplitude=0.3, enabled=True),
    )
    ds = simulate(cfg)
    assert np.all(ds.uwb.ranges > 0)


def test_rates_and_staggering():
    ds = simulate(NOISELESS)
    assert len(ds.imu) == 6001
    per_pair = {}
    for s, a, t in zip(ds.uwb.stamps, ds.uwb.anchor, ds.uwb.tag):
        per_pair.setdefault((a, t), []).append(s)
    assert len(per_pair) == 12
    for stamps in per_pair.values():
        np.testing.assert_allclose(np.diff(stamps), 0.1, atol=1e-12)
    firsts = sorted(v[0] for v in per_pair.values())
    assert len(set(np.round(firsts, 6))) > 1
    assert np.all(np.diff(ds.uwb.stamps) >= 0)
    np.testing.assert_allclose(np.diff(ds.laser.stamps), 0.05, atol=1e-12)


def test_simulation_is_deterministic():
    cfg = SimulationConfig(TrajectorySpec(kind="random-smooth", seed=9, duration=5.0))
    a, b = simulate(cfg), simulate(cfg)
    for x, y in [(a.imu.gyro, b.imu.gyro), (a.imu.accel, b.imu.accel), (a.uwb.ranges, b.uwb.ranges),
                 (a.laser.heights, b.laser.heights), (a.truth.bias, b.truth.bias)]:
        np.testing.assert_array_equal(x, y)
    c = simulate(SimulationConfig(TrajectorySpec(kind="random-smooth", seed=10, duration=5.0)))
    assert not np.array_equal(a.uwb.ranges, c.uwb.ranges)


def test_measurement_stream_and_ids():
    ds = simulate(SimulationConfig(TrajectorySpec(duration=2.0)))
    ms = ds.measurements()
    assert len(ms) == len(ds.uwb) + len(ds.laser)
    assert all(a.stamp <= b.stamp for a, b in zip(ms, ms[1:]))
    assert len(ds.sensor_ids()) == 13
    assert parse_sensor_id(uwb_sensor_id(3, 1)) == ("uwb", 3, 1)
    assert parse_sensor_id("laser") == ("laser",)
    with pytest.raises(ValueError):
        parse_sensor_id("lidar:1:2")


def test_head_cuts_all_streams():
    ds = simulate(SimulationConfig(TrajectorySpec(duration=10.0)))
    h = ds.head(0.5)
    stop = h.truth.stamps[-1]
    assert len(h.imu) == len(h.truth)
    assert h.uwb.stamps.max() <= stop and h.laser.stamps.max() <= stop
    with pytest.raises(ValueError):
        ds.head(0.0)


def test_true_bias_stream_is_stored():
    cfg = SimulationConfig(TrajectorySpec(duration=2.0), ImuNoise(bias0_sigma_gyro=0.01, bias0_sigma_accel=0.02))
    ds = simulate(cfg)
    assert ds.truth.bias.shape == (len(ds.truth), 6)
    assert np.abs(ds.truth.bias[0]).max() > 0
    assert isinstance(ds.truth.state(3), NavState)
