import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kiloekf.learner import (
    DEFAULT_TAU_GRID,
    CvRow,
    SingularGramError,
    TrainingSet,
    _select,
    assemble,
    cross_validate,
    cross_validate_sets,
    fit,
    fit_all_sensors,
    heldout_nll,
    LearnedModel,
    objective,
    objective_gradient_D,
)
from kiloekf.lifting import FeatureConfig
from kiloekf.simulator import (
    ImuNoise,
    LaserStream,
    SensorDataset,
    SimulationConfig,
    TrajectorySpec,
    UwbGeometry,
    UwbStream,
    simulate,
    with_seed,
)

NOISELESS = SimulationConfig(TrajectorySpec(duration=20.0), ImuNoise(enabled=False), None)
HC = FeatureConfig(r_count=0)


@pytest.fixture(scope="module")
def noiseless_sets():
    return [simulate(with_seed(NOISELESS, s, k)) for s, k in [(1, "circular2D"), (2, "circular3D"), (3, "random-smooth")]]


def planted(rng, n_x=8, m_y=2, P=400, noise=0.0):
    X = rng.normal(size=(n_x, P))
    D0 = rng.normal(size=(m_y, n_x))
    Y = D0 @ X + noise * rng.normal(size=(m_y, P))
    return D0, TrainingSet(X, Y)


def test_assemble_empty_and_single(noiseless_sets):
    ds = noiseless_sets[0]
    empty = SensorDataset(
        "e", ds.truth, ds.imu, UwbStream(np.zeros(0), np.zeros(0, int), np.zeros(0, int), np.zeros(0)),
        LaserStream(np.zeros(0), np.zeros(0)),
    )
    with pytest.raises(ValueError):
        assemble(empty, "uwb:0:0", HC)
    one = SensorDataset(
        "o", ds.truth, ds.imu, UwbStream(ds.uwb.stamps[:1], ds.uwb.anchor[:1], ds.uwb.tag[:1], ds.uwb.ranges[:1]),
        LaserStream(np.zeros(0), np.zeros(0)),
    )
    ts = assemble(one, f"uwb:{ds.uwb.anchor[0]}:{ds.uwb.tag[0]}", HC)
    assert ts.X.shape == (HC.n_x, 1) and ts.Y.shape == (1, 1)
    assert ts.Y[0, 0] == ds.uwb.ranges[0] ** 2


def test_assemble_drops_samples_without_truth(noiseless_sets):
    ds = noiseless_sets[0]
    shifted = SensorDataset(
        "s", ds.truth, ds.imu,
        UwbStream(ds.uwb.stamps + np.where(np.arange(len(ds.uwb)) % 2, 0.0, 0.004 + 0.002), ds.uwb.anchor, ds.uwb.tag, ds.uwb.ranges),
        ds.laser,
    )
    full = assemble(ds, "uwb:0:0", HC)
    part = assemble(shifted, "uwb:0:0", HC)
    assert part.dropped > 0 and part.P + part.dropped == full.P


def test_assemble_then_exact_linear_fit(noiseless_sets):
    train = TrainingSet.concat(assemble(d, "uwb:2:1", HC) for d in noiseless_sets)
    m = fit(train, 1e-12, 0.0)
    assert np.sqrt(np.mean((m.D @ train.X - train.Y) ** 2)) < 1e-8


def test_heldout_prediction_of_noiseless_squared_ranges(noiseless_sets):
    train = TrainingSet.concat(assemble(d, "uwb:4:0", HC) for d in noiseless_sets)
    test = assemble(simulate(with_seed(NOISELESS, 11, "random-smooth")), "uwb:4:0", HC)
    m = fit(train, 1e-12, 0.0)
    assert np.sqrt(np.mean((m.D @ test.X - test.Y) ** 2)) < 1e-6


def test_planted_model_recovery(rng):
    D0, train = planted(rng)
    m = fit(train, 1e-12, 0.0)
    assert np.abs(m.D - D0).max() < 1e-8
    np.testing.assert_allclose(m.R, 1e-12 * D0 @ D0.T, atol=1e-15)


def test_identity_design_returns_targets(rng):
    Y = rng.normal(size=(3, 6))
    m = fit(TrainingSet(np.eye(6), Y), 0.0, 0.0)
    np.testing.assert_allclose(m.D, Y, atol=1e-14)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.floats(1e-8, 1.0), st.floats(0.0, 1.0))
def test_duplication_invariance(seed, tau_d, tau_r):
    rng = np.random.default_rng(seed)
    _, train = planted(rng, P=60, noise=0.1)
    dup = TrainingSet(np.hstack([train.X, train.X]), np.hstack([train.Y, train.Y]))
    a, b = fit(train, tau_d, tau_r), fit(dup, tau_d, tau_r)
    assert np.abs(a.D - b.D).max() <= 1e-12 * max(1.0, np.abs(a.D).max())
    np.testing.assert_allclose(a.R, b.R, rtol=1e-10, atol=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.0, 10.0), st.floats(1e-10, 1.0))
def test_R_floor(seed, tau_r, tau_d):
    rng = np.random.default_rng(seed)
    _, train = planted(rng, m_y=3, P=30, noise=0.5)
    m = fit(train, tau_d, tau_r)
    np.testing.assert_array_equal(m.R, m.R.T)
    assert np.linalg.eigvalsh(m.R).min() >= tau_r - 1e-12


def test_gradient_vanishes_at_fit(rng):
    _, train = planted(rng, n_x=10, m_y=3, P=500, noise=0.3)
    tau_d, tau_r = 1e-3, 1e-4
    m = fit(train, tau_d, tau_r)
    grad = objective_gradient_D(train, m.D, m.R, tau_d)
    scale = np.linalg.norm(np.linalg.solve(m.R, train.Y @ train.X.T))
    assert np.linalg.norm(grad) / scale < 1e-6
    # Analytic gradient agrees with finite differences of V.
    E = np.zeros_like(m.D)
    E[1, 4] = 1e-5
    fd = (objective(train, m.D + E, m.R, tau_d, tau_r) - objective(train, m.D - E, m.R, tau_d, tau_r)) / 2e-5
    G2 = objective_gradient_D(train, m.D + 10 * E, m.R, tau_d)
    fd2 = (objective(train, m.D + 11 * E, m.R, tau_d, tau_r) - objective(train, m.D + 9 * E, m.R, tau_d, tau_r)) / 2e-5
    assert abs(fd) < 1e-6 * scale
    assert abs(fd2 - G2[1, 4]) < 1e-4 * abs(G2[1, 4])


def test_fit_is_stationary_in_R(rng):
    _, train = planted(rng, n_x=5, m_y=2, P=200, noise=0.2)
    tau_d, tau_r = 1e-2, 1e-3
    m = fit(train, tau_d, tau_r)
    v0 = objective(train, m.D, m.R, tau_d, tau_r)
    for _ in range(10):
        A = rng.normal(size=(2, 2)) * 1e-4
        assert objective(train, m.D, m.R + A @ A.T, tau_d, tau_r) >= v0 - 1e-9


def test_singular_gram_reports_condition(rng):
    X = rng.normal(size=(4, 50))
    X[3] = X[2]
    with pytest.raises(SingularGramError) as err:
        fit(TrainingSet(X, X[:1]), 0.0, 0.0)
    assert err.value.cond > 1e12
    assert "condition" in str(err.value)


def test_fit_argument_checks(rng):
    _, train = planted(rng, P=5)
    with pytest.raises(ValueError):
        fit(train, -1.0, 0.0)
    with pytest.raises(ValueError):
        fit(TrainingSet(np.zeros((3, 0)), np.zeros((1, 0))), 1.0, 0.0)
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        fit(train, 1e-3, 0.0)
    assert any("P=5" in str(x.message) for x in w)
    with pytest.raises(ValueError):
        TrainingSet(np.zeros((3, 4)), np.zeros((1, 5)))


def test_cross_validation_on_planted_model(rng):
    # The NLL-optimal ridge is about n_x sigma^2 / (P |D0|^2) ~ 1e-10 here, below the grid,
    # so the search should land at (or next to) the smallest tau_D.
    n_x, sigma = 6, 1e-3
    D0 = rng.normal(size=(1, n_x))
    sets = []
    for _ in range(4):
        X = rng.normal(size=(n_x, 500))
        sets.append(TrainingSet(X, D0 @ X + sigma * rng.normal(size=(1, 500))))
    table = cross_validate_sets(sets)
    assert len(table) == len(DEFAULT_TAU_GRID) ** 2
    best = _select(table)
    grid = list(DEFAULT_TAU_GRID)
    assert grid.index(best.tau_d) <= 1
    true_model = LearnedModel("", D0, np.array([[sigma**2]]), 0.0, 0.0)
    true_nll = np.mean([heldout_nll(true_model, s) for s in sets])
    assert abs(best.nll - true_nll) <= 0.05 * abs(true_nll)


def test_cross_validation_single_point_and_errors(rng):
    sets = [planted(rng, P=50, noise=0.1)[1] for _ in range(2)]
    table = cross_validate_sets(sets, [1e-3], [1e-2])
    assert len(table) == 1 and table[0].tau_d == 1e-3 and table[0].tau_r == 1e-2
    with pytest.raises(ValueError):
        cross_validate_sets(sets[:1])
    with pytest.raises(ValueError):
        cross_validate_sets(sets, [], [1.0])


def test_tie_break_prefers_larger_taus():
    rows = [CvRow(1e-4, 1e-6, 1.0, 2.0), CvRow(1e-2, 1e-6, 1.0, 2.0), CvRow(1e-2, 1e-3, 1.0, 2.0), CvRow(1e-8, 1e-8, 1.0, 3.0)]
    best = _select(rows)
    assert (best.tau_d, best.tau_r) == (1e-2, 1e-3)


def test_cross_validate_on_datasets(noiseless_sets):
    cfg = FeatureConfig(r_count=4)
    model, table = cross_validate(noiseless_sets[:2], "uwb:1:0", cfg, [1e-8, 1e-4], [1e-6], k_ell_grid=[1.0, 4.0])
    assert len(table) == 4
    assert model.config.k_ell in (1.0, 4.0)
    assert model.sensor_id == "uwb:1:0" and model.D.shape == (1, cfg.n_x)


def test_fit_all_sensors_catalog(noiseless_sets):
    cfgs = {"uwb": HC, "laser": FeatureConfig(r_count=0, lifting_tag="identity")}
    hyper = {"uwb": {"tau_d": 1e-10, "tau_r": 1e-8}, "laser": {"tau_d": 1e-10, "tau_r": 1e-8}}
    reg = fit_all_sensors(noiseless_sets, cfgs, hyper)
    assert len(reg) == 13
    for a in range(6):
        for t in range(2):
            assert reg.lookup(a, t).sensor_id == f"uwb:{a}:{t}"
    assert reg.lookup().config.lifting_tag == "identity"
    small = simulate(
        SimulationConfig(
            TrajectorySpec(duration=5.0),
            ImuNoise(enabled=False),
            None,
            geometry=UwbGeometry([[1.5, 1.5, 2.0]], [[0.1, 0.0, 0.0]]),
        )
    )
    assert len(fit_all_sensors([small], cfgs, hyper)) == 2


def test_fit_time_scales_linearly():
    from kiloekf.harness import training_time

    cfg = FeatureConfig(r_count=100)
    t1 = training_time(10_000, cfg, repeats=5)
    t2 = training_time(20_000, cfg, repeats=5)
    assert 1.6 <= t2 / t1 <= 2.6
