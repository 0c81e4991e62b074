"""Closed-form MAP fit of lifted measurement models.

For lifted states ``X`` (n_x x P) and lifted measurements ``Y`` (m_y x P)::

    D = Y X^T (X X^T + P tau_D I)^-1
    R = (1/P) (Y - D X)(Y - D X)^T + tau_D D D^T + tau_R I

These are the stationary points of
``V = 1/2 |Y - D X|^2_{R^-1} + P/2 ln|R| + P tau_D/2 |D|^2_{R^-1} + P tau_R/2 tr(R^-1)``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .lifting import FeatureConfig, lift_measurement, lift_poses
from .simulator import LASER_ID, SensorDataset, parse_sensor_id, uwb_sensor_id

log = logging.getLogger(__name__)

MAX_GAP = 5e-3
CHUNK = 4096
DEFAULT_TAU_GRID = tuple(np.logspace(-8, -2, 7))


class SingularGramError(np.linalg.LinAlgError):
    def __init__(self, cond: float):
        super().__init__(f"regularized Gram matrix is singular (condition estimate {cond:.3g})")
        self.cond = cond


@dataclass
class TrainingSet:
    X: np.ndarray
    Y: np.ndarray
    dropped: int = 0
    sequence: str = ""

    def __post_init__(self):
        self.X = np.atleast_2d(self.X)
        self.Y = np.atleast_2d(self.Y)
        if self.X.shape[1] != self.Y.shape[1]:
            raise ValueError(f"X has {self.X.shape[1]} columns, Y has {self.Y.shape[1]}")

    @property
    def P(self) -> int:
        return self.X.shape[1]

    @staticmethod
    def concat(sets) -> "TrainingSet":
        sets = list(sets)
        return TrainingSet(
            np.concatenate([s.X for s in sets], axis=1),
            np.concatenate([s.Y for s in sets], axis=1),
            sum(s.dropped for s in sets),
            "+".join(s.sequence for s in sets),
        )


@dataclass
class LearnedModel:
    sensor_id: str
    D: np.ndarray
    R: np.ndarray
    tau_d: float
    tau_r: float
    config: FeatureConfig = field(default_factory=FeatureConfig)
    n_samples: int = 0

    @property
    def config_fingerprint(self) -> str:
        return self.config.fingerprint()

    def predict(self, X) -> np.ndarray:
        return self.D @ X


class ModelRegistry(dict):
    """``sensor_id -> LearnedModel`` with lookups by anchor/tag id."""

    def lookup(self, anchor=None, tag=None) -> LearnedModel:
        key = LASER_ID if anchor is None else uwb_sensor_id(anchor, tag)
        return self[key]


def _nearest(stamps, query):
    """Index of the nearest stamp and the absolute gap."""
    j = np.clip(np.searchsorted(stamps, query), 1, len(stamps) - 1)
    left = stamps[j - 1]
    pick = np.where(np.abs(query - left) <= np.abs(stamps[j] - query), j - 1, j)
    return pick, np.abs(stamps[pick] - query)


def assemble(dataset: SensorDataset, sensor_id: str, config: FeatureConfig) -> TrainingSet:
    """Pair each measurement of one sensor with the nearest groundtruth pose."""
    kind = parse_sensor_id(sensor_id)
    if kind[0] == LASER_ID:
        stamps, values = dataset.laser.stamps, dataset.laser.heights
    else:
        m = (dataset.uwb.anchor == kind[1]) & (dataset.uwb.tag == kind[2])
        stamps, values = dataset.uwb.stamps[m], dataset.uwb.ranges[m]
    if len(stamps) == 0:
        raise ValueError(f"no samples for sensor {sensor_id} in {dataset.name}")
    truth = dataset.truth
    if len(truth) == 1:
        idx, gap = np.zeros(len(stamps), dtype=int), np.abs(stamps - truth.stamps[0])
    else:
        idx, gap = _nearest(truth.stamps, stamps)
    ok = gap <= MAX_GAP
    dropped = int(np.count_nonzero(~ok))
    if dropped:
        log.warning("%s/%s: dropped %d samples without groundtruth within %g s", dataset.name, sensor_id, dropped, MAX_GAP)
    if not ok.any():
        raise ValueError(f"no samples for sensor {sensor_id} in {dataset.name} have groundtruth")
    idx = idx[ok]
    X = lift_poses(truth.C[idx], truth.t[idx], config)
    Y = lift_measurement(values[ok], config.lifting_tag)[None, :]
    return TrainingSet(X, Y, dropped, dataset.name)


def _grams(train: TrainingSet, chunk: int = CHUNK):
    n_x, m_y = train.X.shape[0], train.Y.shape[0]
    G = np.zeros((n_x, n_x))
    B = np.zeros((m_y, n_x))
    for lo in range(0, train.P, chunk):
        Xc = train.X[:, lo : lo + chunk]
        G += Xc @ Xc.T
        B += train.Y[:, lo : lo + chunk] @ Xc.T
    return G, B


def _solve_D(G, B, P, tau_d):
    A = G + P * tau_d * np.eye(G.shape[0])
    try:
        c = cho_factor(A, lower=True, check_finite=True)
    except LinAlgError:
        raise SingularGramError(np.linalg.cond(A)) from None
    d = np.diag(c[0])
    cond = (d.max() / d.min()) ** 2
    if not np.isfinite(cond) or cond > 1.0 / np.finfo(float).eps:
        raise SingularGramError(cond)
    return cho_solve(c, B.T).T


def fit(train: TrainingSet, tau_d: float, tau_r: float, sensor_id: str = "", config=None) -> LearnedModel:
    """One-shot fit; two streaming passes over the columns of ``X``."""
    if tau_d < 0 or tau_r < 0:
        raise ValueError("tau_d and tau_r must be nonnegative")
    P = train.P
    if P == 0:
        raise ValueError("empty training set")
    if P < train.X.shape[0]:
        warnings.warn(f"P={P} < n_x={train.X.shape[0]}; fit relies on regularization", stacklevel=2)
    G, B = _grams(train)
    D = _solve_D(G, B, P, tau_d)
    # Residual outer product in a second pass, avoiding cancellation in the Gram expansion.
    m_y = train.Y.shape[0]
    S = np.zeros((m_y, m_y))
    for lo in range(0, P, CHUNK):
        E = train.Y[:, lo : lo + CHUNK] - D @ train.X[:, lo : lo + CHUNK]
        S += E @ E.T
    R = S / P + tau_d * D @ D.T + tau_r * np.eye(m_y)
    R = 0.5 * (R + R.T)
    return LearnedModel(sensor_id, D, R, float(tau_d), float(tau_r), config or FeatureConfig(), P)


def objective(train: TrainingSet, D, R, tau_d, tau_r) -> float:
    P = train.P
    Ri = np.linalg.inv(R)
    E = train.Y - D @ train.X
    v1 = 0.5 * np.trace(E.T @ Ri @ E) + 0.5 * P * np.linalg.slogdet(R)[1]
    v2 = 0.5 * P * tau_d * np.trace(D.T @ Ri @ D) + 0.5 * P * tau_r * np.trace(Ri)
    return v1 + v2


def objective_gradient_D(train: TrainingSet, D, R, tau_d) -> np.ndarray:
    """``dV/dD = R^-1 (D (X X^T + P tau_D I) - Y X^T)``."""
    G, B = _grams(train)
    return np.linalg.solve(R, D @ (G + train.P * tau_d * np.eye(G.shape[0])) - B)


def heldout_nll(model: LearnedModel, test: TrainingSet) -> float:
    """Mean ``-log N(y; D x, R)`` over the columns of ``test``."""
    E = test.Y - model.D @ test.X
    L = np.linalg.cholesky(model.R)
    W = np.linalg.solve(L, E)
    m = E.shape[0]
    logdet = 2 * np.sum(np.log(np.diag(L)))
    return float(0.5 * np.mean(np.sum(W * W, axis=0)) + 0.5 * (logdet + m * np.log(2 * np.pi)))


@dataclass(frozen=True)
class CvRow:
    tau_d: float
    tau_r: float
    k_ell: float
    nll: float


def _select(rows):
    """Lowest NLL; ties (to 1e-12 relative) go to larger tau_D, then larger tau_R."""
    best = min(r.nll for r in rows)
    tied = [r for r in rows if r.nll <= best + 1e-12 * max(1.0, abs(best))]
    return max(tied, key=lambda r: (r.tau_d, r.tau_r))


def cross_validate_sets(folds, tau_d_grid=DEFAULT_TAU_GRID, tau_r_grid=DEFAULT_TAU_GRID, k_ell=1.0):
    """Leave-one-set-out CV over prebuilt training sets (one per sequence).

    Returns the score table as a list of :class:`CvRow`, one per grid point.
    """
    folds = list(folds)
    if len(folds) < 2:
        raise ValueError("cross-validation needs at least two sequences")
    if not len(tau_d_grid) or not len(tau_r_grid):
        raise ValueError("empty hyperparameter grid")
    grams = [_grams(f) for f in folds]
    sums = {}
    for i, test in enumerate(folds):
        G = sum(g[0] for j, g in enumerate(grams) if j != i)
        B = sum(g[1] for j, g in enumerate(grams) if j != i)
        train = TrainingSet.concat(f for j, f in enumerate(folds) if j != i)
        for td in tau_d_grid:
            D = _solve_D(G, B, train.P, td)
            E = train.Y - D @ train.X
            S = E @ E.T / train.P + td * D @ D.T
            for tr in tau_r_grid:
                R = S + tr * np.eye(S.shape[0])
                m = LearnedModel("", D, 0.5 * (R + R.T), td, tr)
                sums[(td, tr)] = sums.get((td, tr), 0.0) + heldout_nll(m, test) / len(folds)
    return [CvRow(float(td), float(tr), float(k_ell), v) for (td, tr), v in sums.items()]


def cross_validate(
    datasets,
    sensor_id: str,
    config: FeatureConfig,
    tau_d_grid=DEFAULT_TAU_GRID,
    tau_r_grid=DEFAULT_TAU_GRID,
    k_ell_grid=None,
):
    """Grid search over ``(tau_D, tau_R, k_ell)`` with leave-one-sequence-out folds.

    Returns ``(model, table)``; the model is refit on all sequences at the
    selected point.
    """
    k_ell_grid = list(k_ell_grid) if k_ell_grid is not None else [config.k_ell]
    if not k_ell_grid:
        raise ValueError("empty k_ell grid")
    table = []
    for k in k_ell_grid:
        cfg = config.replace(k_ell=float(k))
        sets = [assemble(ds, sensor_id, cfg) for ds in datasets]
        table += cross_validate_sets(sets, tau_d_grid, tau_r_grid, float(k))
    best = _select(table)
    cfg = config.replace(k_ell=best.k_ell)
    train = TrainingSet.concat(assemble(ds, sensor_id, cfg) for ds in datasets)
    return fit(train, best.tau_d, best.tau_r, sensor_id, cfg), table


def sensor_kind(sensor_id: str) -> str:
    return parse_sensor_id(sensor_id)[0]


def fit_all_sensors(datasets, configs: dict, hyper: dict, leak_guard=None) -> ModelRegistry:
    """One model per sensor in the catalog of ``datasets``.

    ``configs`` and ``hyper`` map sensor kind (``uwb``/``laser``) to a
    :class:`FeatureConfig` and to ``{"tau_d": .., "tau_r": ..}``; a ``hyper``
    entry may also be keyed by a full sensor id.  ``leak_guard`` is called
    with the list of training sequence names before any fit.
    """
    datasets = list(datasets)
    if leak_guard is not None:
        leak_guard([ds.name for ds in datasets])
    catalog = sorted({sid for ds in datasets for sid in ds.sensor_ids()})
    reg = ModelRegistry()
    for sid in catalog:
        kind = sensor_kind(sid)
        cfg = configs[kind]
        sets = []
        for ds in datasets:
            try:
                sets.append(assemble(ds, sid, cfg))
            except ValueError:
                continue
        if not sets:
            warnings.warn(f"sensor {sid} has no samples; skipped", stacklevel=2)
            continue
        h = hyper.get(sid, hyper[kind])
        reg[sid] = fit(TrainingSet.concat(sets), h["tau_d"], h["tau_r"], sid, cfg)
    return reg

