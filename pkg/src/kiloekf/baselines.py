"""Analytic UWB / laser measurement models and geometric calibration."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .inertial import AnalyticMeasurement, update
from .lie import NavState, rot_axis, so3_basis
from .lifting import embed_pose_jacobian, vec

_BASIS = [so3_basis(a) for a in range(3)]
MISCAL_ANGLE = np.deg2rad(1.0)


class SingularGeometryError(ValueError):
    pass


@dataclass(frozen=True)
class UwbGeometry:
    """Anchor positions (world, m) and tag offsets (body, m)."""

    anchors: np.ndarray
    tags: np.ndarray
    anchor_ids: tuple = ()
    tag_ids: tuple = ()

    def __post_init__(self):
        anchors = np.atleast_2d(np.asarray(self.anchors, dtype=float))
        tags = np.atleast_2d(np.asarray(self.tags, dtype=float))
        object.__setattr__(self, "anchors", anchors)
        object.__setattr__(self, "tags", tags)
        if not self.anchor_ids:
            object.__setattr__(self, "anchor_ids", tuple(range(len(anchors))))
        if not self.tag_ids:
            object.__setattr__(self, "tag_ids", tuple(range(len(tags))))
        gaps = np.linalg.norm(anchors[:, None] - anchors[None], axis=-1)
        gaps[np.diag_indices(len(anchors))] = np.inf
        if len(anchors) > 1 and gaps.min() <= 0.01:
            raise ValueError("anchors must be at least 1 cm apart")

    @property
    def pairs(self):
        """All ``(anchor_index, tag_index)`` pairs."""
        return [(j, i) for j in range(len(self.anchors)) for i in range(len(self.tags))]

    def params(self) -> np.ndarray:
        return np.concatenate([self.anchors.ravel(), self.tags.ravel()])

    def with_params(self, p) -> "UwbGeometry":
        na = self.anchors.size
        return UwbGeometry(
            p[:na].reshape(self.anchors.shape),
            p[na:].reshape(self.tags.shape),
            self.anchor_ids,
            self.tag_ids,
        )


@dataclass(frozen=True)
class SensorNoiseSpec:
    sigma_uwb: float = 0.05
    sigma_laser: float = 0.01

    def __post_init__(self):
        if not (self.sigma_uwb > 0 and self.sigma_laser > 0):
            raise ValueError("sensor noise standard deviations must be positive")


def uwb_predict(state: NavState, geom: UwbGeometry, tag: int, anchor: int):
    """Range ``|r_anchor - t - C r_tag|`` and its 1x15 Jacobian."""
    C, t = state.C, state.t
    r_b = geom.tags[tag]
    d = geom.anchors[anchor] - t - C @ r_b
    rng = np.sqrt(d @ d)
    if rng < 1e-9:
        raise SingularGeometryError("tag coincides with anchor")
    dg_dd = d / rng
    # d(C r_b)/d vec(C) = r_b^T kron I3 for column-major vec.
    dg_dvecC = -np.kron(r_b, dg_dd)
    dvec = np.column_stack([vec(C @ S) for S in _BASIS])
    H_theta = dg_dvecC @ dvec
    H_r = -dg_dd @ C
    return rng, embed_pose_jacobian(np.r_[H_theta, H_r])


def laser_predict(state: NavState):
    H_r = state.C[2]  # e3^T C
    return state.t[2], embed_pose_jacobian(np.r_[np.zeros(3), H_r])


def miscalibrate(geom: UwbGeometry, angle: float = MISCAL_ANGLE, axis: int = 2) -> UwbGeometry:
    """Rotate every tag offset about a fixed body axis; anchors untouched."""
    R = rot_axis(axis, angle)
    return UwbGeometry(geom.anchors.copy(), geom.tags @ R.T, geom.anchor_ids, geom.tag_ids)


def uwb_update(belief, geom: UwbGeometry, tag: int, anchor: int, value: float, sigma: float, gate=None):
    predicted, H = uwb_predict(belief.state, geom, tag, anchor)
    meas = AnalyticMeasurement(np.array([value]), np.array([predicted]), H, np.array([[sigma * sigma]]))
    return update(belief, meas, gate)


def laser_update(belief, value: float, sigma: float, gate=None):
    predicted, H = laser_predict(belief.state)
    meas = AnalyticMeasurement(np.array([value]), np.array([predicted]), H, np.array([[sigma * sigma]]))
    return update(belief, meas, gate)


@dataclass(frozen=True)
class CalibrationData:
    """Groundtruth poses paired with UWB ranges, one row per range."""

    C: np.ndarray  # (P, 3, 3)
    t: np.ndarray  # (P, 3)
    anchor: np.ndarray  # (P,) anchor index
    tag: np.ndarray  # (P,) tag index
    ranges: np.ndarray  # (P,)


@dataclass
class LmResult:
    geometry: UwbGeometry
    costs: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    stalled: bool = False


def _range_residuals(p, data: CalibrationData, n_anchor: int, n_tag: int, jac=True):
    anchors = p[: 3 * n_anchor].reshape(n_anchor, 3)
    tags = p[3 * n_anchor :].reshape(n_tag, 3)
    Cr = np.einsum("nij,nj->ni", data.C, tags[data.tag])
    d = anchors[data.anchor] - data.t - Cr
    dist = np.linalg.norm(d, axis=1)
    r = data.ranges - dist
    if not jac:
        return r, None
    u = d / dist[:, None]
    J = np.zeros((len(r), p.size))
    rows = np.arange(len(r))
    for k in range(3):
        J[rows, 3 * data.anchor + k] = -u[:, k]
        # d r / d r_b = +u^T C
        J[rows, 3 * n_anchor + 3 * data.tag + k] = np.einsum("ni,ni->n", u, data.C[:, :, k])
    return r, J


def lm_calibrate(
    data: CalibrationData,
    init: UwbGeometry,
    max_iter: int = 200,
    lam0: float = 1e-3,
    rtol: float = 1e-10,
    max_escalations: int = 10,
) -> LmResult:
    """Levenberg-Marquardt refinement of all anchor positions and tag offsets.

    Minimizes the sum of squared range residuals.  Damping is multiplied by
    10 on a rejected step and divided by 10 on an accepted one.
    """
    n_anchor, n_tag = len(init.anchors), len(init.tags)
    p = init.params()
    r, J = _range_residuals(p, data, n_anchor, n_tag)
    cost = 0.5 * r @ r
    result = LmResult(init, [cost])
    lam = lam0
    for it in range(max_iter):
        g = J.T @ r
        A = J.T @ J
        diag = np.diag(A).copy()
        diag[diag == 0] = 1.0
        accepted = False
        for _ in range(max_escalations):
            step = np.linalg.solve(A + lam * np.diag(diag), -g)
            p_new = p + step
            r_new, _ = _range_residuals(p_new, data, n_anchor, n_tag, jac=False)
            cost_new = 0.5 * r_new @ r_new
            if cost_new < cost:
                accepted = True
                lam = max(lam / 10.0, 1e-15)
                break
            lam *= 10.0
        result.iterations = it + 1
        if not accepted:
            # At a zero-residual optimum no step can decrease the cost.
            result.converged = np.abs(g).max() <= 1e-12 * max(1.0, np.abs(J).max())
            result.stalled = not result.converged
            break
        decrease = (cost - cost_new) / cost
        p, cost = p_new, cost_new
        r, J = _range_residuals(p, data, n_anchor, n_tag)
        result.costs.append(cost)
        if decrease < rtol or cost == 0.0:
            result.converged = True
            break
    result.geometry = init.with_params(p)
    return result
