"""IMU strapdown propagation and the generic error-state EKF update.

Nominal propagation is the discrete strapdown update with zero-order-hold
IMU samples::

    C+ = C Exp((w - b_w) dt)
    v+ = v + (C (a - b_a) + g) dt
    t+ = t + v dt + 0.5 (C (a - b_a) + g) dt^2

``error_jacobians`` returns the exact linearization of this map under the
right perturbation of :func:`kiloekf.lie.right_retract`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .lie import (
    BIAS_ACCEL,
    BIAS_GYRO,
    ERROR_DIM,
    POS,
    THETA,
    VEL,
    ExtendedPose,
    NavState,
    right_retract,
    so3_exp,
    so3_right_jacobian,
    wedge,
)

GRAVITY = np.array([0.0, 0.0, -9.81])
JITTER = 1e-12


@dataclass(frozen=True)
class ImuSample:
    stamp: float
    gyro: np.ndarray
    accel: np.ndarray


@dataclass(frozen=True)
class ProcessNoiseSpec:
    """Continuous-time IMU noise densities.

    ``sigma_g`` [rad/s/sqrt(Hz)], ``sigma_a`` [m/s^2/sqrt(Hz)] are white-noise
    densities; ``sigma_bg``, ``sigma_ba`` drive the bias random walks.
    """

    sigma_g: float = 1e-3
    sigma_a: float = 1e-2
    sigma_bg: float = 1e-5
    sigma_ba: float = 1e-4

    def __post_init__(self):
        for name in ("sigma_g", "sigma_a", "sigma_bg", "sigma_ba"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    def Q(self, dt: float) -> np.ndarray:
        """Discrete covariance of ``[n_g, n_a, w_bg, w_ba]`` for one step."""
        d = np.repeat(
            [
                self.sigma_g**2 / dt,
                self.sigma_a**2 / dt,
                self.sigma_bg**2 * dt,
                self.sigma_ba**2 * dt,
            ],
            3,
        )
        return np.diag(d)


@dataclass(frozen=True)
class FilterBelief:
    state: NavState
    P: np.ndarray
    # Set when an update was refused (e.g. innovation covariance not PD).
    diagnostic: Optional[str] = field(default=None, compare=False)


@dataclass(frozen=True)
class AnalyticMeasurement:
    value: np.ndarray
    predicted: np.ndarray
    H: np.ndarray
    R: np.ndarray


def _check_dt(dt):
    if not dt > 0:
        raise ValueError(f"time step must be positive, got {dt}")


def propagate_nominal(state: NavState, u: ImuSample, g=GRAVITY, dt: float = 0.01) -> NavState:
    _check_dt(dt)
    C, v, t = state.pose.C, state.pose.v, state.pose.t
    w = u.gyro - state.bias[:3]
    acc = C @ (u.accel - state.bias[3:]) + g
    pose = ExtendedPose(
        C @ so3_exp(w * dt),
        v + acc * dt,
        t + v * dt + 0.5 * dt * dt * acc,
    )
    return NavState(pose, state.bias)


def error_jacobians(state: NavState, u: ImuSample, dt: float):
    """Return ``(F, G)`` with ``dx+ = F dx + G eps``, eps = [n_g, n_a, w_bg, w_ba]."""
    if dt < 0:
        raise ValueError(f"time step must be nonnegative, got {dt}")
    w = u.gyro - state.bias[:3]
    A = wedge(u.accel - state.bias[3:])
    Gt = so3_exp(w * dt).T
    Jr = so3_right_jacobian(w * dt)
    half_dt2 = 0.5 * dt * dt

    F = np.eye(ERROR_DIM)
    F[THETA, THETA] = Gt
    F[THETA, BIAS_GYRO] = -Jr * dt
    F[VEL, THETA] = -Gt @ A * dt
    F[VEL, VEL] = Gt
    F[VEL, BIAS_ACCEL] = -Gt * dt
    F[POS, THETA] = -Gt @ A * half_dt2
    F[POS, VEL] = Gt * dt
    F[POS, POS] = Gt
    F[POS, BIAS_ACCEL] = -Gt * half_dt2

    G = np.zeros((ERROR_DIM, 12))
    G[THETA, 0:3] = -Jr * dt
    G[VEL, 3:6] = -Gt * dt
    G[POS, 3:6] = -Gt * half_dt2
    G[BIAS_GYRO, 6:9] = np.eye(3)
    G[BIAS_ACCEL, 9:12] = np.eye(3)
    return F, G


def symmetrize(P):
    return 0.5 * (P + P.T)


def predict(
    belief: FilterBelief, u: ImuSample, noise: ProcessNoiseSpec, g=GRAVITY, dt: float = 0.01
) -> FilterBelief:
    state = propagate_nominal(belief.state, u, g, dt)
    F, G = error_jacobians(belief.state, u, dt)
    P = F @ belief.P @ F.T + G @ noise.Q(dt) @ G.T
    return FilterBelief(state, symmetrize(P))


def _cholesky(S):
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        pass
    try:
        return np.linalg.cholesky(S + JITTER * np.eye(S.shape[0]))
    except np.linalg.LinAlgError:
        return None


def kalman_correction(P, H, R, r):
    """Joseph-form correction.

    Returns ``(dx, P_post, nis)`` or ``None`` when ``H P H^T + R`` is not
    positive definite even after jitter.
    """
    PHt = P @ H.T
    S = H @ PHt + R
    L = _cholesky(symmetrize(S))
    if L is None:
        return None
    # K = P H^T S^-1 through the triangular factor.
    Linv_HP = np.linalg.solve(L, PHt.T)
    Linv_r = np.linalg.solve(L, r)
    K = np.linalg.solve(L.T, Linv_HP).T
    dx = K @ r
    IKH = np.eye(P.shape[0]) - K @ H
    P_post = IKH @ P @ IKH.T + K @ R @ K.T
    return dx, symmetrize(P_post), float(Linv_r @ Linv_r)


def update(belief: FilterBelief, meas: AnalyticMeasurement, gate: Optional[float] = None) -> FilterBelief:
    """EKF correction; with ``gate`` set, innovations whose NIS exceeds it are skipped."""
    H = np.atleast_2d(meas.H)
    R = np.atleast_2d(meas.R)
    r = np.atleast_1d(np.asarray(meas.value, dtype=float) - np.asarray(meas.predicted, dtype=float))
    if H.shape != (r.size, ERROR_DIM) or R.shape != (r.size, r.size):
        raise ValueError(
            f"inconsistent measurement dimensions: r {r.shape}, H {H.shape}, R {R.shape}"
        )
    out = kalman_correction(belief.P, H, R, r)
    if out is None:
        return FilterBelief(belief.state, belief.P, diagnostic="innovation covariance not PD")
    dx, P, nis = out
    if gate is not None and nis > gate:
        return FilterBelief(belief.state, belief.P, diagnostic="gated")
    return FilterBelief(right_retract(belief.state, dx), P)


def initial_belief(state: NavState, sigmas=(0.1, 0.1, 0.1, 0.01, 0.01)) -> FilterBelief:
    """Diagonal prior with per-block standard deviations (theta, v, t, b_w, b_a)."""
    P = np.diag(np.repeat(np.asarray(sigmas, dtype=float) ** 2, 3))
    return FilterBelief(state, P)
