"""SO(3) and SE_2(3) operations for the right-perturbation error-state filter.

Extended poses are stored as explicit ``(C, v, t)`` triples; the 5x5 matrix
is only a derived view.  Error-state ordering throughout the package is::

    [dtheta (0:3), dv (3:6), dt (6:9), db_omega (9:12), db_a (12:15)]
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SMALL_ANGLE = 1e-6
PI_TOL = 1e-4

POSE_DIM = 9
ERROR_DIM = 15
THETA = slice(0, 3)
VEL = slice(3, 6)
POS = slice(6, 9)
BIAS_GYRO = slice(9, 12)
BIAS_ACCEL = slice(12, 15)


def wedge(phi):
    """Skew-symmetric matrix such that ``wedge(a) @ b == cross(a, b)``."""
    return np.array(
        [
            [0.0, -phi[2], phi[1]],
            [phi[2], 0.0, -phi[0]],
            [-phi[1], phi[0], 0.0],
        ]
    )


def vee(S):
    return np.array([S[2, 1], S[0, 2], S[1, 0]])


def so3_basis(axis: int) -> np.ndarray:
    """Generator ``S_x``, ``S_y`` or ``S_z`` of so(3)."""
    if axis not in (0, 1, 2):
        raise ValueError(f"axis must be 0, 1 or 2, got {axis!r}")
    e = np.zeros(3)
    e[axis] = 1.0
    return wedge(e)


_BASIS = np.stack([so3_basis(a) for a in range(3)])


def so3_exp(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    angle = np.sqrt(phi @ phi)
    K = wedge(phi)
    if angle < SMALL_ANGLE:
        a2 = angle * angle
        A = 1.0 - a2 / 6.0 + a2 * a2 / 120.0
        B = 0.5 - a2 / 24.0 + a2 * a2 / 720.0
    else:
        A = np.sin(angle) / angle
        B = (1.0 - np.cos(angle)) / (angle * angle)
    return np.eye(3) + A * K + B * (K @ K)


def _axis_from_symmetric_part(C, cos_angle):
    # (C + C^T)/2 = cos(a) I + (1 - cos(a)) u u^T; read u from the largest column.
    B = (0.5 * (C + C.T) - cos_angle * np.eye(3)) / (1.0 - cos_angle)
    k = int(np.argmax(np.diag(B)))
    axis = B[:, k] / np.sqrt(max(B[k, k], 1e-300))
    return axis / np.linalg.norm(axis)


def so3_log(C) -> np.ndarray:
    """Principal logarithm, ``|phi| <= pi``.

    Close to pi the axis is read from the symmetric part of C.  Exact ties at
    pi pick the axis whose first nonzero component is nonnegative.
    """
    C = np.asarray(C, dtype=float)
    w = vee(C - C.T)
    sin_angle = 0.5 * np.sqrt(w @ w)
    cos_angle = 0.5 * (np.trace(C) - 1.0)
    angle = np.arctan2(sin_angle, cos_angle)
    if angle < SMALL_ANGLE:
        # angle / sin(angle) ~ 1 + angle^2 / 6
        return (0.5 + angle * angle / 12.0) * w
    if np.pi - angle < PI_TOL:
        axis = _axis_from_symmetric_part(C, cos_angle)
        s = axis @ w
        if abs(s) > 1e-12:
            return angle * np.sign(s) * axis
        nz = np.flatnonzero(np.abs(axis) > 1e-12)
        return -angle * axis if axis[nz[0]] < 0.0 else angle * axis
    return (angle / (2.0 * sin_angle)) * w


def so3_left_jacobian(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    angle = np.sqrt(phi @ phi)
    K = wedge(phi)
    if angle < SMALL_ANGLE:
        a2 = angle * angle
        A = 0.5 - a2 / 24.0 + a2 * a2 / 720.0
        B = 1.0 / 6.0 - a2 / 120.0 + a2 * a2 / 5040.0
    else:
        A = (1.0 - np.cos(angle)) / (angle * angle)
        B = (angle - np.sin(angle)) / (angle**3)
    return np.eye(3) + A * K + B * (K @ K)


def so3_right_jacobian(phi) -> np.ndarray:
    return so3_left_jacobian(-np.asarray(phi, dtype=float))


def so3_left_jacobian_inv(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    angle = np.sqrt(phi @ phi)
    K = wedge(phi)
    if angle < SMALL_ANGLE:
        a2 = angle * angle
        B = 1.0 / 12.0 + a2 / 720.0 + a2 * a2 / 30240.0
    else:
        half = 0.5 * angle
        B = (1.0 - half / np.tan(half)) / (angle * angle)
    return np.eye(3) - 0.5 * K + B * (K @ K)


@dataclass(frozen=True)
class ExtendedPose:
    """Element of SE_2(3): rotation ``C`` (body to world), velocity, position."""

    C: np.ndarray = field(default_factory=lambda: np.eye(3))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def as_matrix(self) -> np.ndarray:
        T = np.eye(5)
        T[:3, :3] = self.C
        T[:3, 3] = self.v
        T[:3, 4] = self.t
        return T

    @classmethod
    def from_matrix(cls, T) -> "ExtendedPose":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3].copy(), T[:3, 3].copy(), T[:3, 4].copy())

    def inverse(self) -> "ExtendedPose":
        Ct = self.C.T
        return ExtendedPose(Ct, -Ct @ self.v, -Ct @ self.t)

    def compose(self, other: "ExtendedPose") -> "ExtendedPose":
        return ExtendedPose(
            self.C @ other.C, self.v + self.C @ other.v, self.t + self.C @ other.t
        )

    def __matmul__(self, other: "ExtendedPose") -> "ExtendedPose":
        return self.compose(other)


@dataclass(frozen=True)
class NavState:
    """Filter estimand: extended pose plus IMU bias ``[b_omega; b_a]``."""

    pose: ExtendedPose = field(default_factory=ExtendedPose)
    bias: np.ndarray = field(default_factory=lambda: np.zeros(6))

    @property
    def C(self) -> np.ndarray:
        return self.pose.C

    @property
    def v(self) -> np.ndarray:
        return self.pose.v

    @property
    def t(self) -> np.ndarray:
        return self.pose.t

    @property
    def bias_gyro(self) -> np.ndarray:
        return self.bias[:3]

    @property
    def bias_accel(self) -> np.ndarray:
        return self.bias[3:]

    @classmethod
    def from_parts(cls, C=None, v=None, t=None, bias=None) -> "NavState":
        return cls(
            ExtendedPose(
                np.eye(3) if C is None else np.asarray(C, dtype=float),
                np.zeros(3) if v is None else np.asarray(v, dtype=float),
                np.zeros(3) if t is None else np.asarray(t, dtype=float),
            ),
            np.zeros(6) if bias is None else np.asarray(bias, dtype=float),
        )


def se23_wedge(zeta) -> np.ndarray:
    zeta = np.asarray(zeta, dtype=float)
    X = np.zeros((5, 5))
    X[:3, :3] = wedge(zeta[0:3])
    X[:3, 3] = zeta[3:6]
    X[:3, 4] = zeta[6:9]
    return X


def se23_exp(zeta) -> ExtendedPose:
    zeta = np.asarray(zeta, dtype=float)
    phi = zeta[0:3]
    J = so3_left_jacobian(phi)
    return ExtendedPose(so3_exp(phi), J @ zeta[3:6], J @ zeta[6:9])


def se23_log(T: ExtendedPose) -> np.ndarray:
    phi = so3_log(T.C)
    Jinv = so3_left_jacobian_inv(phi)
    return np.concatenate([phi, Jinv @ T.v, Jinv @ T.t])


def right_retract(state: NavState, dx) -> NavState:
    """``T <- T Exp(dzeta)``, ``b <- b + db``."""
    dx = np.asarray(dx, dtype=float)
    return NavState(state.pose @ se23_exp(dx[:POSE_DIM]), state.bias + dx[POSE_DIM:])


def local_difference(nominal: NavState, other: NavState) -> np.ndarray:
    """Error state ``dx`` such that ``right_retract(nominal, dx) == other``."""
    dzeta = se23_log(nominal.pose.inverse() @ other.pose)
    return np.concatenate([dzeta, other.bias - nominal.bias])


def pose_selector() -> np.ndarray:
    """6x15 matrix picking ``[dtheta; dt]`` out of the error state."""
    E = np.zeros((6, ERROR_DIM))
    E[0:3, THETA] = np.eye(3)
    E[3:6, POS] = np.eye(3)
    return E


def rot_axis(axis: int, angle: float) -> np.ndarray:
    return so3_exp(angle * np.eye(3)[axis])
