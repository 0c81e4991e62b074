"""State and measurement liftings with closed-form Jacobians.

The lifted state for a pose-only measurement is ``[s'; h(s'); z(s')]`` where

* ``s' = [vec(C); t]`` (column-major ``vec``),
* ``h(s') = [1; vec(C); C^T t; t^T t]`` are handcrafted range features,
* ``z(s')`` stacks ``sqrt(2/R) [cos(w_i^T s'); sin(w_i^T s')]`` for ``R``
  random frequencies ``w_i ~ N(0, W / k_ell)``.

Jacobians are taken with respect to the pose part ``[dtheta; dt]`` of the
right-perturbation error state and composed into the 15-dim error state with
:func:`kiloekf.lie.pose_selector`.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from functools import cached_property

import numpy as np

from .lie import ERROR_DIM, POS, THETA, NavState, so3_basis

REDUCED_DIM = 12
HANDCRAFTED_DIM = 14
LIFTING_TAGS = ("identity", "squared")

_BASIS = [so3_basis(a) for a in range(3)]


@dataclass(frozen=True)
class FeatureConfig:
    r_count: int = 100
    seed: int = 0
    k_ell: float = 1.0
    w_diag: tuple = (1.0,) * REDUCED_DIM
    use_handcrafted: bool = True
    lifting_tag: str = "squared"

    def __post_init__(self):
        object.__setattr__(self, "w_diag", tuple(float(w) for w in self.w_diag))
        if self.r_count < 0:
            raise ValueError("r_count must be nonnegative")
        if not self.k_ell > 0:
            raise ValueError("k_ell must be positive")
        if len(self.w_diag) != REDUCED_DIM or min(self.w_diag) <= 0:
            raise ValueError(f"w_diag needs {REDUCED_DIM} positive entries")
        if self.lifting_tag not in LIFTING_TAGS:
            raise ValueError(f"unknown lifting tag {self.lifting_tag!r}")

    @property
    def n_x(self) -> int:
        return REDUCED_DIM + HANDCRAFTED_DIM * self.use_handcrafted + 2 * self.r_count

    @cached_property
    def frequencies(self) -> np.ndarray:
        """``(r_count, 12)`` bank of frequency rows, fixed by ``seed``."""
        return sample_frequencies(self)

    @cached_property
    def _fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def fingerprint(self) -> str:
        return self._fingerprint

    def to_dict(self) -> dict:
        d = asdict(self)
        d["w_diag"] = list(self.w_diag)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureConfig":
        d = dict(d)
        if "w_diag" in d:
            d["w_diag"] = tuple(d["w_diag"])
        return cls(**d)

    def replace(self, **changes) -> "FeatureConfig":
        d = self.to_dict()
        d.update(changes)
        return FeatureConfig.from_dict(d)


def vec(C) -> np.ndarray:
    return np.asarray(C).ravel(order="F")


def vectorize_state(state: NavState) -> np.ndarray:
    """``[vec(C); t; v; b_a; b_omega]``.

    Accelerometer bias precedes gyro bias here, the reverse of the bias
    ordering inside :class:`NavState` and the error state.
    """
    return np.concatenate([vec(state.C), state.t, state.v, state.bias[3:], state.bias[:3]])


def unvectorize_state(s) -> NavState:
    s = np.asarray(s, dtype=float)
    C = s[:9].reshape(3, 3, order="F")
    return NavState.from_parts(C=C, t=s[9:12], v=s[12:15], bias=np.r_[s[18:21], s[15:18]])


def reduce_state(state: NavState) -> np.ndarray:
    return np.concatenate([vec(state.C), state.t])


def handcrafted(s) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    C = s[:9].reshape(3, 3, order="F")
    t = s[9:12]
    return np.concatenate([[1.0], s[:9], C.T @ t, [t @ t]])


def sample_frequencies(config: FeatureConfig) -> np.ndarray:
    rng = np.random.default_rng(config.seed)
    scale = np.sqrt(np.asarray(config.w_diag) / config.k_ell)
    return rng.standard_normal((config.r_count, REDUCED_DIM)) * scale


def serff(s, config: FeatureConfig) -> np.ndarray:
    if config.r_count == 0:
        return np.zeros(0)
    phase = config.frequencies @ np.asarray(s, dtype=float)
    z = np.empty(2 * config.r_count)
    amp = np.sqrt(2.0 / config.r_count)
    z[0::2] = amp * np.cos(phase)
    z[1::2] = amp * np.sin(phase)
    return z


def lift_reduced(s, config: FeatureConfig) -> np.ndarray:
    parts = [np.asarray(s, dtype=float)]
    if config.use_handcrafted:
        parts.append(handcrafted(s))
    if config.r_count:
        parts.append(serff(s, config))
    return np.concatenate(parts)


def lift_state(state: NavState, config: FeatureConfig) -> np.ndarray:
    return lift_reduced(reduce_state(state), config)


def lift_poses(Cs, ts, config: FeatureConfig) -> np.ndarray:
    """Batch lifting of ``N`` poses into an ``(n_x, N)`` matrix."""
    Cs = np.asarray(Cs, dtype=float)
    ts = np.asarray(ts, dtype=float)
    n = len(ts)
    S = np.concatenate([Cs.transpose(0, 2, 1).reshape(n, 9), ts], axis=1).T
    blocks = [S]
    if config.use_handcrafted:
        Ct_t = np.einsum("nij,ni->jn", Cs, ts)
        blocks += [np.ones((1, n)), S[:9], Ct_t, np.sum(ts * ts, axis=1)[None, :]]
    if config.r_count:
        phase = config.frequencies @ S
        amp = np.sqrt(2.0 / config.r_count)
        Z = np.empty((2 * config.r_count, n))
        Z[0::2] = amp * np.cos(phase)
        Z[1::2] = amp * np.sin(phase)
        blocks.append(Z)
    return np.concatenate(blocks, axis=0)


def lift_measurement(gamma, tag: str = "identity") -> np.ndarray:
    gamma = np.atleast_1d(np.asarray(gamma, dtype=float))
    if tag == "identity":
        return gamma.copy()
    if tag == "squared":
        return gamma * gamma
    raise ValueError(f"unknown lifting tag {tag!r}")


def reduced_state_jacobian(state: NavState) -> np.ndarray:
    """``d s' / d[dtheta; dt]`` (12x6) under the right perturbation."""
    C = state.C
    J = np.zeros((REDUCED_DIM, 6))
    for a in range(3):
        J[:9, a] = vec(C @ _BASIS[a])
    J[9:12, 3:6] = C
    return J


def handcrafted_jacobian(s) -> np.ndarray:
    """``d h / d s'`` (14x12)."""
    s = np.asarray(s, dtype=float)
    C = s[:9].reshape(3, 3, order="F")
    t = s[9:12]
    J = np.zeros((HANDCRAFTED_DIM, REDUCED_DIM))
    J[1:10, :9] = np.eye(9)
    # (C^T t)_j = sum_i C[i, j] t_i and vec index of C[i, j] is 3 j + i.
    for j in range(3):
        J[10 + j, 3 * j : 3 * j + 3] = t
    J[10:13, 9:12] = C.T
    J[13, 9:12] = 2.0 * t
    return J


def lift_with_jacobian(state: NavState, config: FeatureConfig):
    """Lifted state and its Jacobian ``d x / d[dtheta; dt]`` (n_x x 6)."""
    s = reduce_state(state)
    ds = reduced_state_jacobian(state)
    x_parts = [s]
    J_parts = [ds]
    if config.use_handcrafted:
        x_parts.append(handcrafted(s))
        J_parts.append(handcrafted_jacobian(s) @ ds)
    if config.r_count:
        Omega = config.frequencies
        phase = Omega @ s
        amp = np.sqrt(2.0 / config.r_count)
        c, sn = np.cos(phase), np.sin(phase)
        z = np.empty(2 * config.r_count)
        z[0::2] = amp * c
        z[1::2] = amp * sn
        Od = Omega @ ds
        Jz = np.empty((2 * config.r_count, 6))
        Jz[0::2] = -(amp * sn)[:, None] * Od
        Jz[1::2] = (amp * c)[:, None] * Od
        x_parts.append(z)
        J_parts.append(Jz)
    return np.concatenate(x_parts), np.concatenate(J_parts, axis=0)


def feature_jacobian(state: NavState, config: FeatureConfig) -> np.ndarray:
    return lift_with_jacobian(state, config)[1]


def embed_pose_jacobian(J_pose) -> np.ndarray:
    """Place ``m x 6`` pose columns into an ``m x 15`` error-state Jacobian."""
    J_pose = np.atleast_2d(J_pose)
    H = np.zeros((J_pose.shape[0], ERROR_DIM))
    H[:, THETA] = J_pose[:, :3]
    H[:, POS] = J_pose[:, 3:]
    return H


def kilo_measurement_jacobian(state: NavState, config: FeatureConfig, D) -> np.ndarray:
    D = np.atleast_2d(D)
    if D.shape[1] != config.n_x:
        raise ValueError(f"D has {D.shape[1]} columns, lifting has n_x={config.n_x}")
    return embed_pose_jacobian(D @ feature_jacobian(state, config))
