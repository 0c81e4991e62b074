import numpy as np
import pytest

from kiloekf.lie import NavState, so3_exp


def random_rotation(rng, max_angle=np.pi):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return so3_exp(axis * rng.uniform(0.0, max_angle))


def random_state(rng, pos_scale=1.5):
    return NavState.from_parts(
        C=random_rotation(rng),
        v=rng.normal(size=3),
        t=rng.uniform(-pos_scale, pos_scale, size=3) + np.array([0.0, 0.0, 1.0]),
        bias=0.05 * rng.normal(size=6),
    )


def series_expm(X, terms=20):
    out = np.eye(X.shape[0])
    term = np.eye(X.shape[0])
    for k in range(1, terms):
        term = term @ X / k
        out = out + term
    return out


def numeric_jacobian(fun, x0, step=1e-6):
    """Central differences of ``fun`` (vector -> vector) at ``x0``."""
    x0 = np.asarray(x0, dtype=float)
    f0 = np.atleast_1d(fun(x0))
    J = np.zeros((f0.size, x0.size))
    for i in range(x0.size):
        e = np.zeros_like(x0)
        e[i] = step
        J[:, i] = (np.atleast_1d(fun(x0 + e)) - np.atleast_1d(fun(x0 - e))) / (2 * step)
    return J


def rel_err(A, B):
    return np.linalg.norm(A - B) / max(np.linalg.norm(B), 1e-12)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
