"""Torque-actuated double inverted pendulum.

State ordering everywhere is ``[theta1, dtheta1, theta2, dtheta2]``. ``theta1`` is
measured from the upright vertical, ``theta2`` is the angle of beam 2 relative to
beam 1, so ``theta = 0`` is the upright (unstable) equilibrium and
``(pi, 0)`` is the hanging stable one. All functions accept batched states with
shape ``(..., 4)`` and torques with shape ``(..., 2)``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np


class InvalidStateError(ValueError):
    pass


class IntegrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class PendulumParams:
    m1: float = 0.2
    m2: float = 0.2
    l1: float = 0.3
    l2: float = 0.3
    lc1: float = 0.15
    lc2: float = 0.15
    I1: float = 0.2 * 0.3**2 / 12
    I2: float = 0.2 * 0.3**2 / 12
    c1: float = 0.1
    c2: float = 0.1
    g: float = 9.81

    def __post_init__(self):
        for name in ("m1", "m2", "l1", "l2", "lc1", "lc2", "I1", "I2", "g"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")
        if self.c1 < 0 or self.c2 < 0:
            raise ValueError("frictions must be non-negative")
        if self.lc1 > self.l1 or self.lc2 > self.l2:
            raise ValueError("centre of mass must lie on the beam")

    def with_changes(self, **changes) -> "PendulumParams":
        return replace(self, **changes)

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PendulumParams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown pendulum parameters: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in d.items()})


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise InvalidStateError("non-finite state or torque")


def mass_matrix(theta2, p: PendulumParams) -> np.ndarray:
    """Configuration-dependent inertia matrix, shape ``(..., 2, 2)``."""
    c = np.cos(theta2)
    a = p.m2 * p.l1 * p.lc2
    m22 = p.I2 + p.m2 * p.lc2**2
    m11 = p.I1 + p.m1 * p.lc1**2 + p.m2 * p.l1**2 + m22 + 2 * a * c
    m12 = m22 + a * c
    M = np.empty(np.shape(theta2) + (2, 2))
    M[..., 0, 0] = m11
    M[..., 0, 1] = m12
    M[..., 1, 0] = m12
    M[..., 1, 1] = m22
    return M


def _rhs(state, u, p: PendulumParams):
    """Generalised forces ``B`` so that ``M(theta) @ ddtheta = B``."""
    th1, dth1, th2, dth2 = state[..., 0], state[..., 1], state[..., 2], state[..., 3]
    s2 = np.sin(th2)
    s12 = np.sin(th1 + th2)
    a = p.m2 * p.l1 * p.lc2
    # gravity pulls away from the upright configuration
    g1 = p.g * ((p.m1 * p.lc1 + p.m2 * p.l1) * np.sin(th1) + p.m2 * p.lc2 * s12)
    g2 = p.g * p.m2 * p.lc2 * s12
    b1 = u[..., 0] - p.c1 * dth1 + a * s2 * (2 * dth1 * dth2 + dth2**2) + g1
    b2 = u[..., 1] - p.c2 * dth2 - a * s2 * dth1**2 + g2
    return np.stack([b1, b2], axis=-1)


def _accel_unchecked(state, u, p):
    M = mass_matrix(state[..., 2], p)
    b = _rhs(state, u, p)
    det = M[..., 0, 0] * M[..., 1, 1] - M[..., 0, 1] ** 2
    dd1 = (M[..., 1, 1] * b[..., 0] - M[..., 0, 1] * b[..., 1]) / det
    dd2 = (M[..., 0, 0] * b[..., 1] - M[..., 0, 1] * b[..., 0]) / det
    return np.stack([dd1, dd2], axis=-1)


def accelerations(state, u, p: PendulumParams) -> np.ndarray:
    """Joint accelerations ``M(theta)^-1 B(theta, dtheta, u)`` in rad/s^2."""
    state = np.asarray(state, dtype=float)
    u = np.asarray(u, dtype=float)
    _check_finite(state, u)
    return _accel_unchecked(state, u, p)


def state_derivative(state, u, p: PendulumParams) -> np.ndarray:
    acc = _accel_unchecked(state, u, p)
    return np.stack([state[..., 1], acc[..., 0], state[..., 3], acc[..., 1]], axis=-1)


def total_energy(state, p: PendulumParams) -> np.ndarray:
    """Kinetic plus potential energy, with the potential zero at upright."""
    state = np.asarray(state, dtype=float)
    _check_finite(state)
    th1, dth1, th2, dth2 = state[..., 0], state[..., 1], state[..., 2], state[..., 3]
    qd = np.stack([dth1, dth2], axis=-1)
    M = mass_matrix(th2, p)
    kinetic = 0.5 * np.einsum("...i,...ij,...j->...", qd, M, qd)
    potential = p.g * (
        p.m1 * p.lc1 * (np.cos(th1) - 1)
        + p.m2 * (p.l1 * (np.cos(th1) - 1) + p.lc2 * (np.cos(th1 + th2) - 1))
    )
    return kinetic + potential


# Dormand-Prince 5(4) tableau
_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_DP_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_B4 = np.array(
    [5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40]
)


def dopri_step(f, x, dt: float):
    """One fixed Dormand-Prince step of ``x' = f(x)``.

    Returns ``(x5, x4)``: the 5th-order solution and the embedded 4th-order one.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    k = []
    for i in range(7):
        xi = x
        for j, a in enumerate(_DP_A[i]):
            if a != 0.0:
                xi = xi + dt * a * k[j]
        ki = f(xi)
        if not np.all(np.isfinite(ki)):
            raise IntegrationError(f"non-finite Runge-Kutta stage {i}")
        k.append(ki)
    x5 = x + dt * sum(b * ki for b, ki in zip(_DP_B5, k) if b != 0.0)
    x4 = x + dt * sum(b * ki for b, ki in zip(_DP_B4, k) if b != 0.0)
    return x5, x4


def rk45_step(state, u, p: PendulumParams, dt: float, return_embedded: bool = False):
    """Advance the plant by ``dt`` with the torque held constant."""
    state = np.asarray(state, dtype=float)
    u = np.asarray(u, dtype=float)
    _check_finite(state, u)
    x5, x4 = dopri_step(lambda x: state_derivative(x, u, p), state, dt)
    return (x5, x4) if return_embedded else x5


def _scalar_derivative(p: PendulumParams, u1: float, u2: float):
    """``state_derivative`` on plain floats; numpy call overhead dominates for one state."""
    a = p.m2 * p.l1 * p.lc2
    m22 = p.I2 + p.m2 * p.lc2**2
    m11_0 = p.I1 + p.m1 * p.lc1**2 + p.m2 * p.l1**2 + m22
    g1c = p.g * (p.m1 * p.lc1 + p.m2 * p.l1)
    g2c = p.g * p.m2 * p.lc2
    c1, c2 = p.c1, p.c2
    sin, cos = math.sin, math.cos

    def f(x):
        th1, dth1, th2, dth2 = x
        s2, c = sin(th2), cos(th2)
        s12 = sin(th1 + th2)
        m11 = m11_0 + 2 * a * c
        m12 = m22 + a * c
        b1 = u1 - c1 * dth1 + a * s2 * (2 * dth1 * dth2 + dth2 * dth2) + g1c * sin(th1) + g2c * s12
        b2 = u2 - c2 * dth2 - a * s2 * dth1 * dth1 + g2c * s12
        det = m11 * m22 - m12 * m12
        return (dth1, (m22 * b1 - m12 * b2) / det, dth2, (m11 * b2 - m12 * b1) / det)

    return f


def _scalar_dopri(f, x, h):
    """Fifth-order Dormand-Prince update on a 4-tuple (no embedded estimate)."""
    x0, x1, x2, x3 = x
    k1 = f(x)
    a = h / 5
    k2 = f((x0 + a * k1[0], x1 + a * k1[1], x2 + a * k1[2], x3 + a * k1[3]))
    a, b = h * 3 / 40, h * 9 / 40
    k3 = f(tuple(xv + a * p + b * q for xv, p, q in zip(x, k1, k2)))
    a, b, c = h * 44 / 45, -h * 56 / 15, h * 32 / 9
    k4 = f(tuple(xv + a * p + b * q + c * r for xv, p, q, r in zip(x, k1, k2, k3)))
    a, b, c, d = h * 19372 / 6561, -h * 25360 / 2187, h * 64448 / 6561, -h * 212 / 729
    k5 = f(tuple(xv + a * p + b * q + c * r + d * s for xv, p, q, r, s in zip(x, k1, k2, k3, k4)))
    a, b, c, d, e = h * 9017 / 3168, -h * 355 / 33, h * 46732 / 5247, h * 49 / 176, -h * 5103 / 18656
    k6 = f(tuple(xv + a * p + b * q + c * r + d * s + e * w
                 for xv, p, q, r, s, w in zip(x, k1, k2, k3, k4, k5)))
    a, c, d, e, g = h * 35 / 384, h * 500 / 1113, h * 125 / 192, -h * 2187 / 6784, h * 11 / 84
    return tuple(xv + a * p + c * r + d * s + e * w + g * z for xv, p, r, s, w, z in zip(x, k1, k3, k4, k5, k6))


def simulate(initial, torques, p: PendulumParams, Ts: float = 0.01, substeps: int = 4):
    """Zero-order-hold simulation sampled every ``Ts``.

    ``torques`` has shape ``(T, ..., 2)``; the result has shape ``(T + 1, ..., 4)``
    and starts with ``initial``.
    """
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    x = np.asarray(initial, dtype=float)
    torques = np.asarray(torques, dtype=float)
    _check_finite(x, torques)
    out = np.empty((len(torques) + 1,) + x.shape)
    out[0] = x
    h = Ts / substeps
    if x.ndim == 1 and torques.ndim == 2:
        xs = tuple(float(v) for v in x)
        for k, u in enumerate(torques):
            f = _scalar_derivative(p, float(u[0]), float(u[1]))
            for _ in range(substeps):
                xs = _scalar_dopri(f, xs, h)
            if not all(map(math.isfinite, xs)):
                raise IntegrationError(f"non-finite state at sample {k + 1}")
            out[k + 1] = xs
        return out
    for k, u in enumerate(torques):
        for _ in range(substeps):
            x, _ = dopri_step(lambda s: state_derivative(s, u, p), x, h)
        out[k + 1] = x
    return out


def is_equilibrium(state, u, p: PendulumParams, tol: float = 1e-8) -> bool:
    state = np.asarray(state, dtype=float)
    return bool(
        abs(state[1]) < tol
        and abs(state[3]) < tol
        and np.max(np.abs(accelerations(state, u, p))) < tol
    )


def holding_torque(theta, p: PendulumParams) -> np.ndarray:
    """Static torque that holds the pendulum at rest at angles ``theta``."""
    th1, th2 = theta
    s12 = np.sin(th1 + th2)
    g1 = p.g * ((p.m1 * p.lc1 + p.m2 * p.l1) * np.sin(th1) + p.m2 * p.lc2 * s12)
    g2 = p.g * p.m2 * p.lc2 * s12
    return -np.array([g1, g2])
