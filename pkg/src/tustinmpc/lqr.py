"""Discrete LQR about an equilibrium of the sampled plant."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import PendulumParams, accelerations, simulate


class NotAnEquilibriumError(ValueError):
    pass


class StabilizabilityError(RuntimeError):
    pass


@dataclass(frozen=True)
class LinearModel:
    A: np.ndarray
    B: np.ndarray
    x_op: np.ndarray
    u_op: np.ndarray


def _flow(p, x, u, Ts, substeps):
    return simulate(x, np.asarray(u, dtype=float)[None], p, Ts, substeps)[1]


def linearize(
    p: PendulumParams, x_op, u_op, Ts: float = 0.01, h: float = 1e-6, substeps: int = 4
) -> LinearModel:
    """Central-difference Jacobians of the one-sample flow map."""
    x_op = np.asarray(x_op, dtype=float)
    u_op = np.asarray(u_op, dtype=float)
    resid = max(abs(x_op[1]), abs(x_op[3]), *np.abs(accelerations(x_op, u_op, p)))
    if resid > 1e-8:
        raise NotAnEquilibriumError(f"operating point residual {resid:.3g}")
    A = np.empty((4, 4))
    B = np.empty((4, 2))
    for i in range(4):
        e = np.zeros(4)
        e[i] = h
        A[:, i] = (_flow(p, x_op + e, u_op, Ts, substeps) - _flow(p, x_op - e, u_op, Ts, substeps)) / (2 * h)
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        B[:, i] = (_flow(p, x_op, u_op + e, Ts, substeps) - _flow(p, x_op, u_op - e, Ts, substeps)) / (2 * h)
    return LinearModel(A, B, x_op, u_op)


def riccati_residual(A, B, Q, R, P) -> float:
    BtPA = B.T @ P @ A
    rhs = Q + A.T @ P @ A - BtPA.T @ np.linalg.solve(R + B.T @ P @ B, BtPA)
    return float(np.max(np.abs(P - rhs)))


def dare_gain(A, B, Q, R, tol: float = 1e-10, max_iter: int = 100_000):
    """Iterate the Riccati difference equation to its fixed point.

    Returns ``(K, P)`` with the control law ``u = -K (x - x_op)``.
    """
    A, B, Q, R = (np.atleast_2d(np.asarray(m, dtype=float)) for m in (A, B, Q, R))
    P = Q.copy()
    for _ in range(max_iter):
        BtPA = B.T @ P @ A
        P_next = Q + A.T @ P @ A - BtPA.T @ np.linalg.solve(R + B.T @ P @ B, BtPA)
        P_next = 0.5 * (P_next + P_next.T)
        if not np.all(np.isfinite(P_next)):
            break
        if np.max(np.abs(P_next - P)) < tol:
            P = P_next
            K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
            return K, P
        P = P_next
    raise StabilizabilityError("Riccati recursion did not converge; (A, B) not stabilizable?")


def lqr_control(K, x, x_op, u_op, u_max: float) -> np.ndarray:
    """Saturated state feedback ``clip(u_op - K (x - x_op), -u_max, u_max)``."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u_op) - (x - np.asarray(x_op)) @ np.asarray(K).T
    return np.clip(u, -u_max, u_max)


def upright_lqr(p: PendulumParams, Q=None, R=None, Ts: float = 0.01):
    """Convenience: gain about the upright equilibrium with the default weights."""
    Q = np.diag([10.0, 1.0, 10.0, 1.0]) if Q is None else np.asarray(Q)
    R = np.diag([0.1, 0.1]) if R is None else np.asarray(R)
    lin = linearize(p, np.zeros(4), np.zeros(2), Ts)
    K, _ = dare_gain(lin.A, lin.B, Q, R)
    return K
