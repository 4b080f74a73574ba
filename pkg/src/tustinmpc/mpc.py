"""Receding-horizon control over a Tustin-Net model.

The plan is optimised by projected gradient descent on the box of admissible
torques, with Barzilai-Borwein trial steps and an Armijo backtracking search so
that every accepted iterate lowers the cost.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .dynamics import PendulumParams, simulate
from .estimation import (
    GaussianBelief,
    NoiseConfig,
    StateFilter,
    UkfConfig,
    joint_belief,
    measurement_update,
)
from .network import POS, TustinNet, step_vjp, tn_step_cached

RUN_LOG_HEADER = [
    "t", "theta1", "dtheta1", "theta2", "dtheta2", "u1", "u2",
    "theta1_hat", "dtheta1_hat", "theta2_hat", "dtheta2_hat", "mpc_cost", "solver_iters",
]


@dataclass
class MpcConfig:
    horizon: int = 5
    Q: np.ndarray = field(default_factory=lambda: np.diag([10.0, 0.1, 10.0, 0.1]))
    R: np.ndarray = field(default_factory=lambda: 0.01 * np.eye(2))
    u_max: float = 5.0
    max_iter: int = 100
    tol: float = 1e-6
    reference: np.ndarray = field(default_factory=lambda: np.zeros(4))  # physical units
    penalize_increments: bool = False

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=float)
        self.R = np.asarray(self.R, dtype=float)
        self.reference = np.asarray(self.reference, dtype=float)
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.u_max < 0:
            raise ValueError("u_max must be non-negative")
        if np.linalg.eigvalsh(self.Q).min() < -1e-12:
            raise ValueError("Q must be positive semi-definite")
        if np.linalg.eigvalsh(self.R).min() <= 0:
            raise ValueError("R must be positive definite")


@dataclass
class MpcSolution:
    torques: np.ndarray  # (N, 2)
    states: np.ndarray  # (N+1, 4) normalised predictions
    cost: float
    iterations: int
    converged: bool


def _residual(model: TustinNet, x, ref_n):
    """State error with angle differences wrapped to (-pi, pi]."""
    e = x - ref_n
    k = model.angle_scale
    e[..., POS] = (np.mod(e[..., POS] * k + np.pi, 2 * np.pi) - np.pi) / k
    return e


def horizon_cost(model: TustinNet, s0, torques, cfg: MpcConfig, u_prev=None, need_grad=True):
    """Quadratic tracking cost of a planned torque sequence and its gradient."""
    torques = np.asarray(torques, dtype=float)
    ref = model.to_normalized(cfg.reference)
    s = np.asarray(s0, dtype=float)
    states = [s]
    caches = []
    for u in torques:
        s, cache = tn_step_cached(model, s, u)
        states.append(s)
        caches.append(cache)
    states = np.array(states)
    err = _residual(model, states[1:], ref)
    QE = err @ cfg.Q  # Q symmetric
    cost = float(np.sum(QE * err))
    if cfg.penalize_increments:
        prev = np.zeros(2) if u_prev is None else np.asarray(u_prev, dtype=float)
        du = np.diff(np.vstack([prev, torques]), axis=0)
    else:
        du = torques
    RU = du @ cfg.R
    cost += float(np.sum(RU * du))
    if not need_grad:
        return cost, None, states
    g_u = 2.0 * RU
    if cfg.penalize_increments:
        g_u = g_u.copy()
        g_u[:-1] -= 2.0 * RU[1:]
    g_s = np.zeros(4)
    for k in reversed(range(len(torques))):
        g_s = g_s + 2.0 * QE[k]
        g_s, gu, _ = step_vjp(model, caches[k], g_s, want_params=False)
        g_u[k] += gu
    return cost, g_u, states


def shift_warm_start(torques):
    torques = np.asarray(torques, dtype=float)
    return np.vstack([torques[1:], torques[-1:]])


def solve(model: TustinNet, s0, cfg: MpcConfig, warm_start=None, u_prev=None) -> MpcSolution:
    lo, hi = -cfg.u_max, cfg.u_max
    U = np.zeros((cfg.horizon, 2)) if warm_start is None else np.clip(warm_start, lo, hi)
    cost, g, states = horizon_cost(model, s0, U, cfg, u_prev)
    step = 1.0
    U_old = g_old = None
    converged = False
    it = 0
    for it in range(1, cfg.max_iter + 1):
        pg = U - np.clip(U - g, lo, hi)
        if np.linalg.norm(pg) < cfg.tol:
            converged = True
            it -= 1
            break
        if U_old is not None:
            dU, dg = U - U_old, g - g_old
            curv = float(np.sum(dU * dg))
            if curv > 0:
                step = float(np.sum(dU * dU)) / curv
        accepted = False
        t = step
        for _ in range(40):
            U_new = np.clip(U - t * g, lo, hi)
            c_new, g_new, s_new = horizon_cost(model, s0, U_new, cfg, u_prev)
            if c_new <= cost - 1e-4 / t * np.sum((U_new - U) ** 2) or c_new <= cost and np.allclose(U_new, U):
                accepted = True
                break
            t *= 0.5
        if not accepted or np.array_equal(U_new, U):
            converged = np.linalg.norm(pg) < cfg.tol
            break
        U_old, g_old = U, g
        U, cost, g, states = U_new, c_new, g_new, s_new
        step = t
    return MpcSolution(U, states, cost, it, converged)


# -- closed loop -------------------------------------------------------------

@dataclass
class ClosedLoopConfig:
    duration: float = 10.0
    Ts: float = 0.01
    substeps: int = 4
    filter: str = "ukf"
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    ukf: UkfConfig = field(default_factory=UkfConfig)
    init_mean: np.ndarray = field(default_factory=lambda: np.zeros(4))  # physical units
    init_var: tuple = (1e-3, 1e-2, 1e-3, 1e-2)  # normalised units
    init_param_var: float = 0.0
    meas_noise_std: float = 0.0  # rad, applied to the plant measurement
    seed: int = 0


@dataclass
class RunLog:
    t: np.ndarray
    states: np.ndarray  # true plant states (T+1, 4)
    torques: np.ndarray  # (T, 2)
    estimates: np.ndarray  # belief means in physical units (T, 4)
    est_std: np.ndarray  # belief standard deviations in physical units (T, 4)
    cost: np.ndarray
    iters: np.ndarray
    residual: np.ndarray  # one-step prediction residual norm (rad), (T,)
    params: np.ndarray | None = None  # last-layer mean trajectory for jukf

    def window(self, seconds: float):
        n = int(round(seconds / (self.t[1] - self.t[0])))
        return slice(len(self.t) - n, len(self.t))


def closed_loop(plant: PendulumParams, model: TustinNet, mpc: MpcConfig, x0,
                cl: ClosedLoopConfig = ClosedLoopConfig(), adaptive: bool = False) -> RunLog:
    """Measure, estimate, plan, act; repeated every sampling period."""
    kind = "jukf" if adaptive else cl.filter
    rng = np.random.default_rng(cl.seed)
    T = int(round(cl.duration / cl.Ts))
    x = np.asarray(x0, dtype=float)
    state_belief = GaussianBelief(model.to_normalized(cl.init_mean), np.diag(cl.init_var))
    belief = joint_belief(model, state_belief, cl.init_param_var) if kind == "jukf" else state_belief
    filt = StateFilter(kind, model, belief, cl.noise, cl.ukf)
    R = cl.noise.meas_cov(model)

    states = np.empty((T + 1, 4))
    states[0] = x
    torques = np.empty((T, 2))
    est = np.empty((T, 4))
    est_std = np.empty((T, 4))
    cost = np.empty(T)
    iters = np.empty(T, dtype=int)
    residual = np.empty(T)
    params = [] if kind == "jukf" else None
    warm = None
    u_prev = np.zeros(2)
    for k in range(T):
        y = x[[0, 2]] + cl.meas_noise_std * rng.standard_normal(2)
        if k == 0:
            filt.belief, filt.innovation, _, _ = measurement_update(model, filt.belief, y, R)
        else:
            filt.step(u_prev, y)
        residual[k] = np.linalg.norm(filt.innovation) * model.angle_scale
        m = filt.current_model
        s_hat = filt.belief.mean[:4]
        sol = solve(m, s_hat, mpc, warm, u_prev)
        u = sol.torques[0]
        warm = shift_warm_start(sol.torques)
        x = simulate(x, u[None], plant, cl.Ts, cl.substeps)[1]
        states[k + 1] = x
        torques[k] = u
        est[k] = model.to_physical(s_hat)
        est_std[k] = np.sqrt(np.clip(np.diag(filt.belief.cov)[:4], 0, None)) * model.scales
        cost[k] = sol.cost
        iters[k] = sol.iterations
        if params is not None:
            params.append(filt.belief.mean[4:].copy())
        u_prev = u
    t = np.arange(T) * cl.Ts
    return RunLog(t, states, torques, est, est_std, cost, iters, residual,
                  None if params is None else np.array(params))


def write_run_log(path, log: RunLog) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(RUN_LOG_HEADER)
        for k in range(len(log.t)):
            w.writerow(
                [f"{log.t[k]:.6f}"]
                + [repr(float(v)) for v in (*log.states[k], *log.torques[k], *log.estimates[k], log.cost[k])]
                + [int(log.iters[k])]
            )
