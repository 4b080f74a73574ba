"""EKF, UKF and joint (state + last layer) UKF over the Tustin-Net state.

Filters work in the network's normalised coordinates. Measurements enter in
radians and are divided by ``model.angle_scale`` at the boundary; the
measurement map selects the two positions.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError, cholesky

from .network import TustinNet, encode_features, mlp_forward, step_jacobians, tn_step

H_SELECT = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]])


class IllConditionedBeliefError(np.linalg.LinAlgError):
    pass


@dataclass
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.cov = np.asarray(self.cov, dtype=float)
        n = self.mean.shape[0]
        if self.cov.shape != (n, n):
            raise ValueError("covariance shape does not match the mean")

    @property
    def n(self) -> int:
        return self.mean.shape[0]

    def is_valid(self, tol: float = 1e-10) -> bool:
        sym = np.max(np.abs(self.cov - self.cov.T)) < tol
        return bool(sym and np.linalg.eigvalsh(0.5 * (self.cov + self.cov.T)).min() >= -tol)


@dataclass(frozen=True)
class NoiseConfig:
    """Variances; process terms in normalised units, measurement in rad^2."""

    pos: float = 1e-12
    vel: float = 1e-8
    param: float = 0.0
    meas: float = 1e-6

    def __post_init__(self):
        if min(self.pos, self.vel, self.param, self.meas) < 0:
            raise ValueError("variances must be non-negative")

    def state_cov(self) -> np.ndarray:
        return np.diag([self.pos, self.vel, self.pos, self.vel])

    def meas_cov(self, model: TustinNet) -> np.ndarray:
        return np.eye(2) * self.meas / model.angle_scale**2


@dataclass(frozen=True)
class UkfConfig:
    alpha: float = 0.5
    beta: float = 2.0
    kappa: float | None = None  # None means 3 - n

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")

    def lam(self, n: int) -> float:
        kappa = 3.0 - n if self.kappa is None else self.kappa
        return self.alpha**2 * (n + kappa) - n


def ut_weights(n: int, cfg: UkfConfig):
    lam = cfg.lam(n)
    if not n + lam > 0:
        raise ValueError("n + lambda must be positive")
    wm = np.full(2 * n + 1, 0.5 / (n + lam))
    wc = wm.copy()
    wm[0] = lam / (n + lam)
    wc[0] = wm[0] + (1.0 - cfg.alpha**2 + cfg.beta)
    return wm, wc


def psd_sqrt(P, jitter0: float = 1e-10, jitter_max: float = 1e-6) -> np.ndarray:
    """Lower factor ``S`` with ``S S^T ~= P``.

    Coordinates with exactly zero variance get zero columns; the remaining
    block is factored by Cholesky with escalating diagonal jitter.
    """
    P = 0.5 * (P + P.T)
    n = P.shape[0]
    d = np.diag(P)
    if not np.all(np.isfinite(P)) or d.min() < 0:
        raise IllConditionedBeliefError("covariance has negative or non-finite variances")
    active = d > 0
    S = np.zeros((n, n))
    if not active.any():
        return S
    sub = P[np.ix_(active, active)]
    jitter = 0.0
    while True:
        try:
            L = cholesky(sub + jitter * np.eye(len(sub)), lower=True)
            break
        except LinAlgError:
            jitter = jitter0 if jitter == 0.0 else 2 * jitter
            if jitter > jitter_max:
                raise IllConditionedBeliefError("covariance not PSD even after jitter") from None
    S[np.ix_(active, active)] = L
    return S


def sigma_points(belief: GaussianBelief, cfg: UkfConfig = UkfConfig()):
    """Scaled unscented transform points ``(2n+1, n)`` with mean and covariance weights."""
    n = belief.n
    lam = cfg.lam(n)
    wm, wc = ut_weights(n, cfg)
    S = psd_sqrt((n + lam) * belief.cov)
    X = np.empty((2 * n + 1, n))
    X[0] = belief.mean
    X[1:n + 1] = belief.mean + S.T
    X[n + 1:] = belief.mean - S.T
    return X, wm, wc


def unscented_moments(Y, wm, wc):
    # offsets from the central point keep coordinates that did not spread exact
    mean = Y[0] + wm @ (Y - Y[0])
    d = Y - mean
    cov = d.T @ (wc[:, None] * d)
    return mean, 0.5 * (cov + cov.T)


def _wrap(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


def _innovation(model, y, mean_pos):
    """Measured minus predicted position, wrapped in radians, then normalised."""
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)):
        raise ValueError("non-finite measurement")
    return _wrap(y - mean_pos * model.angle_scale) / model.angle_scale


def linear_update(prior: GaussianBelief, nu, R, idx):
    """Kalman update for a coordinate-selector output map and a given innovation.

    Returns ``(posterior, innovation_cov, gain)``; the covariance uses the
    Joseph form.
    """
    idx = list(idx)
    P = prior.cov
    PHt = P[:, idx]
    S = P[np.ix_(idx, idx)] + R
    try:
        cf = cho_factor(S)
    except LinAlgError:
        raise IllConditionedBeliefError("innovation covariance is not positive definite") from None
    K = cho_solve(cf, PHt.T).T
    mean = prior.mean + K @ nu
    # (I-KH) P (I-KH)^T + K R K^T, expanded for a selector H
    KPH = K @ PHt.T
    cov = P - KPH - KPH.T + K @ S @ K.T
    cov = 0.5 * (cov + cov.T)
    return GaussianBelief(mean, cov), S, K


def measurement_update(model: TustinNet, prior: GaussianBelief, y, R, pos_idx=(0, 2)):
    """Position update with the angle innovation wrapped to (-pi, pi].

    Returns ``(posterior, innovation, innovation_cov, gain)``.
    """
    nu = _innovation(model, y, prior.mean[list(pos_idx)])
    post, S, K = linear_update(prior, nu, R, pos_idx)
    return post, nu, S, K


def unscented_step(f, belief: GaussianBelief, y, process_cov, R, idx, cfg: UkfConfig = UkfConfig()):
    """Generic additive-noise UKF step for ``x' = f(x)`` and ``y = x[idx]``.

    ``f`` maps a ``(2n+1, n)`` array of sigma points row by row.
    """
    X, wm, wc = sigma_points(belief, cfg)
    mean, cov = unscented_moments(f(X), wm, wc)
    prior = GaussianBelief(mean, cov + process_cov)
    nu = np.asarray(y, dtype=float) - prior.mean[list(idx)]
    post, _, _ = linear_update(prior, nu, R, idx)
    return post


def ukf_predict(model, belief, u, noise: NoiseConfig, cfg: UkfConfig):
    X, wm, wc = sigma_points(belief, cfg)
    Y = tn_step(model, X, u)
    mean, cov = unscented_moments(Y, wm, wc)
    return GaussianBelief(mean, cov + noise.state_cov())


def ukf_step(model: TustinNet, belief: GaussianBelief, u, y, noise: NoiseConfig = NoiseConfig(),
             cfg: UkfConfig = UkfConfig(), return_innovation: bool = False):
    prior = ukf_predict(model, belief, u, noise, cfg)
    post, nu, S, _ = measurement_update(model, prior, y, noise.meas_cov(model))
    return (post, nu, S) if return_innovation else post


def ekf_step(model: TustinNet, belief: GaussianBelief, u, y, noise: NoiseConfig = NoiseConfig(),
             return_innovation: bool = False):
    mean = tn_step(model, belief.mean, u)
    F = step_jacobians(model, belief.mean, u).dstate
    cov = F @ belief.cov @ F.T + noise.state_cov()
    prior = GaussianBelief(mean, 0.5 * (cov + cov.T))
    post, nu, S, _ = measurement_update(model, prior, y, noise.meas_cov(model))
    return (post, nu, S) if return_innovation else post


# -- joint state / last-layer filter ----------------------------------------

def tn_step_last_layer(model: TustinNet, S, u, Psi) -> np.ndarray:
    """``tn_step`` with a separate last linear layer for every row of ``S``."""
    W3 = model.weights[-2]
    feats = encode_features(model, S, u)
    _, acts = mlp_forward(model.weights[:-2] + (np.zeros_like(W3), np.zeros(2)), feats)
    h = acts[-2]
    nW = W3.size
    Wb = Psi[:, :nW].reshape((len(Psi),) + W3.shape)
    delta = np.einsum("bj,bji->bi", h, Wb) + Psi[:, nW:]
    vel = S[:, [1, 3]]
    vel_next = vel + delta
    out = np.empty_like(S)
    out[:, [0, 2]] = S[:, [0, 2]] + model.Ts * model.Kv * 0.5 * (vel_next + vel)
    out[:, [1, 3]] = vel_next
    return out


def joint_belief(model: TustinNet, state: GaussianBelief, param_var: float = 0.0) -> GaussianBelief:
    """Augment a state belief with the model's last layer (mean) and variance."""
    n = model.n_last
    mean = np.concatenate([state.mean, model.last_layer()])
    cov = np.zeros((4 + n, 4 + n))
    cov[:4, :4] = state.cov
    cov[4:, 4:] = np.eye(n) * param_var
    return GaussianBelief(mean, cov)


def jukf_step(model: TustinNet, belief: GaussianBelief, u, y, noise: NoiseConfig = NoiseConfig(),
              cfg: UkfConfig = UkfConfig(), return_innovation: bool = False):
    """Augmented UKF with random-walk dynamics on the last-layer parameters."""
    if belief.n != 4 + model.n_last:
        raise ValueError(f"joint belief must have dimension {4 + model.n_last}")
    X, wm, wc = sigma_points(belief, cfg)
    Y = np.empty_like(X)
    Y[:, :4] = tn_step_last_layer(model, X[:, :4], u, X[:, 4:])
    Y[:, 4:] = X[:, 4:]
    mean, cov = unscented_moments(Y, wm, wc)
    cov[:4, :4] += noise.state_cov()
    cov[4:, 4:] += np.eye(model.n_last) * noise.param
    prior = GaussianBelief(mean, cov)
    post, nu, S, _ = measurement_update(model, prior, y, noise.meas_cov(model))
    return (post, nu, S) if return_innovation else post


def extract_model(model: TustinNet, belief: GaussianBelief) -> TustinNet:
    return model.with_last_layer(belief.mean[4:])


# -- stateful wrapper for closed-loop use -----------------------------------

class StateFilter:
    """Single-owner filter instance: ``kind`` is ``"ukf"``, ``"ekf"`` or ``"jukf"``."""

    def __init__(self, kind: str, model: TustinNet, belief: GaussianBelief,
                 noise: NoiseConfig = NoiseConfig(), cfg: UkfConfig = UkfConfig()):
        if kind not in ("ukf", "ekf", "jukf"):
            raise ValueError(f"unknown filter {kind!r}")
        self.kind, self.model, self.belief, self.noise, self.cfg = kind, model, belief, noise, cfg
        self.innovation = np.zeros(2)

    @property
    def state(self) -> GaussianBelief:
        return GaussianBelief(self.belief.mean[:4], self.belief.cov[:4, :4])

    @property
    def current_model(self) -> TustinNet:
        return extract_model(self.model, self.belief) if self.kind == "jukf" else self.model

    def step(self, u, y) -> GaussianBelief:
        if self.kind == "ukf":
            self.belief, self.innovation, _ = ukf_step(self.model, self.belief, u, y, self.noise, self.cfg, True)
        elif self.kind == "ekf":
            self.belief, self.innovation, _ = ekf_step(self.model, self.belief, u, y, self.noise, True)
        else:
            self.belief, self.innovation, _ = jukf_step(self.model, self.belief, u, y, self.noise, self.cfg, True)
        return self.belief


def write_trace_csv(path, t, means, diag_covs, innovations) -> None:
    means, diag_covs, innovations = map(np.asarray, (means, diag_covs, innovations))
    n, m = means.shape[1], innovations.shape[1]
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["t"] + [f"x_hat{i}" for i in range(n)] + [f"diagP{i}" for i in range(n)]
                   + [f"innovation{i}" for i in range(m)])
        for row in zip(t, means, diag_covs, innovations):
            w.writerow([f"{row[0]:.6f}"] + [repr(float(v)) for v in np.concatenate(row[1:])])
