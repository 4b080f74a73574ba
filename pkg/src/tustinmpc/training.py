"""Data collection, sequence loss, backpropagation through time and Adam."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import PendulumParams, dopri_step, holding_torque, simulate, state_derivative
from .lqr import dare_gain, linearize, lqr_control, upright_lqr
from .network import (
    TustinNet,
    VEL,
    half_step_delta,
    init_state_from_measurements,
    step_vjp,
    tn_step_cached,
)

log = logging.getLogger(__name__)

OPEN_LOOP = "open-loop-fall"
CLOSED_LOOP = "lqr-closed-loop"
SETPOINT = "lqr-setpoint"
CSV_HEADER = ["t", "theta1", "dtheta1", "theta2", "dtheta2", "u1", "u2"]


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class Episode:
    states: np.ndarray  # (T+1, 4) true plant states
    torques: np.ndarray  # (T, 2)
    Ts: float
    regime: str
    seed: int

    def __post_init__(self):
        if len(self.states) != len(self.torques) + 1:
            raise ValueError("need one more state than torques")

    @property
    def y(self) -> np.ndarray:
        """Measured joint angles."""
        return self.states[:, [0, 2]]

    @property
    def duration(self) -> float:
        return len(self.torques) * self.Ts


@dataclass
class DatasetSpec:
    n_open_loop: int = 40
    n_closed_loop: int = 40
    duration: float = 12.0
    seed: int = 0
    open_loop_torque: float = 0.5
    torque_hold: float = 0.1
    closed_loop_start: float = 0.1
    exploration_sigma: float = 0.5
    exploration_hold: float = 0.01  # seconds each noise sample is held
    u_max: float = 5.0
    Ts: float = 0.01
    substeps: int = 4
    lqr_Q: tuple = (10.0, 1.0, 10.0, 1.0)
    lqr_R: tuple = (0.1, 0.1)
    n_setpoint: int = 0
    setpoint_range: tuple = (1.0, 1.6)  # |theta1|, |theta2| bounds of the rest poses
    setpoint_hold: float = 3.0


@dataclass
class TrainConfig:
    lr: float = 1e-3
    lr_final: float | None = None  # exponential decay target reached at the last epoch
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 2000
    batch_size: int = 8
    open_loop_segment: int = 600
    closed_loop_segment: int = 100
    patience: int = 100
    half_step_init: bool = True
    velocity_weight: float = 0.0  # pull model velocities toward central differences of the angles
    seed: int = 0


def _episode_seeds(seed: int, n: int) -> list[int]:
    ss = np.random.SeedSequence(seed)
    return [int(c.generate_state(1)[0]) for c in ss.spawn(n)]


def exploration_noise(rng, spec: DatasetSpec, T: int) -> np.ndarray:
    """Gaussian torque noise, piecewise constant over ``exploration_hold``."""
    hold = max(1, int(round(spec.exploration_hold / spec.Ts)))
    levels = rng.normal(0.0, spec.exploration_sigma, (-(-T // hold), 2))
    return np.repeat(levels, hold, axis=0)[:T]


def simulate_lqr(p, x0, K, noise, u_max, Ts=0.01, substeps=4):
    """Closed loop ``u = sat(-K x + noise)`` on the plant; batched over episodes."""
    x = np.asarray(x0, dtype=float)
    T = len(noise)
    states = np.empty((T + 1,) + x.shape)
    torques = np.empty(noise.shape)
    states[0] = x
    h = Ts / substeps
    for k in range(T):
        u = lqr_control(K, x, np.zeros(4), np.zeros(2) + noise[k], u_max)
        for _ in range(substeps):
            x, _ = dopri_step(lambda s: state_derivative(s, u, p), x, h)
        states[k + 1] = x
        torques[k] = u
    return states, torques


def open_loop_episodes(p: PendulumParams, spec: DatasetSpec, seeds) -> list[Episode]:
    T = int(round(spec.duration / spec.Ts))
    hold = max(1, int(round(spec.torque_hold / spec.Ts)))
    n_hold = -(-T // hold)
    x0, U = [], []
    for sd in seeds:
        rng = np.random.default_rng(sd)
        th = rng.uniform(-np.pi, np.pi, 2)
        x0.append([th[0], 0.0, th[1], 0.0])
        levels = rng.uniform(-spec.open_loop_torque, spec.open_loop_torque, (n_hold, 2))
        U.append(np.repeat(levels, hold, axis=0)[:T])
    if not seeds:
        return []
    U = np.stack(U, axis=1)
    X = simulate(np.array(x0), U, p, spec.Ts, spec.substeps)
    return [Episode(X[:, i], U[:, i], spec.Ts, OPEN_LOOP, sd) for i, sd in enumerate(seeds)]


def closed_loop_episodes(p: PendulumParams, spec: DatasetSpec, seeds, K=None) -> list[Episode]:
    if not seeds:
        return []
    T = int(round(spec.duration / spec.Ts))
    if K is None:
        K = upright_lqr(p, np.diag(spec.lqr_Q), np.diag(spec.lqr_R), spec.Ts)
    x0, noise = [], []
    for sd in seeds:
        rng = np.random.default_rng(sd)
        th = rng.uniform(-spec.closed_loop_start, spec.closed_loop_start, 2)
        x0.append([th[0], 0.0, th[1], 0.0])
        noise.append(exploration_noise(rng, spec, T))
    X, U = simulate_lqr(p, np.array(x0), K, np.stack(noise, axis=1), spec.u_max, spec.Ts, spec.substeps)
    return [Episode(X[:, i], U[:, i], spec.Ts, CLOSED_LOOP, sd) for i, sd in enumerate(seeds)]


def setpoint_episodes(p: PendulumParams, spec: DatasetSpec, seeds) -> list[Episode]:
    """LQR about random rest poses away from upright, held with the static torque.

    Episodes start near the first pose, which changes every ``setpoint_hold``
    seconds; exploration noise is added to the torque as in the upright episodes.
    """
    T = int(round(spec.duration / spec.Ts))
    hold = max(1, int(round(spec.setpoint_hold / spec.Ts)))
    Q, R = np.diag(spec.lqr_Q), np.diag(spec.lqr_R)
    out = []
    for sd in seeds:
        rng = np.random.default_rng(sd)
        poses = rng.uniform(-1.0, 1.0, (-(-T // hold), 2)) * spec.setpoint_range
        th = poses[0] + rng.uniform(-spec.closed_loop_start, spec.closed_loop_start, 2)
        x = np.array([th[0], 0.0, th[1], 0.0])
        states, torques = [x], []
        noise = exploration_noise(rng, spec, T)
        for k in range(T):
            if k % hold == 0:
                pose = poses[k // hold]
                x_op = np.array([pose[0], 0.0, pose[1], 0.0])
                u_op = holding_torque(pose, p)
                lin = linearize(p, x_op, u_op, spec.Ts, substeps=spec.substeps)
                K, _ = dare_gain(lin.A, lin.B, Q, R)
            u = lqr_control(K, x, x_op, u_op + noise[k], spec.u_max)
            x = simulate(x, u[None], p, spec.Ts, spec.substeps)[1]
            states.append(x)
            torques.append(u)
        out.append(Episode(np.array(states), np.array(torques), spec.Ts, SETPOINT, sd))
    return out


def collect_dataset(p: PendulumParams, spec: DatasetSpec = DatasetSpec()) -> list[Episode]:
    n_open, n_closed = spec.n_open_loop, spec.n_closed_loop
    seeds = _episode_seeds(spec.seed, n_open + n_closed + spec.n_setpoint)
    return (open_loop_episodes(p, spec, seeds[:n_open])
            + closed_loop_episodes(p, spec, seeds[n_open:n_open + n_closed])
            + setpoint_episodes(p, spec, seeds[n_open + n_closed:]))


def split(episode: Episode, at: float = 6.0):
    """Chronological split; both halves share the sample at ``at`` seconds."""
    i = int(round(at / episode.Ts))
    if len(episode.torques) < 2 * i:
        raise ValueError(f"episode shorter than {2 * at} s")
    first = Episode(episode.states[: i + 1], episode.torques[:i], episode.Ts, episode.regime, episode.seed)
    second = Episode(episode.states[i:], episode.torques[i:], episode.Ts, episode.regime, episode.seed)
    return first, second


# -- disk format -------------------------------------------------------------

def write_episode_csv(path, episode: Episode) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_HEADER)
        u = np.vstack([episode.torques, np.zeros((1, 2))])  # no torque after the last sample
        for k, (x, uk) in enumerate(zip(episode.states, u)):
            w.writerow([f"{k * episode.Ts:.6f}"] + [repr(float(v)) for v in (*x, *uk)])


def read_episode_csv(path, regime: str, seed: int) -> Episode:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    Ts = float(data[1, 0] - data[0, 0])
    return Episode(data[:, 1:5], data[:-1, 5:7], round(Ts, 6), regime, seed)


def save_dataset(episodes, directory, split_at: float = 6.0) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = []
    for i, ep in enumerate(episodes):
        name = f"episode_{i:03d}.csv"
        write_episode_csv(d / name, ep)
        manifest.append({
            "file": name, "regime": ep.regime, "seed": ep.seed, "Ts": ep.Ts,
            "split_index": int(round(split_at / ep.Ts)),
        })
    (d / "manifest.json").write_text(json.dumps({"episodes": manifest}, indent=1) + "\n")


def load_dataset(directory) -> list[Episode]:
    d = Path(directory)
    mf = d / "manifest.json"
    if not mf.exists():
        raise FileNotFoundError(f"no manifest in {d}")
    entries = json.loads(mf.read_text())["episodes"]
    return [read_episode_csv(d / e["file"], e["regime"], e["seed"]) for e in entries]


# -- loss and gradients ------------------------------------------------------

def loss(pred, meas) -> float:
    """Mean over steps and joints of ``2 (1 - cos(pred - meas))``."""
    pred = np.asarray(pred, dtype=float)
    meas = np.asarray(meas, dtype=float)
    if pred.shape != meas.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {meas.shape}")
    if pred.size == 0:
        raise ValueError("empty sequence")
    return float(np.mean(2.0 * (1.0 - np.cos(pred - meas))))


def loss_sincos(pred, meas) -> float:
    """The same loss written as squared sine and cosine differences."""
    pred = np.asarray(pred, dtype=float)
    meas = np.asarray(meas, dtype=float)
    return float(np.mean((np.sin(pred) - np.sin(meas)) ** 2 + (np.cos(pred) - np.cos(meas)) ** 2))


@dataclass
class Segments:
    """Equal-length windows, time-major: ``y`` is (L+1, B, 2), ``u`` is (L, B, 2)."""

    y: np.ndarray
    u: np.ndarray

    @property
    def size(self) -> int:
        return self.y.shape[1]

    def take(self, idx) -> "Segments":
        return Segments(self.y[:, idx], self.u[:, idx])


def make_segments(episodes, length: int) -> Segments | None:
    """Cut episodes into non-overlapping windows of ``length`` torques."""
    ys, us = [], []
    for ep in episodes:
        T = len(ep.torques)
        L = min(length, T)
        for start in range(0, T - L + 1, L):
            ys.append(ep.y[start:start + L + 1])
            us.append(ep.torques[start:start + L])
    if not ys:
        return None
    return Segments(np.stack(ys, axis=1), np.stack(us, axis=1))


def central_difference_velocity(y, Ts: float) -> np.ndarray:
    """Velocities at the interior samples of ``y`` (time on axis 0), wrap-safe."""
    d = y[2:] - y[:-2]
    return (np.mod(d + np.pi, 2 * np.pi) - np.pi) / (2 * Ts)


def sequence_loss_and_grad(model: TustinNet, seg: Segments, need_grad: bool = True,
                           half_step_init: bool = True, velocity_weight: float = 0.0):
    """Loss of a free-running rollout and its exact gradient.

    The rollout starts from the two first measurements (finite-difference
    velocity, optionally shifted by half a model step) and predicts the
    remaining ``L - 1`` angle samples of every window.

    Angles alone leave an alternating velocity component unobservable: it
    cancels in the trapezoid position update. ``velocity_weight`` adds a
    squared penalty, in normalised units, between the rollout velocities and
    central differences of the measured angles, which pins that component.
    """
    y, u = seg.y, seg.u
    L = u.shape[0]
    zero = [np.zeros_like(w) for w in model.weights]
    if L < 2:
        return 0.0, zero
    s = init_state_from_measurements(model, y[0], y[1])
    init_cache = None
    if half_step_init:
        delta, init_cache = half_step_delta(model, s, y[0], u[0])
        s[..., VEL] += 0.5 * delta
    caches = []
    preds = np.empty((L - 1,) + y.shape[1:])
    vels = np.empty_like(preds)
    for k in range(1, L):
        s, cache = tn_step_cached(model, s, u[k])
        caches.append(cache)
        preds[k - 1] = s[..., [0, 2]] * model.angle_scale
        vels[k - 1] = s[..., VEL]
    err = preds - y[2:]
    value = float(np.mean(2.0 * (1.0 - np.cos(err))))
    g_vel = None
    if velocity_weight > 0 and L > 2:
        # rollout velocities at samples 2..L-1 against central differences
        vel_err = vels[:-1] - central_difference_velocity(y[1:], model.Ts) / model.velocity_scale
        value += velocity_weight * float(np.mean(vel_err**2))
        g_vel = 2.0 * velocity_weight * vel_err / vel_err.size
    if not need_grad:
        return value, None
    g_pred = 2.0 * np.sin(err) * model.angle_scale / err.size
    grads = zero
    g_s = np.zeros(y.shape[1:-1] + (4,))
    for k in reversed(range(L - 1)):
        g_s[..., 0] += g_pred[k][..., 0]
        g_s[..., 2] += g_pred[k][..., 1]
        if g_vel is not None and k < L - 2:
            g_s[..., VEL] += g_vel[k]
        g_s, _, gp = step_vjp(model, caches[k], g_s)
        for acc, g in zip(grads, gp):
            acc += g
    if init_cache is not None:
        g_init = np.zeros_like(g_s)
        g_init[..., VEL] = 0.5 * g_s[..., VEL]
        _, _, gp = step_vjp(model, init_cache, g_init)
        for acc, g in zip(grads, gp):
            acc += g
    return value, grads


def bptt_gradient(model: TustinNet, y, u, half_step_init: bool = True, velocity_weight: float = 0.0):
    """Gradient of the rollout loss for a single window (``y``: (L+1, 2), ``u``: (L, 2))."""
    seg = Segments(np.asarray(y, dtype=float)[:, None], np.asarray(u, dtype=float)[:, None])
    return sequence_loss_and_grad(model, seg, half_step_init=half_step_init, velocity_weight=velocity_weight)


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if not lr >= 0 or not (0 <= beta1 < 1 and 0 <= beta2 < 1):
            raise ValueError("invalid Adam hyperparameters")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, params: list, grads: list) -> list:
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        out = []
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            out.append(p - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps))
        return out


@dataclass
class TrainResult:
    model: TustinNet
    history: list = field(default_factory=list)  # (epoch, train_loss, val_loss)
    best_epoch: int = 0


def _group(episodes, cfg: TrainConfig):
    groups = []
    for regimes, length in (((OPEN_LOOP,), cfg.open_loop_segment), ((CLOSED_LOOP, SETPOINT), cfg.closed_loop_segment)):
        seg = make_segments([e for e in episodes if e.regime in regimes], length)
        if seg is not None:
            groups.append(seg)
    return groups


def evaluate(model, groups, half_step_init: bool = True) -> float:
    total, n = 0.0, 0
    for seg in groups:
        value, _ = sequence_loss_and_grad(model, seg, False, half_step_init)
        total += value * seg.size
        n += seg.size
    return total / max(n, 1)


def train(model: TustinNet, episodes, cfg: TrainConfig = TrainConfig(), split_at: float = 6.0,
          callback=None) -> TrainResult:
    """Mini-batch Adam on rollout windows; keeps the best-validation checkpoint."""
    if not episodes:
        raise ValueError("empty dataset")
    halves = [split(ep, split_at) for ep in episodes]
    train_groups = _group([h[0] for h in halves], cfg)
    val_groups = _group([h[1] for h in halves], cfg)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    best = model
    best_val = evaluate(model, val_groups, cfg.half_step_init)
    result = TrainResult(model, [], 0)
    stale = 0
    for epoch in range(1, cfg.epochs + 1):
        if cfg.lr_final is not None and cfg.lr > 0:
            opt.lr = cfg.lr * (cfg.lr_final / cfg.lr) ** ((epoch - 1) / max(cfg.epochs - 1, 1))
        batches = []
        for seg in train_groups:
            order = rng.permutation(seg.size)
            batches += [seg.take(order[i:i + cfg.batch_size]) for i in range(0, seg.size, cfg.batch_size)]
        total, count = 0.0, 0
        for j in rng.permutation(len(batches)):
            batch = batches[j]
            value, grads = sequence_loss_and_grad(model, batch, half_step_init=cfg.half_step_init,
                                                  velocity_weight=cfg.velocity_weight)
            if not np.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingDivergedError(f"non-finite loss or gradient at epoch {epoch}")
            model = model.__class__(tuple(opt.step(list(model.weights), grads)), model.Ts,
                                    model.angle_scale, model.velocity_scale, model.torque_scale)
            total += value * batch.size
            count += batch.size
        val = evaluate(model, val_groups, cfg.half_step_init)
        result.history.append((epoch, total / count, val))
        if callback is not None:
            callback(epoch, total / count, val)
        if val < best_val:
            best, best_val, result.best_epoch, stale = model, val, epoch, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                log.info("early stop at epoch %d", epoch)
                break
    result.model = best
    return result


def write_loss_log(path, history) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss"])
        for epoch, tr, va in history:
            w.writerow([epoch, repr(float(tr)), repr(float(va))])


def config_dict(obj) -> dict:
    return asdict(obj)
