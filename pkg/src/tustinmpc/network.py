"""Tustin-Net recurrent model.

The network state is kept normalised, in the same ordering as the plant:
``[pos1, vel1, pos2, vel2]`` with ``pos = theta / angle_scale`` and
``vel = dtheta / velocity_scale``. One step is

    delta = mlp(features(s, u))
    vel'  = vel + delta                         (forward Euler)
    pos'  = pos + Ts * Kv * (vel' + vel) / 2    (Tustin / trapezoid)

The MLP is a single trunk ``8 -> 100 -> 100 -> 2`` with tanh hidden units and a
linear output layer. Weights are stored as ``(fan_in, fan_out)`` matrices so a
batch of feature rows is mapped with ``x @ W + b``.
"""
from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
N_FEATURES = 8
POS = np.array([0, 2])
VEL = np.array([1, 3])


@dataclass(frozen=True)
class TustinNet:
    weights: tuple  # (W1, b1, W2, b2, W3, b3)
    Ts: float = 0.01
    angle_scale: float = np.pi
    velocity_scale: float = 2 * np.pi
    torque_scale: float = 5.0

    def __post_init__(self):
        if not self.Ts > 0:
            raise ValueError("Ts must be positive")
        ws = tuple(np.asarray(w, dtype=float) for w in self.weights)
        if len(ws) % 2:
            raise ValueError("weights must alternate matrix, bias")
        fan_in = N_FEATURES
        for W, b in zip(ws[::2], ws[1::2]):
            if W.ndim != 2 or W.shape[0] != fan_in or b.shape != (W.shape[1],):
                raise ValueError(f"inconsistent layer shapes {W.shape}, {b.shape}")
            fan_in = W.shape[1]
        if fan_in != 2:
            raise ValueError("output layer must have 2 units")
        if not all(np.all(np.isfinite(w)) for w in ws):
            raise ValueError("non-finite weights")
        object.__setattr__(self, "weights", ws)

    @property
    def Kv(self) -> float:
        return self.velocity_scale / self.angle_scale

    @property
    def scales(self) -> np.ndarray:
        """Per-coordinate factors mapping normalised states to physical units."""
        return np.array(
            [self.angle_scale, self.velocity_scale, self.angle_scale, self.velocity_scale]
        )

    @property
    def layer_sizes(self) -> list[int]:
        return [N_FEATURES] + [W.shape[1] for W in self.weights[::2]]

    @property
    def n_params(self) -> int:
        return sum(w.size for w in self.weights)

    # last linear layer, flattened as [W3 row-major, b3]
    @property
    def n_last(self) -> int:
        return self.weights[-2].size + self.weights[-1].size

    def last_layer(self) -> np.ndarray:
        return np.concatenate([self.weights[-2].ravel(), self.weights[-1]])

    def with_last_layer(self, psi) -> "TustinNet":
        psi = np.asarray(psi, dtype=float)
        W = self.weights[-2]
        if psi.shape != (self.n_last,):
            raise ValueError(f"expected {self.n_last} last-layer parameters")
        W3 = psi[: W.size].reshape(W.shape)
        b3 = psi[W.size:]
        return replace(self, weights=self.weights[:-2] + (W3, b3))

    def flat_params(self) -> np.ndarray:
        return np.concatenate([w.ravel() for w in self.weights])

    def with_flat_params(self, theta) -> "TustinNet":
        theta = np.asarray(theta, dtype=float)
        out, i = [], 0
        for w in self.weights:
            out.append(theta[i:i + w.size].reshape(w.shape))
            i += w.size
        return replace(self, weights=tuple(out))

    def to_physical(self, s):
        return np.asarray(s) * self.scales

    def to_normalized(self, x):
        return np.asarray(x) / self.scales


def init_model(
    hidden: tuple = (100, 100),
    seed: int = 0,
    Ts: float = 0.01,
    angle_scale: float = np.pi,
    velocity_scale: float = 2 * np.pi,
    torque_scale: float = 5.0,
    zero: bool = False,
) -> TustinNet:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    sizes = [N_FEATURES, *hidden, 2]
    weights = []
    for fi, fo in zip(sizes[:-1], sizes[1:]):
        lim = np.sqrt(6.0 / (fi + fo))
        W = np.zeros((fi, fo)) if zero else rng.uniform(-lim, lim, (fi, fo))
        weights += [W, np.zeros(fo)]
    return TustinNet(tuple(weights), Ts, angle_scale, velocity_scale, torque_scale)


def encode_features(model: TustinNet, s, u) -> np.ndarray:
    """``[sin a1, cos a1, sin a2, cos a2, vel1, vel2, u1/us, u2/us]`` with ``a = pi*pos``."""
    s = np.asarray(s, dtype=float)
    u = np.asarray(u, dtype=float)
    batch = np.broadcast_shapes(s.shape[:-1], u.shape[:-1])
    s = np.broadcast_to(s, batch + (4,))
    u = np.broadcast_to(u, batch + (2,))
    a1 = model.angle_scale * s[..., 0]
    a2 = model.angle_scale * s[..., 2]
    return np.stack(
        [
            np.sin(a1), np.cos(a1), np.sin(a2), np.cos(a2),
            s[..., 1], s[..., 3],
            u[..., 0] / model.torque_scale, u[..., 1] / model.torque_scale,
        ],
        axis=-1,
    )


def mlp_forward(weights, x):
    """Forward pass returning the output and the hidden activations."""
    acts = [x]
    h = x
    n = len(weights) // 2
    for i in range(n):
        z = h @ weights[2 * i] + weights[2 * i + 1]
        h = np.tanh(z) if i < n - 1 else z
        acts.append(h)
    return h, acts


def mlp_vjp(weights, acts, g_out, want_params: bool = True):
    """Pull back an output cotangent; returns ``(g_input, [param grads])``.

    Parameter gradients are summed over every leading batch axis.
    """
    n = len(weights) // 2
    grads = [None] * len(weights)
    g = g_out
    for i in reversed(range(n)):
        if i < n - 1:
            g = g * (1.0 - acts[i + 1] ** 2)
        if want_params:
            h_in = acts[i]
            g2d = g.reshape(-1, g.shape[-1])
            grads[2 * i] = h_in.reshape(-1, h_in.shape[-1]).T @ g2d
            grads[2 * i + 1] = g2d.sum(axis=0)
        g = g @ weights[2 * i].T
    return g, grads


def tn_step(model: TustinNet, s, u) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    delta, _ = mlp_forward(model.weights, encode_features(model, s, u))
    return _advance(model, s, delta)


def _advance(model, s, delta):
    vel = s[..., VEL]
    vel_next = vel + delta
    pos_next = s[..., POS] + model.Ts * model.Kv * 0.5 * (vel_next + vel)
    out = np.empty(np.broadcast_shapes(s.shape, delta.shape[:-1] + (4,)))
    out[..., POS] = pos_next
    out[..., VEL] = vel_next
    return out


def tn_step_cached(model: TustinNet, s, u):
    """``tn_step`` that also returns what ``step_vjp`` needs."""
    s = np.asarray(s, dtype=float)
    feats = encode_features(model, s, u)
    delta, acts = mlp_forward(model.weights, feats)
    return _advance(model, s, delta), (s, acts)


def step_vjp(model: TustinNet, cache, g_next, want_params: bool = True):
    """Reverse-mode derivative of one step.

    Returns ``(g_state, g_u, g_params)`` where ``g_params`` is a list matching
    ``model.weights`` (or None).
    """
    s, acts = cache
    c = model.Ts * model.Kv
    g_pos = g_next[..., POS]
    g_vel_next = g_next[..., VEL]
    g_delta = g_vel_next + 0.5 * c * g_pos
    g_feat, g_params = mlp_vjp(model.weights, acts, g_delta, want_params)
    if not want_params:
        g_params = None
    k = model.angle_scale
    a1, a2 = k * s[..., 0], k * s[..., 2]
    g_s = np.empty(g_next.shape)
    g_s[..., 0] = g_pos[..., 0] + k * (g_feat[..., 0] * np.cos(a1) - g_feat[..., 1] * np.sin(a1))
    g_s[..., 2] = g_pos[..., 1] + k * (g_feat[..., 2] * np.cos(a2) - g_feat[..., 3] * np.sin(a2))
    g_s[..., 1] = g_vel_next[..., 0] + c * g_pos[..., 0] + g_feat[..., 4]
    g_s[..., 3] = g_vel_next[..., 1] + c * g_pos[..., 1] + g_feat[..., 5]
    g_u = g_feat[..., 6:8] / model.torque_scale
    return g_s, g_u, g_params


@dataclass
class StepJacobians:
    dstate: np.ndarray  # (..., 4, 4)
    dinput: np.ndarray  # (..., 4, 2)
    dlast: np.ndarray  # (..., 4, n_last)
    dparams: np.ndarray | None = field(default=None)  # (..., 4, n_params)


def step_jacobians(model: TustinNet, s, u, all_params: bool = False) -> StepJacobians:
    """Exact Jacobians of ``tn_step`` w.r.t. state, torque and parameters.

    Computed by pulling back the four unit cotangents of the next state, so
    they are consistent with ``step_vjp`` by construction.
    """
    s = np.asarray(s, dtype=float)
    u = np.asarray(u, dtype=float)
    batch = np.broadcast_shapes(s.shape[:-1], u.shape[:-1])
    s = np.broadcast_to(s, batch + (4,))
    u = np.broadcast_to(u, batch + (2,))
    _, (s_, acts) = tn_step_cached(model, s, u)
    dstate = np.empty(batch + (4, 4))
    dinput = np.empty(batch + (4, 2))
    # last layer: d delta / d W3[j, i] = h2[j] * [i == out], d delta / d b3 = I
    h2 = acts[-2]
    n_hidden = h2.shape[-1]
    c = model.Ts * model.Kv
    ddelta_dlast = np.zeros(batch + (2, model.n_last))
    for i in range(2):
        ddelta_dlast[..., i, i:2 * n_hidden:2] = h2
        ddelta_dlast[..., i, 2 * n_hidden + i] = 1.0
    dlast = np.empty(batch + (4, model.n_last))
    dlast[..., POS, :] = 0.5 * c * ddelta_dlast
    dlast[..., VEL, :] = ddelta_dlast
    dparams = None
    if all_params:
        if batch:
            per = [step_jacobians(model, s[idx], u[idx], True).dparams for idx in np.ndindex(batch)]
            dparams = np.stack(per).reshape(batch + (4, model.n_params))
        else:
            dparams = np.empty((4, model.n_params))
    for r in range(4):
        e = np.zeros(batch + (4,))
        e[..., r] = 1.0
        want = all_params and not batch
        gs, gu, gp = step_vjp(model, (s_, acts), e, want_params=want)
        dstate[..., r, :] = gs
        dinput[..., r, :] = gu
        if want:
            dparams[r] = np.concatenate([g.ravel() for g in gp])
    return StepJacobians(dstate, dinput, dlast, dparams)


def rollout(model: TustinNet, s0, torques) -> np.ndarray:
    """States ``s0, s1, ..., sT`` for torques of shape ``(T, ..., 2)``."""
    s = np.asarray(s0, dtype=float)
    torques = np.asarray(torques, dtype=float)
    out = np.empty((len(torques) + 1,) + np.broadcast_shapes(s.shape, torques.shape[1:-1] + (4,)))
    out[0] = s
    for k, u in enumerate(torques):
        s = tn_step(model, s, u)
        out[k + 1] = s
    return out


def init_state_from_measurements(model: TustinNet, y0, y1, u0=None) -> np.ndarray:
    """Normalised state at the time of ``y1`` from two consecutive angle samples.

    The finite difference ``(y1 - y0) / Ts`` is the mean velocity over the
    interval. Given the torque ``u0`` applied during it, half of the model's
    velocity increment is added so the estimate refers to the end point.
    """
    if not model.Ts > 0:
        raise ValueError("Ts must be positive")
    y0 = np.asarray(y0, dtype=float)
    y1 = np.asarray(y1, dtype=float)
    vel = (y1 - y0) / model.Ts
    s = np.empty(np.broadcast_shapes(y0.shape, y1.shape)[:-1] + (4,))
    s[..., POS] = y1 / model.angle_scale
    s[..., VEL] = vel / model.velocity_scale
    if u0 is not None:
        s[..., VEL] += 0.5 * half_step_delta(model, s, y0, u0)[0]
    return s


def half_step_delta(model, s, y0, u0):
    s0 = s.copy()
    s0[..., POS] = y0 / model.angle_scale
    nxt, cache = tn_step_cached(model, s0, u0)
    return nxt[..., VEL] - s0[..., VEL], cache


# -- checkpoint format -------------------------------------------------------

def _encode(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def _decode(s: str, shape) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype="<f8").reshape(shape).astype(float)


def model_to_dict(model: TustinNet) -> dict:
    return {
        "format": "tustin-net",
        "format_version": FORMAT_VERSION,
        "Ts": model.Ts,
        "Kv": model.Kv,
        "angle_scale": model.angle_scale,
        "velocity_scale": model.velocity_scale,
        "torque_scale": model.torque_scale,
        "layers": [
            {"shape": list(W.shape), "weight": _encode(W), "bias": _encode(b)}
            for W, b in zip(model.weights[::2], model.weights[1::2])
        ],
    }


def model_from_dict(d: dict) -> TustinNet:
    if d.get("format") != "tustin-net":
        raise ValueError("not a tustin-net checkpoint")
    if d.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {d.get('format_version')}")
    weights = []
    for layer in d["layers"]:
        shape = tuple(layer["shape"])
        weights += [_decode(layer["weight"], shape), _decode(layer["bias"], (shape[1],))]
    model = TustinNet(
        tuple(weights), d["Ts"], d["angle_scale"], d["velocity_scale"], d["torque_scale"]
    )
    if not np.isclose(model.Kv, d["Kv"]):
        raise ValueError("Kv inconsistent with the stored scales")
    return model


def save_model(model: TustinNet, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1, sort_keys=True) + "\n")


def load_model(path) -> TustinNet:
    return model_from_dict(json.loads(Path(path).read_text()))
