"""Experiment configuration: a TOML file merged over the packaged defaults."""
from __future__ import annotations

import copy
import hashlib
import json
from importlib import resources
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .dynamics import PendulumParams
from .estimation import NoiseConfig, UkfConfig
from .mpc import ClosedLoopConfig, MpcConfig
from .training import DatasetSpec, TrainConfig


def default_config() -> dict:
    text = resources.files(__package__).joinpath("default.toml").read_text()
    return tomllib.loads(text)


def merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path=None, seed: int | None = None) -> dict:
    cfg = default_config()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        with open(path, "rb") as f:
            user = tomllib.load(f)
        unknown = set(user) - set(cfg)
        if unknown:
            raise KeyError(f"unknown config sections: {sorted(unknown)}")
        cfg = merge(cfg, user)
    if seed is not None:
        cfg["seed"] = int(seed)
    return cfg


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


# -- typed views ---------------------------------------------------------------

def plant(cfg: dict, changed: bool = False) -> PendulumParams:
    d = dict(cfg["plant"])
    if changed:
        d.update(cfg["plant_changed"])
    return PendulumParams.from_dict(d)


def dataset_spec(cfg: dict) -> DatasetSpec:
    d = cfg["dataset"]
    sim = cfg["simulation"]
    return DatasetSpec(
        n_open_loop=int(d["n_open_loop"]),
        n_closed_loop=int(d["n_closed_loop"]),
        duration=float(d["duration"]),
        seed=int(cfg["seed"]),
        open_loop_torque=float(d["open_loop_torque"]),
        torque_hold=float(d["torque_hold"]),
        closed_loop_start=float(d["closed_loop_start"]),
        exploration_sigma=float(d["exploration_sigma"]),
        exploration_hold=float(d["exploration_hold"]),
        u_max=float(sim["u_max"]),
        Ts=float(sim["Ts"]),
        substeps=int(sim["substeps"]),
        lqr_Q=tuple(d["lqr_Q"]),
        lqr_R=tuple(d["lqr_R"]),
        n_setpoint=int(d["n_setpoint"]),
        setpoint_range=tuple(d["setpoint_range"]),
        setpoint_hold=float(d["setpoint_hold"]),
    )


def train_config(cfg: dict) -> TrainConfig:
    d = {k: v for k, v in cfg["train"].items() if k != "split_at"}
    return TrainConfig(seed=int(cfg["seed"]), **d)


def noise_config(cfg: dict, adaptive: bool = False) -> NoiseConfig:
    f = cfg["filter"]
    return NoiseConfig(
        pos=float(f["pos_var"]),
        vel=float(f["vel_var"]),
        param=float(f["adaptive_param_var"] if adaptive else f["param_var"]),
        meas=float(f["meas_var"]),
    )


def ukf_config(cfg: dict) -> UkfConfig:
    f = cfg["filter"]
    return UkfConfig(alpha=float(f["alpha"]), beta=float(f["beta"]), kappa=f.get("kappa"))


def mpc_config(cfg: dict, reference=None) -> MpcConfig:
    d = cfg["mpc"]
    return MpcConfig(
        horizon=int(d["horizon"]),
        Q=np.diag(d["Q"]),
        R=np.diag(d["R"]),
        u_max=float(cfg["simulation"]["u_max"]),
        max_iter=int(d["max_iter"]),
        tol=float(d["tol"]),
        reference=np.zeros(4) if reference is None else np.asarray(reference, dtype=float),
        penalize_increments=bool(d["penalize_increments"]),
    )


def closed_loop_config(cfg: dict, adaptive: bool = False, filter_kind: str = "ukf") -> ClosedLoopConfig:
    f = cfg["filter"]
    sim = cfg["simulation"]
    return ClosedLoopConfig(
        duration=float(cfg["mpc"]["duration"]),
        Ts=float(sim["Ts"]),
        substeps=int(sim["substeps"]),
        filter=filter_kind,
        noise=noise_config(cfg, adaptive),
        ukf=ukf_config(cfg),
        init_var=tuple(f["init_var"]),
        init_param_var=float(f["init_param_var"]) if adaptive else 0.0,
        meas_noise_std=float(cfg["mpc"]["meas_noise_std"]),
        seed=int(cfg["seed"]),
    )
