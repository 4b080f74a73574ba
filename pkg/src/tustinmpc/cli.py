"""Command-line front end: ``python -m tustinmpc <command> [options]``.

Exit status is 0 when a command passes its configured thresholds, 1 when it
runs but misses them, and 2 on any execution error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import subprocess
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np

from . import config as C
from . import experiments as X
from .estimation import write_trace_csv
from .mpc import write_run_log
from .network import init_model, load_model, save_model
from .training import (
    collect_dataset,
    config_dict,
    load_dataset,
    save_dataset,
    train,
    write_loss_log,
)

log = logging.getLogger("tustinmpc")

PASS, FAIL, ERROR = 0, 1, 2


class UsageError(Exception):
    pass


def _version() -> str:
    try:
        v = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        v = "unknown"
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if rev.returncode == 0:
            v += "+" + rev.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return v


def _prepare_out(out: Path, force: bool) -> Path:
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"{out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run_json(out: Path, command: str, cfg: dict, t0: float, extra: dict) -> None:
    record = {
        "command": command,
        "seed": cfg["seed"],
        "config_hash": C.config_hash(cfg),
        "code_version": _version(),
        "wall_time_s": round(time.perf_counter() - t0, 3),
        "config": cfg,
        **extra,
    }
    (out / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def _load_model_arg(path) -> "TustinNet":  # noqa: F821
    if path is None:
        raise UsageError("--model is required")
    if not Path(path).is_file():
        raise UsageError(f"model checkpoint not found: {path}")
    return load_model(path)


# -- commands ------------------------------------------------------------------

def cmd_collect(args, cfg, out):
    spec = C.dataset_spec(cfg)
    if args.open_loop_only:
        spec.n_closed_loop = spec.n_setpoint = 0
    episodes = collect_dataset(C.plant(cfg), spec)
    save_dataset(episodes, out)
    print(f"wrote {len(episodes)} episodes to {out}")
    return PASS, {"episodes": len(episodes)}


def cmd_train(args, cfg, out):
    if args.dataset is None or not Path(args.dataset).is_dir():
        raise UsageError(f"dataset directory not found: {args.dataset}")
    episodes = load_dataset(args.dataset)
    mc = cfg["model"]
    model = init_model(hidden=tuple(mc["hidden"]), seed=int(cfg["seed"]), Ts=float(cfg["simulation"]["Ts"]),
                       angle_scale=float(mc["angle_scale"]), velocity_scale=float(mc["velocity_scale"]),
                       torque_scale=float(mc["torque_scale"]))
    tc = C.train_config(cfg)

    def progress(epoch, tr, va):
        if epoch % 10 == 0 or epoch == 1:
            log.info("epoch %d train %.6f val %.6f", epoch, tr, va)

    res = train(model, episodes, tc, float(cfg["train"]["split_at"]), callback=progress)
    save_model(res.model, out / "model.json")
    write_loss_log(out / "loss.csv", res.history)
    _, tr, va = res.history[res.best_epoch - 1] if res.best_epoch else (0, float("nan"), float("nan"))
    print(f"epochs run {len(res.history)}, best epoch {res.best_epoch}: train {tr:.6f} val {va:.6f}")
    return PASS, {"epochs": len(res.history), "best_epoch": res.best_epoch, "train_config": config_dict(tc)}


def cmd_eval(args, cfg, out):
    model = _load_model_arg(args.model)
    th = cfg["thresholds"]
    if args.scenario == "free-fall":
        pred = X.free_fall_prediction(model, cfg)
        err = np.abs(X.wrap_angle(pred.pred[-1] - np.array([np.pi, 0.0])))
        ok = bool(np.all(err < th["free_fall_terminal"]))
        verdict = f"terminal distance to (pi, 0): {err.round(4).tolist()} (< {th['free_fall_terminal']})"
    else:
        pred = X.lqr_prediction(model, cfg)
        err = pred.max_error(pred.n_early)
        ok = bool(np.all(err < th["lqr_prediction"]))
        verdict = f"max error over {pred.n_early} steps: {err.round(4).tolist()} (< {th['lqr_prediction']})"
    X.write_prediction_csv(out / f"{args.scenario}.csv", pred)
    summary = pred.summary()
    print(f"rmse full {np.round(summary['rmse_full'], 4).tolist()}  first {pred.n_early} steps "
          f"{np.round(summary['rmse_early'], 4).tolist()}")
    print(("PASS " if ok else "FAIL ") + verdict)
    return (PASS if ok else FAIL), {"scenario": args.scenario, "summary": summary, "passed": ok}


def cmd_filter_compare(args, cfg, out):
    model = _load_model_arg(args.model)
    traces = X.filter_compare(model, cfg)
    for kind, tr in traces.items():
        write_trace_csv(out / f"trace_{kind}.csv", tr.t, tr.means, tr.diag_cov, tr.innovations)
    rows = X.filter_table(traces)
    with open(out / "rmse.csv", "w", newline="") as f:
        csv.writer(f, lineterminator="\n").writerows(rows)
    print(f"{rows[0][0]:<10} " + " ".join(f"{h:>12}" for h in rows[0][1:]))
    for r in rows[1:]:
        print(f"{r[0]:<10} " + " ".join(f"{v:12.6g}" for v in r[1:]))
    ok = traces["ukf"].position_rmse < traces["ekf"].position_rmse
    print(("PASS" if ok else "FAIL") + ": UKF position RMSE below EKF")
    return (PASS if ok else FAIL), {"table": rows, "passed": ok}


def cmd_mpc(args, cfg, out):
    model = _load_model_arg(args.model)
    res = X.run_mpc(model, cfg, args.variant)
    write_run_log(out / f"{args.variant}.csv", res.log)
    m = res.metrics
    print(f"final {cfg['thresholds']['hold_window']} s: max |angle error| {np.round(m['max_angle_error'], 4).tolist()}, "
          f"mean {np.round(m['mean_angle_error'], 4).tolist()}, max |velocity| {np.round(m['max_velocity'], 4).tolist()}, "
          f"mean residual {m['mean_residual']:.3g}")
    print(("PASS" if res.passed else "FAIL") + f": {args.variant}")
    return (PASS if res.passed else FAIL), {"variant": args.variant, "metrics": m, "passed": res.passed}


COMMANDS = {
    "collect": cmd_collect,
    "train": cmd_train,
    "eval": cmd_eval,
    "filter-compare": cmd_filter_compare,
    "mpc": cmd_mpc,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=argparse.SUPPRESS, help="TOML file merged over the defaults")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed (non-negative)")
    common.add_argument("--out", type=Path, default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--force", action="store_true", default=argparse.SUPPRESS,
                        help="write into a non-empty output directory")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="tustinmpc", parents=[common],
                                     description="Tustin-Net identification, estimation and MPC experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("collect", parents=[common], help="simulate the training dataset")
    p.add_argument("--open-loop-only", action="store_true")
    p = sub.add_parser("train", parents=[common], help="fit a Tustin-Net on a dataset")
    p.add_argument("--dataset", type=Path)
    p = sub.add_parser("eval", parents=[common], help="open-loop prediction against the simulator")
    p.add_argument("--model", type=Path)
    p.add_argument("--scenario", choices=["free-fall", "lqr-closed-loop"], default="free-fall")
    p = sub.add_parser("filter-compare", parents=[common], help="UKF against EKF on one LQR episode")
    p.add_argument("--model", type=Path)
    p = sub.add_parser("mpc", parents=[common], help="closed-loop MPC run")
    p.add_argument("--model", type=Path)
    p.add_argument("--variant", choices=X.MPC_VARIANTS, default="nominal")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return ERROR if e.code else PASS
    opts = {"config": None, "seed": None, "out": Path("out"), "force": False, "verbose": False}
    opts.update({k: v for k, v in vars(args).items() if k in opts})
    logging.basicConfig(level=logging.INFO if opts["verbose"] else logging.WARNING,
                        format="%(levelname)s %(message)s")
    t0 = time.perf_counter()
    try:
        if opts["seed"] is not None and opts["seed"] < 0:
            raise UsageError("--seed must be non-negative")
        cfg = C.load_config(opts["config"], opts["seed"])
        out = _prepare_out(Path(opts["out"]), opts["force"])
        code, extra = COMMANDS[args.command](args, cfg, out)
        _write_run_json(out, args.command, cfg, t0, extra)
        return code
    except Exception as e:  # noqa: BLE001 - any failure maps to exit status 2
        print(f"error: {e}", file=sys.stderr)
        if opts["verbose"]:
            raise
        return ERROR
