import csv
import json

import pytest

from tustinmpc.cli import main
from tustinmpc.network import init_model, save_model

TINY = """
seed = 3
[dataset]
n_open_loop = 2
n_closed_loop = 1
n_setpoint = 1
duration = 1.0
[model]
hidden = [6, 6]
[train]
epochs = 2
open_loop_segment = 20
closed_loop_segment = 20
split_at = 0.5
[eval]
free_fall_duration = 0.5
lqr_duration = 0.6
lqr_window_start = 0.1
[filter_compare]
duration = 0.3
[mpc]
duration = 0.05
max_iter = 5
"""


@pytest.fixture
def tiny(tmp_path):
    p = tmp_path / "tiny.toml"
    p.write_text(TINY)
    return p


def _run(*argv):
    return main([str(a) for a in argv])


def test_collect_then_train(tmp_path, tiny):
    data = tmp_path / "data"
    assert _run("collect", "--config", tiny, "--out", data) == 0
    manifest = json.loads((data / "manifest.json").read_text())
    assert len(manifest["episodes"]) == 4
    run = json.loads((data / "run.json").read_text())
    assert run["command"] == "collect" and run["seed"] == 3 and len(run["config_hash"]) == 64

    model_dir = tmp_path / "model"
    assert _run("train", "--config", tiny, "--dataset", data, "--out", model_dir) == 0
    with open(model_dir / "loss.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["epoch", "train_loss", "val_loss"]
    assert len(rows) == 3
    assert (model_dir / "model.json").is_file()


def test_collect_is_reproducible_and_open_loop_only(tmp_path, tiny):
    assert _run("collect", "--config", tiny, "--out", tmp_path / "a") == 0
    assert _run("--config", tiny, "--out", tmp_path / "b", "collect") == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir() if p.name != "run.json")
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert _run("collect", "--config", tiny, "--open-loop-only", "--out", tmp_path / "c") == 0
    manifest = json.loads((tmp_path / "c" / "manifest.json").read_text())
    assert len(manifest["episodes"]) == 2


def test_non_empty_output_needs_force(tmp_path, tiny):
    out = tmp_path / "o"
    assert _run("collect", "--config", tiny, "--out", out) == 0
    assert _run("collect", "--config", tiny, "--out", out) == 2
    assert _run("collect", "--config", tiny, "--out", out, "--force") == 0


def test_errors_exit_with_two(tmp_path, tiny):
    assert _run("train", "--config", tiny, "--dataset", tmp_path / "nope", "--out", tmp_path / "o1") == 2
    assert _run("eval", "--config", tiny, "--model", tmp_path / "nope.json", "--out", tmp_path / "o2") == 2
    assert _run("collect", "--config", tmp_path / "missing.toml", "--out", tmp_path / "o3") == 2
    assert _run("collect", "--seed", "-1", "--out", tmp_path / "o4") == 2
    assert _run("bogus") == 2


def test_threshold_failure_exits_with_one(tmp_path, tiny):
    # an untrained network does not settle at the hanging equilibrium
    model = tmp_path / "zero.json"
    save_model(init_model(zero=True), model)
    assert _run("eval", "--config", tiny, "--model", model, "--scenario", "free-fall", "--out", tmp_path / "e") == 1
    assert (tmp_path / "e" / "free-fall.csv").is_file()


def test_filter_compare_on_zero_network(tmp_path, tiny):
    model = tmp_path / "zero.json"
    save_model(init_model(zero=True), model)
    code = _run("filter-compare", "--config", tiny, "--model", model, "--out", tmp_path / "f")
    assert code in (0, 1)
    with open(tmp_path / "f" / "rmse.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["quantity", "ukf", "ekf"]
    # the zero network is linear, so both filters agree
    for r in rows[1:]:
        assert float(r[1]) == pytest.approx(float(r[2]), rel=1e-6, abs=1e-9)
    assert (tmp_path / "f" / "trace_ukf.csv").is_file()


def test_mpc_command_writes_run_log(tmp_path, tiny):
    model = tmp_path / "m.json"
    save_model(init_model(seed=0, hidden=(6, 6)), model)
    code = _run("mpc", "--config", tiny, "--model", model, "--variant", "nominal", "--out", tmp_path / "m")
    assert code in (0, 1)
    with open(tmp_path / "m" / "nominal.csv") as f:
        assert sum(1 for _ in f) == 6
