import numpy as np
import pytest

from tustinmpc import config as C


def test_defaults_load_and_views_build():
    cfg = C.load_config()
    assert cfg["seed"] == 0
    assert C.plant(cfg).m2 == 0.2
    changed = C.plant(cfg, changed=True)
    assert (changed.c1, changed.m2, changed.c2) == (0.01, 0.3, 0.1)
    assert C.dataset_spec(cfg).n_open_loop == 40
    assert C.train_config(cfg).epochs == cfg["train"]["epochs"]
    assert C.ukf_config(cfg).kappa is None
    assert np.array_equal(C.mpc_config(cfg).Q, np.diag([100.0, 0.1, 100.0, 0.1]))
    assert C.closed_loop_config(cfg, adaptive=False).init_param_var == 0.0
    assert C.noise_config(cfg, adaptive=True).param == cfg["filter"]["adaptive_param_var"]


def test_user_file_merges_table_by_table(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("[train]\nepochs = 3\n[plant]\nc1 = 0.2\n")
    cfg = C.load_config(p, seed=5)
    assert cfg["train"]["epochs"] == 3
    assert cfg["train"]["lr"] == C.default_config()["train"]["lr"]
    assert cfg["plant"]["c1"] == 0.2 and cfg["plant"]["m1"] == 0.2
    assert cfg["seed"] == 5


def test_unknown_section_and_missing_file(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("[nonsense]\na = 1\n")
    with pytest.raises(KeyError):
        C.load_config(p)
    with pytest.raises(FileNotFoundError):
        C.load_config(tmp_path / "missing.toml")


def test_hash_is_canonical():
    a = C.load_config()
    b = C.load_config()
    assert C.config_hash(a) == C.config_hash(b)
    b["seed"] = 1
    assert C.config_hash(a) != C.config_hash(b)


def test_merge_does_not_alias():
    base = {"t": {"x": [1, 2]}}
    out = C.merge(base, {"t": {"y": 1}})
    out["t"]["x"].append(3)
    assert base == {"t": {"x": [1, 2]}}
