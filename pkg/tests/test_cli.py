import json
import os

import numpy as np
import pytest

from pathnet.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from pathnet.config import ConfigError, apply_override, build_plans, load_config, parse_value
from pathnet.network import NetConfig, ParameterGrid, freeze_path, save_grid
from pathnet.numerics import rng_stream
from pathnet.tasks import write_idx

XOR = ["--set", 'task_a.kind="xor"', "--set", "task_a.dim=4", "--set", "evo.lr=0.05",
       "--set", "evo.population=16", "--set", "evo.eval_batches=10", "--set", "task_a.stop_threshold=0.99"]


def test_run_smoke(tmp_path, capsys):
    out = tmp_path / "r"
    assert main(["run", "--arm", "pathnet", "--engine", "serial", "--seed", "1", "--budget", "100",
                 "--out", str(out), *XOR]) == EXIT_OK
    doc = json.loads((out / "pathnet-1-xor4-xor4.json").read_text())
    assert doc["schema"] == "pathnet.summary/1" and doc["plan"]["seed"] == 1
    assert (out / "pathnet-1-xor4-xor4.jsonl").exists()
    assert "pathnet seed=1" in capsys.readouterr().out


def test_pipeline_and_replicas(tmp_path, capsys):
    out = str(tmp_path)
    for arm in ("independent", "pathnet"):
        assert main(["run", "--arm", arm, "--replicas", "3", "--seed", "10", "--budget", "100", "--out", out, *XOR]) == 0
    names = sorted(p for p in os.listdir(out) if p.endswith(".json"))
    assert len(names) == 6 and {n.split("-")[1] for n in names} == {"10", "11", "12"}
    assert main(["stats", out]) == EXIT_OK
    rep = json.loads((tmp_path / "stats.json").read_text())
    assert rep["arms"]["pathnet"]["runs"] == 3
    assert (tmp_path / "overlap_speedup.csv").read_text().startswith("seed,task_a,task_b,overlap,speedup")


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "run.toml"
    cfg.write_text('arm = "finetune"\nseed = 4\nbudget = 9\n[task_a]\nkind = "xor"\ndim = 4\n[evo]\nlr = 0.5\n')
    c = load_config(str(cfg), {"seed": 8}, ["evo.lr=0.25"])
    assert (c.arm, c.seed, c.budget, c.evo["lr"]) == ("finetune", 8, 9, 0.25)
    plans = build_plans(load_config(str(cfg), {"replicas": 2}))
    assert [p.seed for p in plans] == [4, 5] and plans[0].evo.lr == 0.5 and plans[0].net.input_dim == 4


@pytest.mark.parametrize("text, field", [
    ('arm = "pathnot"', "arm"),
    ('colour = "red"', "colour"),
    ('[evo]\nlearning_rate = 1.0', "evo.learning_rate"),
    ('[evo]\nlr = "fast"', "evo.lr"),
    ('[evo]\nreuse_prob = 2.0', "evo"),
    ('[task_a]\nkind = "mnist"\ndigits = [3, 3]', "task_a.digits"),
    ('[task_a]\nkind = "xor"', "task_a.dim"),
    ('[net]\ninput_dim = 5\n[task_a]\nkind = "xor"\ndim = 4', "net.input_dim"),
    ('engine = "async"\nworkers = 7', "workers"),
    ('[task_a]\nkind = "xor"\ndim = 4\n[task_b]\nkind = "xor"\ndim = 6', "task_b"),
])
def test_bad_config_names_field(tmp_path, text, field):
    p = tmp_path / "c.toml"
    p.write_text(text)
    with pytest.raises(ConfigError) as e:
        load_config(str(p))
    assert e.value.path == field
    assert main(["run", "--config", str(p)]) == EXIT_USAGE


def test_override_parsing():
    assert parse_value("3") == 3 and parse_value("1e-4") == 1e-4 and parse_value("[1, 2]") == [1, 2]
    assert parse_value("true") is True and parse_value("xor") == "xor"
    doc = {}
    apply_override(doc, "task_a.digits=[1,2]")
    apply_override(doc, "seed=3")
    assert doc == {"task_a": {"digits": [1, 2]}, "seed": 3}
    for bad in ("seed", "a.b.c=1", "bogus.x=1"):
        with pytest.raises(ConfigError):
            apply_override({}, bad)


def _fake_mnist(d):
    rng = np.random.default_rng(0)
    labels = np.repeat(np.arange(10, dtype=np.uint8), 5)
    write_idx(d / "train-images-idx3-ubyte", rng.integers(0, 256, (50, 28, 28), dtype=np.uint8))
    write_idx(d / "train-labels-idx1-ubyte", labels)


def test_data_dir_resolution(tmp_path, monkeypatch):
    good, empty = tmp_path / "good", tmp_path / "empty"
    good.mkdir()
    empty.mkdir()
    _fake_mnist(good)
    args = ["run", "--budget", "1", "--out", str(tmp_path / "o"), "--set", "task_a.digits=[1,2]"]
    monkeypatch.setenv("PATHNET_DATA_DIR", str(empty))
    assert main(args) == EXIT_DATA
    assert main(args + ["--data-dir", str(good)]) == EXIT_OK  # the flag beats the environment
    monkeypatch.setenv("PATHNET_DATA_DIR", str(good))
    assert main(args + ["--set", f'data_dir="{empty}"']) == EXIT_OK  # the environment beats the file
    assert main(args + ["--data-dir", str(empty)]) == EXIT_DATA


def test_inspect_round_trip(tmp_path, capsys):
    cfg = NetConfig(input_dim=5, neurons_per_module=4)
    grid = ParameterGrid(cfg, rng_stream(0))
    grid.add_head("a", 2, rng_stream(1))
    save_grid(grid, tmp_path / "fresh.npz")
    assert main(["inspect", "--json", str(tmp_path / "fresh.npz")]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["frozen_total"] == 0

    freeze_path(grid, np.array([[0, 1, 2], [0, 1, 2], [5, 1, 2]]))
    save_grid(grid, tmp_path / "a.npz")
    assert main(["inspect", "--json", str(tmp_path / "a.npz")]) == EXIT_OK
    d = json.loads(capsys.readouterr().out)
    assert d["frozen_total"] == grid.frozen_count() == 4 <= cfg.max_modules_per_layer * cfg.layers
    assert [r["count"] for r in d["frozen_per_layer"]] == [2, 1, 1]
    assert d["heads"] == {"a": {"classes": 2, "in_dim": 4}}
    assert main(["inspect", str(tmp_path / "a.npz")]) == EXIT_OK
    assert "frozen modules: 4" in capsys.readouterr().out


def test_error_exit_codes(tmp_path):
    (tmp_path / "bad.npz").write_bytes(b"not a checkpoint")
    assert main(["inspect", str(tmp_path / "bad.npz")]) == EXIT_DATA
    assert main(["stats", str(tmp_path / "nothing")]) == EXIT_DATA
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["run", "--arm", "nope"]) == EXIT_USAGE
    assert main(["run", "--config", str(tmp_path / "missing.toml")]) == EXIT_USAGE


def test_fetch_data(tmp_path, capsys):
    assert main(["fetch-data", "--data-dir", str(tmp_path)]) == EXIT_DATA
    assert "prepare_mnist.py" in capsys.readouterr().out
    _fake_mnist(tmp_path)
    assert main(["fetch-data", "--data-dir", str(tmp_path)]) == EXIT_OK
    assert "train: 50 images 28x28" in capsys.readouterr().out
    (tmp_path / "train-labels-idx1-ubyte.gz").write_bytes(b"tampered")
    assert main(["fetch-data", "--data-dir", str(tmp_path)]) == EXIT_DATA
