import csv
import json
from pathlib import Path

import pytest

from delaycomp.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, EXIT_RUNTIME, load_config, main
from delaycomp.surrogate import load_dataset, load_model

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def _write(tmp_path, data, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data, indent=2))
    return str(path)


def _rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    """Small dataset and model shared by the train/bench/simulate tests."""
    root = tmp_path_factory.mktemp("tiny")
    cfg = {"plant": {"name": "pendulum"},
           "data": {"n_pairs": 120, "noise_std": 0.0},
           "train": {"arch": [16, 16], "epochs": 20}}
    path = _write(root, cfg)
    assert main(["gen-data", "--config", path, "--out", str(root / "data")]) == EXIT_OK
    ds = str(root / "data" / "dataset.dcop")
    assert main(["train", "--config", path, "--dataset", ds,
                 "--out", str(root / "train")]) == EXIT_OK
    return root, path, ds, str(root / "train" / "model.dcop")


def test_simulate_baseline_config(tmp_path, capsys):
    out = tmp_path / "sim"
    code = main(["simulate", "--config", str(CONFIGS / "scalar_baseline.json"),
                 "--out", str(out), "--no-timing"])
    text = capsys.readouterr().out
    assert code == EXIT_OK
    rows = _rows(out / "sim.csv")
    assert len(rows) - 1 > 1000
    assert "prediction_error_sup <= 0.0001: PASS" in text
    side = json.loads((out / "sim.json").read_text())
    assert side["diverged"] is None
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["subcommand"] == "simulate"
    assert len(manifest["config_hash"]) == 64


def test_simulate_reproducible_bytes(tmp_path):
    args = ["simulate", "--config", str(CONFIGS / "scalar_baseline.json"), "--no-timing"]
    main(args + ["--out", str(tmp_path / "a")])
    main(args + ["--out", str(tmp_path / "b")])
    assert (tmp_path / "a" / "sim.csv").read_bytes() == (tmp_path / "b" / "sim.csv").read_bytes()


def test_case1_with_random_schedule_is_config_error(tmp_path, capsys):
    path = _write(tmp_path, {"sim": {"controller_mode": "case1",
                                     "schedule": {"mode": "random", "min_gap": 0.02,
                                                  "max_gap": 0.1},
                                     "t_final": 1.0}})
    assert main(["simulate", "--config", path, "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "controller_mode" in err and "schedule.mode" in err


def test_missing_model_is_config_error(tmp_path, capsys):
    path = _write(tmp_path, {"sim": {"controller_mode": "case2",
                                     "model": str(tmp_path / "absent.dcop")}})
    assert main(["simulate", "--config", path, "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "absent.dcop" in capsys.readouterr().err


def test_unknown_key_reports_line(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text('{\n  "sim": {\n    "t_finale": 3\n  }\n}\n')
    assert main(["simulate", "--config", str(path), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert f"{path}:3" in capsys.readouterr().err


def test_invalid_json_reports_position(tmp_path, capsys):
    path = tmp_path / "broken.json"
    path.write_text('{\n  "sim": {,}\n}\n')
    assert main(["simulate", "--config", str(path), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert f"{path}:2:" in capsys.readouterr().err


def test_divergence_exits_runtime_with_partial_log(tmp_path):
    path = _write(tmp_path, {"plant": {"name": "scalar",
                                       "params": {"gain": 0.1, "state_bound": 0.01}},
                             "sim": {"initial_state": [0.005], "t_final": 20.0}})
    out = tmp_path / "o"
    assert main(["simulate", "--config", path, "--out", str(out)]) == EXIT_RUNTIME
    side = json.loads((out / "sim.json").read_text())
    assert side["diverged"]
    assert 1 < len(_rows(out / "sim.csv")) < 20002


def test_gen_data_entries_and_bytes(tiny, tmp_path):
    root, path, ds, _ = tiny
    assert len(load_dataset(ds)) == 120
    assert main(["gen-data", "--config", path, "--out", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "dataset.dcop").read_bytes() == Path(ds).read_bytes()


def test_gen_data_divergence_box(tmp_path, capsys):
    path = _write(tmp_path, {"plant": {"name": "scalar",
                                       "params": {"a": 5.0, "gain": 0.1, "state_bound": 0.01}},
                             "data": {"n_pairs": 20, "rollout_time": 5.0}})
    assert main(["gen-data", "--config", path, "--out", str(tmp_path / "o")]) == EXIT_RUNTIME
    assert "skip" in capsys.readouterr().err


def test_train_deterministic(tiny, tmp_path, capsys):
    root, path, ds, model = tiny
    assert main(["train", "--config", path, "--dataset", ds, "--out", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "model.dcop").read_bytes() == Path(model).read_bytes()
    text = capsys.readouterr().out
    assert "eps_mean" in text and "eps_max" in text
    meta = json.loads((tmp_path / "train.json").read_text())
    assert meta["eps_max"] == load_model(model).epsilon


def test_train_nan_loss_exits_runtime(tiny, tmp_path, capsys):
    _, path, ds, _ = tiny
    code = main(["train", "--config", path, "--dataset", ds, "--optimizer", "momentum",
                 "--learning-rate", "1e8", "--out", str(tmp_path)])
    assert code == EXIT_RUNTIME
    assert "epoch" in capsys.readouterr().err


def test_train_missing_dataset(tmp_path):
    assert main(["train", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["train", "--dataset", str(tmp_path / "none.dcop"),
                 "--out", str(tmp_path)]) == EXIT_IO


def test_corrupt_model_file_exits_io(tiny, tmp_path):
    _, _, _, model = tiny
    bad = tmp_path / "bad.dcop"
    data = bytearray(Path(model).read_bytes())
    data[20] ^= 0xFF
    bad.write_bytes(bytes(data))
    path = _write(tmp_path, {"plant": {"name": "pendulum"},
                             "sim": {"controller_mode": "case2", "model": str(bad),
                                     "t_final": 0.5}})
    assert main(["simulate", "--config", path, "--out", str(tmp_path / "o")]) in (EXIT_IO,
                                                                                  EXIT_CONFIG)


def test_simulate_case2_with_model(tiny, tmp_path, capsys):
    _, _, _, model = tiny
    path = _write(tmp_path, {"plant": {"name": "pendulum"},
                             "sim": {"controller_mode": "case2", "model": model,
                                     "initial_state": [0.3, 0.0], "t_final": 2.0}})
    assert main(["simulate", "--config", path, "--out", str(tmp_path / "o")]) == EXIT_OK
    assert "of intervals" in capsys.readouterr().out


def test_scaling_compare(tmp_path, capsys):
    path = _write(tmp_path, {"scaling": {"t_final": 4.0, "dt": 0.01}})
    code = main(["scaling", "--config", path, "--eps", "0,0.01,0.05,0.1", "--trials", "2",
                 "--compare", "--out", str(tmp_path / "o")])
    assert code == EXIT_OK
    for mode in ("case1", "case2"):
        rows = _rows(tmp_path / "o" / f"scaling_{mode}.csv")
        assert rows[0] == ["eps", "median", "mean", "std", "divergent"]
        assert len(rows) == 5
    text = capsys.readouterr().out
    assert "case1 median" in text and "case2 median" in text


def test_scaling_rejects_missing_zero(tmp_path):
    assert main(["scaling", "--eps", "0.01,0.1", "--trials", "1",
                 "--out", str(tmp_path)]) == EXIT_CONFIG


def test_bench_outputs(tiny, tmp_path, capsys):
    _, path, _, model = tiny
    code = main(["bench", "--config", path, "--model", model, "--n-evals", "100",
                 "--tol", "1e-3,1e-6", "--out", str(tmp_path)])
    assert code == EXIT_OK
    report = json.loads((tmp_path / "bench.json").read_text())
    assert report["speedup_ratio"] > 0
    assert [m["name"] for m in report["methods"]][:2] == ["solver tol=0.001", "solver tol=1e-06"]
    assert "speedup" in capsys.readouterr().out


def test_bench_small_n_is_config_error(tiny, tmp_path):
    _, path, _, model = tiny
    assert main(["bench", "--config", path, "--model", model, "--n-evals", "10",
                 "--out", str(tmp_path)]) == EXIT_CONFIG


def test_unwritable_output_exits_io(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["simulate", "--out", str(blocker / "sub")]) == EXIT_IO


def test_missing_config_exits_io(tmp_path):
    assert main(["simulate", "--config", str(tmp_path / "nope.json")]) == EXIT_IO


def test_global_flags_after_subcommand(tmp_path):
    assert main(["simulate", "--seed", "3", "--out", str(tmp_path), "--no-timing"]) == EXIT_OK
    assert json.loads((tmp_path / "manifest.json").read_text())["seed"] == 3


def test_digest_stable():
    a, b = load_config(str(CONFIGS / "scalar_case2.json")), load_config(
        str(CONFIGS / "scalar_case2.json"))
    assert a.digest == b.digest
    assert a.digest != load_config(None).digest


@pytest.mark.parametrize("name", sorted(p.name for p in CONFIGS.glob("*.json")))
def test_shipped_configs_parse(name):
    load_config(str(CONFIGS / name))
